#include "retro/logging.hpp"

#include <cstdlib>
#include <string>

#include <spdlog/spdlog.h>

namespace retro {

void init_logging() {
  const char* env = std::getenv("RETRO_LOG");
  if (!env || !*env) {
    spdlog::set_level(spdlog::level::info);
    return;
  }
  const std::string name(env);
  const auto level = spdlog::level::from_str(name);
  // from_str maps unknown names to off; only accept "off" when asked for.
  if (level == spdlog::level::off && name != "off") {
    spdlog::set_level(spdlog::level::info);
    spdlog::warn("RETRO_LOG='{}' is not a log level; using info", name);
    return;
  }
  spdlog::set_level(level);
}

}  // namespace retro
