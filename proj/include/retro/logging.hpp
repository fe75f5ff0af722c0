#pragma once

namespace retro {

// Applies the RETRO_LOG environment variable (trace, debug, info, warn,
// error, critical, off) to the default logger. Unset means info.
void init_logging();

}  // namespace retro
