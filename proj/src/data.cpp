#include "retro/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <string>

#include "retro/errors.hpp"
#include "retro/random.hpp"

namespace retro::data {

namespace {

// Portable sampling on top of mt19937_64 so datasets and views replay
// identically across standard libraries.
class Sampler {
 public:
  explicit Sampler(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }
  bool bernoulli(double p) { return uniform() < p; }
  double normal() {
    if (cached_) {
      cached_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    cached_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 engine_;
  bool cached_ = false;
  double spare_ = 0.0;
};

template <typename T>
void fisher_yates(std::vector<T>& items, Sampler& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    std::swap(items[i - 1], items[rng.index(i)]);
  }
}

struct Rgb {
  double r, g, b;
};

Rgb palette_color(std::size_t palette) {
  switch (palette) {
    case 0: return {1.0, 0.45, 0.15};
    case 1: return {0.15, 0.55, 1.0};
    default: {
      const double hue = std::fmod(0.61803398875 * static_cast<double>(palette), 1.0);
      auto channel = [hue](double offset) {
        return 0.55 + 0.45 * std::cos(2.0 * std::numbers::pi * (hue + offset));
      };
      return {channel(0.0), channel(1.0 / 3.0), channel(2.0 / 3.0)};
    }
  }
}

}  // namespace

void Dataset::validate() const {
  if (images.rank() != 4) throw FormatError("dataset images must be [N,C,H,W]");
  if (labels.empty()) throw FormatError("dataset is empty");
  if (images.dim(0) != labels.size()) {
    throw FormatError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                      std::to_string(labels.size()) + " labels");
  }
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= class_count) {
      throw FormatError("label " + std::to_string(label) + " outside [0," +
                        std::to_string(class_count) + ")");
    }
  }
}

Tensor Dataset::gather(std::span<const std::size_t> indices) const {
  const std::size_t per = channels() * height() * width();
  std::vector<float> out(indices.size() * per);
  auto src = images.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw DimensionError("dataset index out of range");
    std::copy_n(src.data() + indices[i] * per, per, out.data() + i * per);
  }
  return Tensor({indices.size(), channels(), height(), width()}, std::move(out));
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(class_count, 0);
  for (int label : labels) ++counts[static_cast<std::size_t>(label)];
  return counts;
}

void AugmentationConfig::validate() const {
  if (flip_prob < 0.0 || flip_prob > 1.0) throw ConfigError("flip_prob must be in [0,1]");
  if (brightness_jitter < 0.0 || brightness_jitter > 1.0) {
    throw ConfigError("brightness_jitter must be in [0,1]");
  }
  if (noise_std < 0.0) throw ConfigError("noise_std must be non-negative");
}

Dataset generate_synthetic(std::size_t classes, std::size_t per_class, std::size_t image_size,
                           std::uint64_t seed) {
  if (classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  if (image_size < 8) throw ConfigError("synthetic image size must be at least 8");
  if (per_class == 0) throw ConfigError("synthetic dataset needs at least 1 sample per class");

  const std::size_t s = image_size, n = classes * per_class, plane = s * s;
  std::vector<float> pixels(n * 3 * plane);
  std::vector<int> labels(n);
  const double two_pi = 2.0 * std::numbers::pi;
  const double size = static_cast<double>(s);

  std::vector<double> pattern(plane);
  for (std::size_t idx = 0; idx < n; ++idx) {
    const std::size_t cls = idx % classes;
    labels[idx] = static_cast<int>(cls);
    Sampler rng(mix_seed({seed, idx}));
    const std::size_t family = cls % 5;
    const Rgb base = palette_color(cls / 5);

    const double freq = rng.uniform(2.5, 4.5);
    const double phase1 = rng.uniform(0.0, two_pi), phase2 = rng.uniform(0.0, two_pi);
    const double cx = size * rng.uniform(0.3, 0.7), cy = size * rng.uniform(0.3, 0.7);
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) {
        const double fx = static_cast<double>(x), fy = static_cast<double>(y);
        double value = 0.0;
        switch (family) {
          case 0: value = std::cos(two_pi * freq * fy / size + phase1); break;
          case 1: value = std::cos(two_pi * freq * fx / size + phase1); break;
          case 2:
            value = std::cos(two_pi * freq * fx / size + phase1) *
                    std::cos(two_pi * freq * fy / size + phase2);
            break;
          case 3: {
            const double r = std::hypot(fx - cx, fy - cy);
            value = std::cos(two_pi * freq * r / size + phase1);
            break;
          }
          default: value = -1.0; break;
        }
        pattern[y * s + x] = value;
      }
    }
    if (family == 4) {
      const std::size_t blobs = 2 + rng.index(2);
      const double sigma = size / 8.0;
      for (std::size_t k = 0; k < blobs; ++k) {
        const double bx = size * rng.uniform(0.15, 0.85), by = size * rng.uniform(0.15, 0.85);
        for (std::size_t y = 0; y < s; ++y) {
          for (std::size_t x = 0; x < s; ++x) {
            const double d2 = (static_cast<double>(x) - bx) * (static_cast<double>(x) - bx) +
                              (static_cast<double>(y) - by) * (static_cast<double>(y) - by);
            pattern[y * s + x] += 2.0 * std::exp(-d2 / (2.0 * sigma * sigma));
          }
        }
      }
      for (double& v : pattern) v = std::min(v, 1.0);
    }

    const double contrast = rng.uniform(0.2, 0.4);
    const double background = rng.uniform(0.3, 0.6);
    const Rgb tint{base.r + rng.uniform(-0.2, 0.2), base.g + rng.uniform(-0.2, 0.2),
                   base.b + rng.uniform(-0.2, 0.2)};
    const double channel_tint[3] = {tint.r, tint.g, tint.b};
    const double channel_bias[3] = {rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1),
                                    rng.uniform(-0.1, 0.1)};
    float* img = pixels.data() + idx * 3 * plane;
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t p = 0; p < plane; ++p) {
        const double v = background + channel_bias[c] +
                         contrast * channel_tint[c] * pattern[p] + 0.08 * rng.normal();
        img[c * plane + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  Dataset ds{Tensor({n, 3, s, s}, std::move(pixels)), std::move(labels), classes};
  return ds;
}

Dataset load_cifar_binary(const std::filesystem::path& path, std::size_t class_count) {
  constexpr std::size_t kPixels = 3 * 32 * 32;
  constexpr std::size_t kRecord = 1 + kPixels;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open CIFAR file " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.empty() || bytes.size() % kRecord != 0) {
    throw FormatError("CIFAR file " + path.string() + " has " + std::to_string(bytes.size()) +
                      " bytes, not a positive multiple of " + std::to_string(kRecord));
  }
  const std::size_t n = bytes.size() / kRecord;
  std::vector<float> pixels(n * kPixels);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * kRecord;
    if (rec[0] >= class_count) {
      throw FormatError("CIFAR record " + std::to_string(i) + " has label " +
                        std::to_string(rec[0]) + " >= " + std::to_string(class_count));
    }
    labels[i] = rec[0];
    for (std::size_t p = 0; p < kPixels; ++p) {
      pixels[i * kPixels + p] = static_cast<float>(rec[1 + p]) / 255.0f;
    }
  }
  return Dataset{Tensor({n, 3, 32, 32}, std::move(pixels)), std::move(labels), class_count};
}

Tensor horizontal_flip(const Tensor& batch) {
  if (batch.rank() != 4) throw DimensionError("horizontal_flip expects [B,C,H,W]");
  const std::size_t rows = batch.dim(0) * batch.dim(1) * batch.dim(2), w = batch.dim(3);
  std::vector<float> out(batch.numel());
  auto src = batch.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::reverse_copy(src.begin() + r * w, src.begin() + (r + 1) * w, out.begin() + r * w);
  }
  return Tensor(batch.shape(), std::move(out));
}

Tensor augment(const Tensor& batch, const AugmentationConfig& cfg, std::uint64_t stream_seed) {
  cfg.validate();
  if (batch.rank() != 4 || batch.dim(0) == 0) {
    throw DimensionError("augment expects a non-empty [B,C,H,W] batch, got " +
                         shape_str(batch.shape()));
  }
  const std::size_t b = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  const std::size_t per = c * h * w;
  const auto pad = static_cast<std::ptrdiff_t>(cfg.crop_padding);
  std::vector<float> out(batch.numel());
  auto src = batch.data();
  Sampler rng(stream_seed);
  for (std::size_t i = 0; i < b; ++i) {
    std::ptrdiff_t dy = 0, dx = 0;
    if (pad > 0) {
      dy = static_cast<std::ptrdiff_t>(rng.index(static_cast<std::size_t>(2 * pad + 1))) - pad;
      dx = static_cast<std::ptrdiff_t>(rng.index(static_cast<std::size_t>(2 * pad + 1))) - pad;
    }
    const bool flip = cfg.flip_prob > 0.0 && rng.bernoulli(cfg.flip_prob);
    const double brightness =
        cfg.brightness_jitter > 0.0
            ? rng.uniform(1.0 - cfg.brightness_jitter, 1.0 + cfg.brightness_jitter)
            : 1.0;
    const float* img = src.data() + i * per;
    float* dst = out.data() + i * per;
    // Crop window of the zero-padded image, then optional mirror.
    std::vector<float> row(w);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < h; ++y) {
        const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
        std::fill(row.begin(), row.end(), 0.0f);
        if (sy >= 0 && sy < static_cast<std::ptrdiff_t>(h)) {
          const float* line = img + (ch * h + static_cast<std::size_t>(sy)) * w;
          for (std::size_t x = 0; x < w; ++x) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x) + dx;
            if (sx >= 0 && sx < static_cast<std::ptrdiff_t>(w)) row[x] = line[sx];
          }
          if (flip) std::reverse(row.begin(), row.end());
        }
        float* out_row = dst + (ch * h + y) * w;
        for (std::size_t x = 0; x < w; ++x) {
          double value = row[x] * brightness;
          if (cfg.noise_std > 0.0) value += cfg.noise_std * rng.normal();
          out_row[x] = static_cast<float>(std::clamp(value, 0.0, 1.0));
        }
      }
    }
  }
  return Tensor(batch.shape(), std::move(out));
}

ViewPair two_views(const Tensor& batch, const AugmentationConfig& cfg, std::uint64_t epoch,
                   std::uint64_t step) {
  return {augment(batch, cfg, mix_seed({cfg.seed, epoch, step, 0})),
          augment(batch, cfg, mix_seed({cfg.seed, epoch, step, 1}))};
}

Dataset label_fraction_subset(const Dataset& ds, double fraction, std::uint64_t seed,
                              std::vector<std::size_t>* selected) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ConfigError("label fraction must be in (0,1], got " + std::to_string(fraction));
  }
  std::vector<std::vector<std::size_t>> by_class(ds.class_count);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  }
  std::vector<std::size_t> chosen;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& members = by_class[c];
    // Guard against 0.01 * 500 landing a hair above 5.
    const double want = std::ceil(fraction * static_cast<double>(members.size()) - 1e-9);
    const auto take = static_cast<std::size_t>(want);
    if (take == 0) {
      throw ConfigError("label fraction " + std::to_string(fraction) + " selects no samples of class " +
                        std::to_string(c));
    }
    Sampler rng(mix_seed({seed, c, 0x5ab5e7ULL}));
    fisher_yates(members, rng);
    chosen.insert(chosen.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(take));
  }
  std::sort(chosen.begin(), chosen.end());
  Dataset out{ds.gather(chosen), ds.gather_labels(chosen), ds.class_count};
  if (selected) *selected = std::move(chosen);
  return out;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Sampler rng(mix_seed({seed, epoch, 0xba7c4ULL}));
  fisher_yates(order, rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

}  // namespace retro::data
