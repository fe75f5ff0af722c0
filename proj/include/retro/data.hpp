#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "retro/tensor.hpp"

namespace retro::data {

/// Images [N,C,H,W] with values in [0,1] and labels in [0, class_count).
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::size_t class_count = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }

  void validate() const;
  Tensor gather(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> class_counts() const;
};

struct AugmentationConfig {
  std::size_t crop_padding = 4;
  double flip_prob = 0.5;
  double brightness_jitter = 0.4;
  double noise_std = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
  static AugmentationConfig identity() { return {0, 0.0, 0.0, 0.0, 0}; }
};

struct ViewPair {
  Tensor v;
  Tensor v_prime;
};

// Class c draws pattern family c % 5 (horizontal stripes, vertical stripes,
// checkerboard, rings, blobs) in colour palette c / 5, with per-sample phase,
// frequency, placement, contrast, background and pixel noise. Class identity
// does not depend on `seed`, so datasets with different seeds share classes.
Dataset generate_synthetic(std::size_t classes, std::size_t per_class, std::size_t image_size,
                           std::uint64_t seed);

// CIFAR-10 binary layout: records of 1 label byte + 3072 bytes (R, G, B planes of 32x32).
Dataset load_cifar_binary(const std::filesystem::path& path, std::size_t class_count = 10);

// Independently augmented views; streams keyed by (cfg.seed, epoch, step, view).
ViewPair two_views(const Tensor& batch, const AugmentationConfig& cfg, std::uint64_t epoch,
                   std::uint64_t step);

// One augmentation pass with an explicit stream seed.
Tensor augment(const Tensor& batch, const AugmentationConfig& cfg, std::uint64_t stream_seed);

Tensor horizontal_flip(const Tensor& batch);

// Per-class sample of ceil(fraction * class_size) items. Equal seeds give
// nested subsets for increasing fractions. `selected` receives the chosen
// source indices in ascending order.
Dataset label_fraction_subset(const Dataset& ds, double fraction, std::uint64_t seed,
                              std::vector<std::size_t>* selected = nullptr);

// Shuffled partition of [0,n) into batches. A trailing batch of one sample is
// merged into the previous batch so batchnorm always sees two samples.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed, std::uint64_t epoch);

}  // namespace retro::data
