#include "retro/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>

#include "gemm.hpp"
#include "retro/errors.hpp"

namespace retro::ops {

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " +
                         std::to_string(rank) + ", got shape " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

int as_int(std::size_t v) { return static_cast<int>(v); }

}  // namespace

Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear", "input");
  require_rank(weight, 2, "linear", "weight");
  require_rank(bias, 1, "linear", "bias");
  const std::size_t batch = x.dim(0), in = x.dim(1), out = weight.dim(0);
  if (weight.dim(1) != in || bias.dim(0) != out) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()) + " and bias " + shape_str(bias.shape()));
  }
  std::vector<float> y(batch * out);
  for (std::size_t n = 0; n < batch; ++n) {
    std::copy(bias.data().begin(), bias.data().end(), y.begin() + n * out);
  }
  detail::gemm(false, true, as_int(batch), as_int(out), as_int(in), 1.0f, x.data().data(),
               as_int(in), weight.data().data(), as_int(in), 1.0f, y.data(), as_int(out));
  Tensor result({batch, out}, std::move(y));
  if (tape.needs_grad({&x, &weight, &bias})) {
    tape.record({&x, &weight, &bias}, result,
                [x, weight, bias, result, batch, in, out]() mutable {
                  const float* gy = result.grad().data();
                  if (x.requires_grad()) {
                    detail::gemm(false, false, as_int(batch), as_int(in), as_int(out), 1.0f, gy,
                                 as_int(out), weight.data().data(), as_int(in), 1.0f,
                                 x.grad_buffer().data(), as_int(in));
                  }
                  if (weight.requires_grad()) {
                    detail::gemm(true, false, as_int(out), as_int(in), as_int(batch), 1.0f, gy,
                                 as_int(out), x.data().data(), as_int(in), 1.0f,
                                 weight.grad_buffer().data(), as_int(in));
                  }
                  if (bias.requires_grad()) {
                    auto gb = bias.grad_buffer();
                    for (std::size_t o = 0; o < out; ++o) {
                      double acc = 0.0;
                      for (std::size_t n = 0; n < batch; ++n) acc += gy[n * out + o];
                      gb[o] += static_cast<float>(acc);
                    }
                  }
                });
  }
  return result;
}

Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt", "lhs");
  require_rank(b, 2, "matmul_nt", "rhs");
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("matmul_nt: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<float> y(m * n, 0.0f);
  detail::gemm(false, true, as_int(m), as_int(n), as_int(k), 1.0f, a.data().data(), as_int(k),
               b.data().data(), as_int(k), 0.0f, y.data(), as_int(n));
  Tensor result({m, n}, std::move(y));
  if (tape.needs_grad({&a, &b})) {
    tape.record({&a, &b}, result, [a, b, result, m, n, k]() mutable {
      const float* gy = result.grad().data();
      if (a.requires_grad()) {
        detail::gemm(false, false, as_int(m), as_int(k), as_int(n), 1.0f, gy, as_int(n),
                     b.data().data(), as_int(k), 1.0f, a.grad_buffer().data(), as_int(k));
      }
      if (b.requires_grad()) {
        detail::gemm(true, false, as_int(n), as_int(k), as_int(m), 1.0f, gy, as_int(n),
                     a.data().data(), as_int(k), 1.0f, b.grad_buffer().data(), as_int(k));
      }
    });
  }
  return result;
}

namespace {

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t filters, kh, kw, stride, padding;
  std::size_t out_h, out_w;
  std::size_t patch() const { return channels * kh * kw; }
  std::size_t positions() const { return out_h * out_w; }
  std::size_t columns() const { return batch * positions(); }
};

// Output columns [lo, hi) whose tap j lands inside a row of `width`.
std::pair<std::size_t, std::size_t> valid_span(const ConvGeometry& g, std::size_t j) {
  const std::size_t out = g.out_w;
  std::size_t lo = 0;
  while (lo < out && lo * g.stride + j < g.padding) ++lo;
  std::size_t hi = lo;
  while (hi < out && hi * g.stride + j < g.padding + g.width) ++hi;
  return {lo, hi};
}

// col[(c,i,j), (b,oh,ow)]
void im2col(const ConvGeometry& g, const float* x, float* col) {
  const std::size_t ncols = g.columns();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        float* row = col + ((c * g.kh + i) * g.kw + j) * ncols;
        const auto [lo, hi] = valid_span(g, j);
        const std::size_t first = lo * g.stride + j - g.padding;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const float* plane = x + (b * g.channels + c) * g.height * g.width;
          float* dst = row + b * g.positions();
          for (std::size_t oh = 0; oh < g.out_h; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + i) -
                                      static_cast<std::ptrdiff_t>(g.padding);
            float* out_row = dst + oh * g.out_w;
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height) || lo == hi) {
              std::fill(out_row, out_row + g.out_w, 0.0f);
              continue;
            }
            const float* src = plane + static_cast<std::size_t>(ih) * g.width + first;
            std::fill(out_row, out_row + lo, 0.0f);
            if (g.stride == 1) {
              std::copy_n(src, hi - lo, out_row + lo);
            } else {
              for (std::size_t ow = lo; ow < hi; ++ow) out_row[ow] = src[(ow - lo) * g.stride];
            }
            std::fill(out_row + hi, out_row + g.out_w, 0.0f);
          }
        }
      }
    }
  }
}

void col2im_accumulate(const ConvGeometry& g, const float* col, float* dx) {
  const std::size_t ncols = g.columns();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const float* row = col + ((c * g.kh + i) * g.kw + j) * ncols;
        const auto [lo, hi] = valid_span(g, j);
        if (lo == hi) continue;
        const std::size_t first = lo * g.stride + j - g.padding;
        for (std::size_t b = 0; b < g.batch; ++b) {
          float* plane = dx + (b * g.channels + c) * g.height * g.width;
          const float* src = row + b * g.positions();
          for (std::size_t oh = 0; oh < g.out_h; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + i) -
                                      static_cast<std::ptrdiff_t>(g.padding);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
            float* dst = plane + static_cast<std::size_t>(ih) * g.width + first;
            const float* in = src + oh * g.out_w;
            for (std::size_t ow = lo; ow < hi; ++ow) dst[(ow - lo) * g.stride] += in[ow];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& kernel, std::size_t stride,
              std::size_t padding) {
  require_rank(x, 4, "conv2d", "input");
  require_rank(kernel, 4, "conv2d", "kernel");
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  ConvGeometry g{x.dim(0),      x.dim(1),      x.dim(2), x.dim(3), kernel.dim(0),
                 kernel.dim(2), kernel.dim(3), stride,   padding,  0,
                 0};
  if (kernel.dim(1) != g.channels) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " has " +
                         std::to_string(g.channels) + " channels but kernel " +
                         shape_str(kernel.shape()) + " expects " +
                         std::to_string(kernel.dim(1)));
  }
  const std::size_t padded_h = g.height + 2 * padding, padded_w = g.width + 2 * padding;
  if (g.kh > padded_h || g.kw > padded_w) {
    throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) +
                         " larger than padded input " + shape_str(x.shape()));
  }
  if ((padded_h - g.kh) % stride != 0 || (padded_w - g.kw) % stride != 0) {
    throw DimensionError("conv2d: non-integer output size for input " + shape_str(x.shape()) +
                         ", kernel " + shape_str(kernel.shape()) + ", stride " +
                         std::to_string(stride) + ", padding " + std::to_string(padding));
  }
  g.out_h = (padded_h - g.kh) / stride + 1;
  g.out_w = (padded_w - g.kw) / stride + 1;

  const std::size_t k = g.patch(), ncols = g.columns(), p = g.positions();
  std::vector<float> col(k * ncols);
  im2col(g, x.data().data(), col.data());
  std::vector<float> tmp(g.filters * ncols);
  detail::gemm(false, false, as_int(g.filters), as_int(ncols), as_int(k), 1.0f,
               kernel.data().data(), as_int(k), col.data(), as_int(ncols), 0.0f, tmp.data(),
               as_int(ncols));
  std::vector<float> y(g.batch * g.filters * p);
  for (std::size_t f = 0; f < g.filters; ++f) {
    for (std::size_t b = 0; b < g.batch; ++b) {
      std::copy_n(tmp.data() + f * ncols + b * p, p, y.data() + (b * g.filters + f) * p);
    }
  }
  Tensor result({g.batch, g.filters, g.out_h, g.out_w}, std::move(y));
  if (tape.needs_grad({&x, &kernel})) {
    if (!kernel.requires_grad()) col = {};
    tape.record({&x, &kernel}, result,
                [x, kernel, result, g, col = std::move(col)]() mutable {
                  const std::size_t k = g.patch(), ncols = g.columns(), p = g.positions();
                  const float* gy = result.grad().data();
                  std::vector<float> gtmp(g.filters * ncols);
                  for (std::size_t f = 0; f < g.filters; ++f) {
                    for (std::size_t b = 0; b < g.batch; ++b) {
                      std::copy_n(gy + (b * g.filters + f) * p, p,
                                  gtmp.data() + f * ncols + b * p);
                    }
                  }
                  if (kernel.requires_grad()) {
                    detail::gemm(false, true, as_int(g.filters), as_int(k), as_int(ncols), 1.0f,
                                 gtmp.data(), as_int(ncols), col.data(), as_int(ncols), 1.0f,
                                 kernel.grad_buffer().data(), as_int(k));
                  }
                  if (x.requires_grad()) {
                    std::vector<float> gcol(k * ncols);
                    detail::gemm(true, false, as_int(k), as_int(ncols), as_int(g.filters), 1.0f,
                                 kernel.data().data(), as_int(k), gtmp.data(), as_int(ncols),
                                 0.0f, gcol.data(), as_int(ncols));
                    col2im_accumulate(g, gcol.data(), x.grad_buffer().data());
                  }
                });
  }
  return result;
}

Tensor relu(Tape& tape, const Tensor& x) {
  std::vector<float> y(x.numel());
  // NaN passes through so a divergence still reaches the loss check.
  std::transform(x.data().begin(), x.data().end(), y.begin(),
                 [](float v) { return v > 0.0f || std::isnan(v) ? v : 0.0f; });
  Tensor result(x.shape(), std::move(y));
  if (tape.needs_grad({&x})) {
    tape.record({&x}, result, [x, result]() mutable {
      auto gx = x.grad_buffer();
      auto gy = result.grad();
      auto xv = x.data();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        if (xv[i] > 0.0f) gx[i] += gy[i];
      }
    });
  }
  return result;
}

Tensor batchnorm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 std::span<float> running_mean, std::span<float> running_var,
                 const BatchNormOptions& options) {
  if (x.rank() != 2 && x.rank() != 4) {
    throw DimensionError("batchnorm: input must be [B,C] or [B,C,H,W], got " +
                         shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), channels = x.dim(1);
  const std::size_t spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (gamma.numel() != channels || beta.numel() != channels || running_mean.size() != channels ||
      running_var.size() != channels) {
    throw DimensionError("batchnorm: parameters do not match " + std::to_string(channels) +
                         " channels of input " + shape_str(x.shape()));
  }
  const bool use_batch_stats = options.mode != BatchNormMode::kEval;
  const std::size_t count = batch * spatial;
  if (use_batch_stats && count < 2) {
    throw ContractError("batchnorm: train mode needs at least 2 values per channel, got input " +
                        shape_str(x.shape()));
  }

  const float* xv = x.data().data();
  std::vector<float> mean(channels), invstd(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    if (use_batch_stats) {
      double s = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const float* p = xv + (b * channels + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const float* p = xv + (b * channels + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) {
          const double d = p[i] - mu;
          ss += d * d;
        }
      }
      const double var = ss / static_cast<double>(count);
      mean[c] = static_cast<float>(mu);
      invstd[c] = static_cast<float>(1.0 / std::sqrt(var + options.eps));
      if (options.mode == BatchNormMode::kTrain) {
        const double unbiased = ss / static_cast<double>(count - 1);
        running_mean[c] = static_cast<float>((1.0 - options.momentum) * running_mean[c] +
                                             options.momentum * mu);
        running_var[c] = static_cast<float>((1.0 - options.momentum) * running_var[c] +
                                            options.momentum * unbiased);
      }
    } else {
      mean[c] = running_mean[c];
      invstd[c] = static_cast<float>(1.0 / std::sqrt(static_cast<double>(running_var[c]) +
                                                     options.eps));
    }
  }

  std::vector<float> xhat(x.numel()), y(x.numel());
  const float* gv = gamma.data().data();
  const float* bv = beta.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t off = (b * channels + c) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) {
        const float h = (xv[off + i] - mean[c]) * invstd[c];
        xhat[off + i] = h;
        y[off + i] = h * gv[c] + bv[c];
      }
    }
  }
  Tensor result(x.shape(), std::move(y));
  if (tape.needs_grad({&x, &gamma, &beta})) {
    tape.record({&x, &gamma, &beta}, result,
                [x, gamma, beta, result, xhat = std::move(xhat), invstd = std::move(invstd),
                 batch, channels, spatial, use_batch_stats]() mutable {
                  const float* gy = result.grad().data();
                  const double n = static_cast<double>(batch * spatial);
                  std::vector<double> sum_gy(channels, 0.0), sum_gy_xhat(channels, 0.0);
                  for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t c = 0; c < channels; ++c) {
                      const std::size_t off = (b * channels + c) * spatial;
                      for (std::size_t i = 0; i < spatial; ++i) {
                        sum_gy[c] += gy[off + i];
                        sum_gy_xhat[c] += static_cast<double>(gy[off + i]) * xhat[off + i];
                      }
                    }
                  }
                  if (gamma.requires_grad()) {
                    auto gg = gamma.grad_buffer();
                    for (std::size_t c = 0; c < channels; ++c) {
                      gg[c] += static_cast<float>(sum_gy_xhat[c]);
                    }
                  }
                  if (beta.requires_grad()) {
                    auto gb = beta.grad_buffer();
                    for (std::size_t c = 0; c < channels; ++c) gb[c] += static_cast<float>(sum_gy[c]);
                  }
                  if (!x.requires_grad()) return;
                  auto gx = x.grad_buffer();
                  const float* gv = gamma.data().data();
                  for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t c = 0; c < channels; ++c) {
                      const std::size_t off = (b * channels + c) * spatial;
                      const double scale_c = static_cast<double>(gv[c]) * invstd[c];
                      if (use_batch_stats) {
                        const double mean_gy = sum_gy[c] / n;
                        const double mean_gy_xhat = sum_gy_xhat[c] / n;
                        for (std::size_t i = 0; i < spatial; ++i) {
                          gx[off + i] += static_cast<float>(
                              scale_c * (gy[off + i] - mean_gy - xhat[off + i] * mean_gy_xhat));
                        }
                      } else {
                        for (std::size_t i = 0; i < spatial; ++i) {
                          gx[off + i] += static_cast<float>(scale_c * gy[off + i]);
                        }
                      }
                    }
                  }
                });
  }
  return result;
}

Tensor global_avg_pool(Tape& tape, const Tensor& x) {
  require_rank(x, 4, "global_avg_pool", "input");
  const std::size_t rows = x.dim(0) * x.dim(1), spatial = x.dim(2) * x.dim(3);
  if (spatial == 0) throw DimensionError("global_avg_pool: empty spatial extent");
  std::vector<float> y(rows);
  const float* xv = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < spatial; ++i) s += xv[r * spatial + i];
    y[r] = static_cast<float>(s / static_cast<double>(spatial));
  }
  Tensor result({x.dim(0), x.dim(1)}, std::move(y));
  if (tape.needs_grad({&x})) {
    tape.record({&x}, result, [x, result, rows, spatial]() mutable {
      auto gx = x.grad_buffer();
      auto gy = result.grad();
      const float inv = 1.0f / static_cast<float>(spatial);
      for (std::size_t r = 0; r < rows; ++r) {
        const float g = gy[r] * inv;
        for (std::size_t i = 0; i < spatial; ++i) gx[r * spatial + i] += g;
      }
    });
  }
  return result;
}

Tensor l2_normalize(Tape& tape, const Tensor& x) {
  require_rank(x, 2, "l2_normalize", "input");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<float> y(x.numel());
  std::vector<double> norms(rows);
  const float* xv = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < cols; ++c) ss += static_cast<double>(xv[r * cols + c]) * xv[r * cols + c];
    // NaN rows pass through and surface as a non-finite loss.
    if (ss == 0.0) {
      throw DegenerateInputError("l2_normalize: row " + std::to_string(r) + " has zero norm");
    }
    norms[r] = std::sqrt(ss);
    for (std::size_t c = 0; c < cols; ++c) {
      y[r * cols + c] = static_cast<float>(xv[r * cols + c] / norms[r]);
    }
  }
  Tensor result(x.shape(), std::move(y));
  if (tape.needs_grad({&x})) {
    tape.record({&x}, result, [x, result, norms = std::move(norms), rows, cols]() mutable {
      auto gx = x.grad_buffer();
      auto gy = result.grad();
      auto yv = result.data();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += static_cast<double>(yv[r * cols + c]) * gy[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c) {
          gx[r * cols + c] +=
              static_cast<float>((gy[r * cols + c] - yv[r * cols + c] * dot) / norms[r]);
        }
      }
    });
  }
  return result;
}

Tensor row_dot(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "row_dot", "lhs");
  require_same_shape(a, b, "row_dot");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  std::vector<float> y(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      s += static_cast<double>(a.data()[r * cols + c]) * b.data()[r * cols + c];
    }
    y[r] = static_cast<float>(s);
  }
  Tensor result({rows, 1}, std::move(y));
  if (tape.needs_grad({&a, &b})) {
    tape.record({&a, &b}, result, [a, b, result, rows, cols]() mutable {
      auto gy = result.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += gy[r] * b.data()[r * cols + c];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gb[r * cols + c] += gy[r] * a.data()[r * cols + c];
      }
    });
  }
  return result;
}

Tensor concat_cols(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "concat_cols", "lhs");
  require_rank(b, 2, "concat_cols", "rhs");
  if (a.dim(0) != b.dim(0)) {
    throw DimensionError("concat_cols: row counts differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const std::size_t rows = a.dim(0), p = a.dim(1), q = b.dim(1), w = p + q;
  std::vector<float> y(rows * w);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().data() + r * p, p, y.data() + r * w);
    std::copy_n(b.data().data() + r * q, q, y.data() + r * w + p);
  }
  Tensor result({rows, w}, std::move(y));
  if (tape.needs_grad({&a, &b})) {
    tape.record({&a, &b}, result, [a, b, result, rows, p, q, w]() mutable {
      auto gy = result.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < p; ++c) ga[r * p + c] += gy[r * w + c];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < q; ++c) gb[r * q + c] += gy[r * w + p + c];
      }
    });
  }
  return result;
}

Tensor scale(Tape& tape, const Tensor& x, float factor) {
  std::vector<float> y(x.numel());
  std::transform(x.data().begin(), x.data().end(), y.begin(),
                 [factor](float v) { return v * factor; });
  Tensor result(x.shape(), std::move(y));
  if (tape.needs_grad({&x})) {
    tape.record({&x}, result, [x, result, factor]() mutable {
      auto gx = x.grad_buffer();
      auto gy = result.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * factor;
    });
  }
  return result;
}

namespace {

template <typename Forward, typename GradA, typename GradB>
Tensor binary_elementwise(Tape& tape, const Tensor& a, const Tensor& b, const char* name,
                          Forward forward, GradA grad_a, GradB grad_b) {
  require_same_shape(a, b, name);
  std::vector<float> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = forward(a.data()[i], b.data()[i]);
  Tensor result(a.shape(), std::move(y));
  if (tape.needs_grad({&a, &b})) {
    tape.record({&a, &b}, result, [a, b, result, grad_a, grad_b]() mutable {
      auto gy = result.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += grad_a(gy[i], a.data()[i], b.data()[i]);
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += grad_b(gy[i], a.data()[i], b.data()[i]);
      }
    });
  }
  return result;
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      tape, a, b, "add", [](float x, float y) { return x + y; },
      [](float g, float, float) { return g; }, [](float g, float, float) { return g; });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      tape, a, b, "sub", [](float x, float y) { return x - y; },
      [](float g, float, float) { return g; }, [](float g, float, float) { return -g; });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      tape, a, b, "mul", [](float x, float y) { return x * y; },
      [](float g, float, float y) { return g * y; }, [](float g, float x, float) { return g * x; });
}

Tensor sum(Tape& tape, const Tensor& x) {
  double s = 0.0;
  for (float v : x.data()) s += v;
  Tensor result = Tensor::scalar(static_cast<float>(s));
  if (tape.needs_grad({&x})) {
    tape.record({&x}, result, [x, result]() mutable {
      const float g = result.grad()[0];
      for (float& v : x.grad_buffer()) v += g;
    });
  }
  return result;
}

Tensor mean(Tape& tape, const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean: empty tensor");
  double s = 0.0;
  for (float v : x.data()) s += v;
  const double n = static_cast<double>(x.numel());
  Tensor result = Tensor::scalar(static_cast<float>(s / n));
  if (tape.needs_grad({&x})) {
    tape.record({&x}, result, [x, result, n]() mutable {
      const float g = static_cast<float>(result.grad()[0] / n);
      for (float& v : x.grad_buffer()) v += g;
    });
  }
  return result;
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy", "logits");
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits.shape()));
  }
  if (rows == 0) throw DimensionError("cross_entropy: empty batch");
  const float* lv = logits.data().data();
  std::vector<float> probs(logits.numel());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= classes) {
      throw DimensionError("cross_entropy: label " + std::to_string(labels[r]) +
                           " outside [0," + std::to_string(classes) + ")");
    }
    const float* row = lv + r * classes;
    const double mx = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    const double log_z = mx + std::log(z);
    total += log_z - row[labels[r]];
    for (std::size_t c = 0; c < classes; ++c) {
      probs[r * classes + c] = static_cast<float>(std::exp(row[c] - log_z));
    }
  }
  Tensor result = Tensor::scalar(static_cast<float>(total / static_cast<double>(rows)));
  if (tape.needs_grad({&logits})) {
    std::vector<int> owned(labels.begin(), labels.end());
    tape.record({&logits}, result,
                [logits, result, probs = std::move(probs), owned = std::move(owned), rows,
                 classes]() mutable {
                  auto gl = logits.grad_buffer();
                  const double g = result.grad()[0] / static_cast<double>(rows);
                  for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < classes; ++c) {
                      const double target = static_cast<int>(c) == owned[r] ? 1.0 : 0.0;
                      gl[r * classes + c] += static_cast<float>(g * (probs[r * classes + c] - target));
                    }
                  }
                });
  }
  return result;
}

}  // namespace retro::ops
