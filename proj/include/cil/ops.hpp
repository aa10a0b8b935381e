#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cil/tensor.hpp"

namespace cil {

namespace detail {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using StridedMap = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;
using MutableStridedMap = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;

inline void check_finite([[maybe_unused]] const Tensor& t, [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  for (float v : t.data()) {
    if (!std::isfinite(v)) throw Error(std::string(op) + " produced a non-finite value");
  }
#endif
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + shape_string(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

inline Tensor scalar_tensor(float value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<float>{value}, requires_grad);
}

struct ConvGeometry {
  std::size_t n, c, h, w, out_c, k, s, p;
  std::size_t ph() const { return h + 2 * p; }
  std::size_t pw() const { return w + 2 * p; }
  std::size_t oh() const { return (h + 2 * p - k) / s + 1; }
  std::size_t ow() const { return (w + 2 * p - k) / s + 1; }
  std::size_t positions() const { return oh() * ow(); }
  std::size_t rows() const { return n * positions(); }
  std::size_t patch() const { return k * k * c; }
  std::size_t padded_size() const { return n * ph() * pw() * c; }
};

/// Per-sample patch builder for conv2d.
class PatchScratch {
 public:
  explicit PatchScratch(const ConvGeometry& g)
      : g_(g), padded_(g.ph() * g.pw() * g.c, 0.0f), cols_(g.positions() * g.patch()) {}

  /// Sample `b` of an NCHW tensor → patch rows.
  void gather(const float* in, std::size_t b) {
    const std::size_t c = g_.c;
    const auto plane = static_cast<long>(g_.h * g_.w);
    for (std::size_t y = 0; y < g_.h; ++y) {
      StridedMap src(in + (b * c * g_.h + y) * g_.w, static_cast<long>(c), static_cast<long>(g_.w),
                     Eigen::OuterStride<>(plane));
      MatrixMap dst(padded_.data() + ((y + g_.p) * g_.pw() + g_.p) * c, static_cast<long>(g_.w), static_cast<long>(c));
      dst = src.transpose();
    }
    const std::size_t run = g_.k * c;
    float* row = cols_.data();
    for (std::size_t oy = 0; oy < g_.oh(); ++oy)
      for (std::size_t ox = 0; ox < g_.ow(); ++ox)
        for (std::size_t ky = 0; ky < g_.k; ++ky, row += run)
          std::copy_n(padded_.data() + ((oy * g_.s + ky) * g_.pw() + ox * g_.s) * c, run, row);
  }

  /// Adjoint of gather: accumulate patch-row gradients into sample `b`.
  void scatter_add(const float* rows, float* grad, std::size_t b) {
    const std::size_t c = g_.c;
    std::fill(padded_.begin(), padded_.end(), 0.0f);
    const std::size_t run = g_.k * c;
    for (std::size_t oy = 0; oy < g_.oh(); ++oy)
      for (std::size_t ox = 0; ox < g_.ow(); ++ox)
        for (std::size_t ky = 0; ky < g_.k; ++ky, rows += run) {
          float* dst = padded_.data() + ((oy * g_.s + ky) * g_.pw() + ox * g_.s) * c;
          for (std::size_t j = 0; j < run; ++j) dst[j] += rows[j];
        }
    const auto plane = static_cast<long>(g_.h * g_.w);
    for (std::size_t y = 0; y < g_.h; ++y) {
      MutableStridedMap dst(grad + (b * c * g_.h + y) * g_.w, static_cast<long>(c), static_cast<long>(g_.w),
                            Eigen::OuterStride<>(plane));
      ConstMatrixMap src(padded_.data() + ((y + g_.p) * g_.pw() + g_.p) * c, static_cast<long>(g_.w),
                         static_cast<long>(c));
      dst += src.transpose();
    }
    // gather() relies on the border staying zero.
    std::fill(padded_.begin(), padded_.end(), 0.0f);
  }

  ConstMatrixMap matrix() const {
    return ConstMatrixMap(cols_.data(), static_cast<long>(g_.positions()), static_cast<long>(g_.patch()));
  }

 private:
  ConvGeometry g_;
  std::vector<float> padded_;
  std::vector<float> cols_;
};

/// OIKK weight → O × (K·K·C) matrix matching the patch-row layout.
inline RowMatrix permute_kernel(const Tensor& weight, const ConvGeometry& g) {
  RowMatrix out(static_cast<long>(g.out_c), static_cast<long>(g.patch()));
  const float* w = weight.ptr();
  for (std::size_t o = 0; o < g.out_c; ++o)
    for (std::size_t ch = 0; ch < g.c; ++ch)
      for (std::size_t ky = 0; ky < g.k; ++ky)
        for (std::size_t kx = 0; kx < g.k; ++kx)
          out(static_cast<long>(o), static_cast<long>((ky * g.k + kx) * g.c + ch)) = w[((o * g.c + ch) * g.k + ky) * g.k + kx];
  return out;
}

}  // namespace detail

/// 2-D convolution, NCHW input, OIKK weight.
///
/// Lowered per sample: the image is copied into a zero-padded HWC buffer so
/// that each output position's receptive field is K contiguous runs of K·C
/// floats, those rows form an (H'·W') × (K·K·C) patch matrix, and one GEMM
/// against the permuted kernel writes the NCHW output plane directly. The
/// backward pass rebuilds the patches instead of keeping them.
inline Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias,
                     int stride, int padding) {
  detail::require_rank(input, 4, "conv2d", "input");
  detail::require_rank(weight, 4, "conv2d", "weight");
  if (stride < 1) throw ShapeError("conv2d: stride must be positive");
  if (padding < 0) throw ShapeError("conv2d: padding must be non-negative");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t out_c = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != c) {
    throw ShapeError("conv2d: input channels (dim 1) = " + std::to_string(c) +
                     " but weight expects " + std::to_string(weight.dim(1)));
  }
  if (weight.dim(3) != k) throw ShapeError("conv2d: kernel must be square, got " + shape_string(weight.shape()));
  if (bias.numel() != out_c) {
    throw ShapeError("conv2d: bias has " + std::to_string(bias.numel()) + " entries for " +
                     std::to_string(out_c) + " output channels");
  }
  const auto p = static_cast<std::size_t>(padding);
  const auto s = static_cast<std::size_t>(stride);
  if (h + 2 * p < k) throw ShapeError("conv2d: padded height (dim 2) smaller than kernel");
  if (w + 2 * p < k) throw ShapeError("conv2d: padded width (dim 3) smaller than kernel");
  const detail::ConvGeometry geo{n, c, h, w, out_c, k, s, p};
  const auto positions = static_cast<long>(geo.positions());
  const auto patch = static_cast<long>(geo.patch());

  const detail::RowMatrix w_perm = detail::permute_kernel(weight, geo);
  Tensor out(Shape{n, out_c, geo.oh(), geo.ow()});
  {
    detail::PatchScratch scratch(geo);
    const float* bp = bias.ptr();
    for (std::size_t b = 0; b < n; ++b) {
      scratch.gather(input.ptr(), b);
      detail::MatrixMap o(out.ptr() + b * out_c * geo.positions(), static_cast<long>(out_c), positions);
      o.noalias() = w_perm * scratch.matrix().transpose();
      for (std::size_t oc = 0; oc < out_c; ++oc) o.row(static_cast<long>(oc)).array() += bp[oc];
    }
  }
  detail::check_finite(out, "conv2d");

  if (tape.tracks({&input, &weight, &bias})) {
    out.set_requires_grad(true);
    tape.record(out, [input = Tensor(input), weight = Tensor(weight), bias = Tensor(bias), out, geo, positions,
                      patch]() mutable {
      const std::size_t out_c = geo.out_c;
      const float* go = out.grad().data();
      detail::PatchScratch scratch(geo);
      detail::RowMatrix gw_perm = detail::RowMatrix::Zero(static_cast<long>(out_c), patch);
      detail::RowMatrix w_perm;
      detail::RowMatrix dcol;
      if (input.requires_grad()) {
        w_perm = detail::permute_kernel(weight, geo);
        dcol.resize(positions, patch);
      }
      float* gi = input.requires_grad() ? input.ensure_grad().data() : nullptr;
      for (std::size_t b = 0; b < geo.n; ++b) {
        detail::ConstMatrixMap g(go + b * out_c * geo.positions(), static_cast<long>(out_c), positions);
        if (weight.requires_grad()) {
          scratch.gather(input.ptr(), b);
          gw_perm.noalias() += g * scratch.matrix();
        }
        if (gi) {
          dcol.noalias() = g.transpose() * w_perm;
          scratch.scatter_add(dcol.data(), gi, b);
        }
      }
      if (weight.requires_grad()) {
        float* gw = weight.ensure_grad().data();
        const std::size_t c = geo.c, k = geo.k;
        for (std::size_t oc = 0; oc < out_c; ++oc)
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx)
                gw[((oc * c + ch) * k + ky) * k + kx] +=
                    gw_perm(static_cast<long>(oc), static_cast<long>((ky * k + kx) * c + ch));
      }
      if (bias.requires_grad()) {
        auto gb = bias.ensure_grad();
        for (std::size_t b = 0; b < geo.n; ++b) {
          detail::ConstMatrixMap g(go + b * out_c * geo.positions(), static_cast<long>(out_c), positions);
          for (std::size_t oc = 0; oc < out_c; ++oc) gb[oc] += g.row(static_cast<long>(oc)).sum();
        }
      }
    });
  }
  return out;
}

inline Tensor relu(Tape& tape, const Tensor& input) {
  Tensor out(input.shape());
  auto src = input.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > 0.0f ? src[i] : 0.0f;
  if (tape.tracks({&input})) {
    out.set_requires_grad(true);
    tape.record(out, [input = Tensor(input), out]() mutable {
      auto g = input.ensure_grad();
      auto go = out.grad();
      auto x = input.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += x[i] > 0.0f ? go[i] : 0.0f;
    });
  }
  return out;
}

/// Max pooling with floor output semantics. Backward routes each window's
/// gradient to its first maximal element in scan order.
inline Tensor max_pool2d(Tape& tape, const Tensor& input, int window, int stride) {
  detail::require_rank(input, 4, "max_pool2d", "input");
  if (window < 1 || stride < 1) throw ShapeError("max_pool2d: window and stride must be positive");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto k = static_cast<std::size_t>(window);
  const auto s = static_cast<std::size_t>(stride);
  if (k > h || k > w) {
    throw ShapeError("max_pool2d: window " + std::to_string(k) + " larger than input " +
                     shape_string(input.shape()));
  }
  const std::size_t oh = (h - k) / s + 1, ow = (w - k) / s + 1;
  Tensor out(Shape{n, c, oh, ow});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.numel());
  const float* in = input.ptr();
  float* o = out.ptr();
  std::size_t idx = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const float* src = in + plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++idx) {
        std::size_t best = (oy * s) * w + ox * s;
        float best_v = src[best];
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t at = (oy * s + ky) * w + ox * s + kx;
            if (src[at] > best_v) {
              best_v = src[at];
              best = at;
            }
          }
        }
        o[idx] = best_v;
        (*argmax)[idx] = static_cast<std::uint32_t>(plane * h * w + best);
      }
    }
  }
  if (tape.tracks({&input})) {
    out.set_requires_grad(true);
    tape.record(out, [input = Tensor(input), out, argmax]() mutable {
      auto g = input.ensure_grad();
      auto go = out.grad();
      for (std::size_t i = 0; i < go.size(); ++i) g[(*argmax)[i]] += go[i];
    });
  }
  return out;
}

/// N×C×H×W → N×C mean over spatial positions.
inline Tensor global_avg_pool(Tape& tape, const Tensor& input) {
  detail::require_rank(input, 4, "global_avg_pool", "input");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  Tensor out(Shape{n, c});
  const float* in = input.ptr();
  const float inv = 1.0f / static_cast<float>(hw);
  for (std::size_t i = 0; i < n * c; ++i) {
    float acc = 0.0f;
    for (std::size_t j = 0; j < hw; ++j) acc += in[i * hw + j];
    out.ptr()[i] = acc * inv;
  }
  if (tape.tracks({&input})) {
    out.set_requires_grad(true);
    tape.record(out, [input = Tensor(input), out, n, c, hw, inv]() mutable {
      auto g = input.ensure_grad();
      auto go = out.grad();
      for (std::size_t i = 0; i < n * c; ++i) {
        const float v = go[i] * inv;
        for (std::size_t j = 0; j < hw; ++j) g[i * hw + j] += v;
      }
    });
  }
  return out;
}

inline Tensor reshape(Tape& tape, const Tensor& input, Shape shape) {
  if (shape_numel(shape) != input.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(input.shape()) + " as " + shape_string(shape));
  }
  Tensor out(std::move(shape), std::vector<float>(input.data().begin(), input.data().end()));
  if (tape.tracks({&input})) {
    out.set_requires_grad(true);
    tape.record(out, [input = Tensor(input), out]() mutable {
      auto g = input.ensure_grad();
      auto go = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
    });
  }
  return out;
}

/// input N×F, weight C×F, bias C → input·weightᵀ + bias.
inline Tensor linear(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias) {
  detail::require_rank(input, 2, "linear", "input");
  detail::require_rank(weight, 2, "linear", "weight");
  const std::size_t n = input.dim(0), f = input.dim(1), c = weight.dim(0);
  if (weight.dim(1) != f) {
    throw ShapeError("linear: input features (dim 1) = " + std::to_string(f) + " but weight expects " +
                     std::to_string(weight.dim(1)));
  }
  if (bias.numel() != c) throw ShapeError("linear: bias length does not match output width");
  Tensor out(Shape{n, c});
  if (c > 0 && n > 0) {
    detail::ConstMatrixMap x(input.ptr(), static_cast<long>(n), static_cast<long>(f));
    detail::ConstMatrixMap wm(weight.ptr(), static_cast<long>(c), static_cast<long>(f));
    detail::MatrixMap y(out.ptr(), static_cast<long>(n), static_cast<long>(c));
    // One dot product per logit, so a row's value does not depend on how
    // many other rows the head has.
    for (long r = 0; r < static_cast<long>(n); ++r)
      for (long j = 0; j < static_cast<long>(c); ++j) y(r, j) = x.row(r).dot(wm.row(j)) + bias.ptr()[j];
  }
  detail::check_finite(out, "linear");
  if (tape.tracks({&input, &weight, &bias})) {
    out.set_requires_grad(true);
    tape.record(out, [input = Tensor(input), weight = Tensor(weight), bias = Tensor(bias), out, n, f, c]() mutable {
      if (n == 0 || c == 0) return;
      detail::ConstMatrixMap g(out.grad().data(), static_cast<long>(n), static_cast<long>(c));
      if (input.requires_grad()) {
        detail::ConstMatrixMap wm(weight.ptr(), static_cast<long>(c), static_cast<long>(f));
        detail::MatrixMap gx(input.ensure_grad().data(), static_cast<long>(n), static_cast<long>(f));
        gx.noalias() += g * wm;
      }
      if (weight.requires_grad()) {
        detail::ConstMatrixMap x(input.ptr(), static_cast<long>(n), static_cast<long>(f));
        detail::MatrixMap gw(weight.ensure_grad().data(), static_cast<long>(c), static_cast<long>(f));
        gw.noalias() += g.transpose() * x;
      }
      if (bias.requires_grad()) {
        auto gb = bias.ensure_grad();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < c; ++j) gb[j] += g(static_cast<long>(r), static_cast<long>(j));
      }
    });
  }
  return out;
}

/// Mean negative log-likelihood over the batch, with softmax restricted to
/// classes whose mask entry is true. Masked logits act as −∞ and receive no
/// gradient.
inline Tensor masked_softmax_cross_entropy(Tape& tape, const Tensor& logits,
                                           std::span<const int> targets,
                                           const std::vector<bool>& mask) {
  detail::require_rank(logits, 2, "cross_entropy", "logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (targets.size() != n) throw ShapeError("cross_entropy: target count does not match batch size");
  if (mask.size() != c) throw ShapeError("cross_entropy: mask length does not match class count");
  if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; })) {
    throw ContractError("cross_entropy: mask excludes every class");
  }
  if (n == 0) throw ContractError("cross_entropy: empty batch");
  auto probs = std::make_shared<std::vector<double>>(n * c, 0.0);
  double total = 0.0;
  const float* x = logits.ptr();
  for (std::size_t r = 0; r < n; ++r) {
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= c || !mask[static_cast<std::size_t>(t)]) {
      throw ContractError("cross_entropy: target " + std::to_string(t) + " lies outside the class mask");
    }
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (mask[j]) m = std::max(m, static_cast<double>(x[r * c + j]));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      if (mask[j]) z += std::exp(static_cast<double>(x[r * c + j]) - m);
    const double lse = m + std::log(z);
    total += lse - static_cast<double>(x[r * c + static_cast<std::size_t>(t)]);
    for (std::size_t j = 0; j < c; ++j)
      if (mask[j]) (*probs)[r * c + j] = std::exp(static_cast<double>(x[r * c + j]) - lse);
  }
  Tensor out = detail::scalar_tensor(static_cast<float>(total / static_cast<double>(n)), false);
  if (tape.tracks({&logits})) {
    out.set_requires_grad(true);
    std::vector<int> tg(targets.begin(), targets.end());
    tape.record(out, [logits = Tensor(logits), out, probs, tg = std::move(tg), n, c]() mutable {
      auto g = logits.ensure_grad();
      const double scale = static_cast<double>(out.grad()[0]) / static_cast<double>(n);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < c; ++j) {
          double d = (*probs)[r * c + j];
          if (static_cast<int>(j) == tg[r]) d -= 1.0;
          g[r * c + j] += static_cast<float>(d * scale);
        }
      }
    });
  }
  return out;
}

inline Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> targets) {
  detail::require_rank(logits, 2, "cross_entropy", "logits");
  return masked_softmax_cross_entropy(tape, logits, targets, std::vector<bool>(logits.dim(1), true));
}

/// Mean squared elementwise difference.
inline Tensor mse(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mse");
  const std::size_t n = a.numel();
  if (n == 0) throw ContractError("mse: empty tensors");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
    acc += d * d;
  }
  Tensor out = detail::scalar_tensor(static_cast<float>(acc / static_cast<double>(n)), false);
  if (tape.tracks({&a, &b})) {
    out.set_requires_grad(true);
    tape.record(out, [a = Tensor(a), b = Tensor(b), out, n]() mutable {
      const float scale = 2.0f * out.grad()[0] / static_cast<float>(n);
      if (a.requires_grad()) {
        auto g = a.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) g[i] += scale * (a.data()[i] - b.data()[i]);
      }
      if (b.requires_grad()) {
        auto g = b.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) g[i] -= scale * (a.data()[i] - b.data()[i]);
      }
    });
  }
  return out;
}

/// Logit-matching term for rehearsal: row r of `logits` is compared with
/// `targets[r]` over the first targets[r].size() columns only. The result is
/// the mean over all compared entries.
inline Tensor prefix_mse(Tape& tape, const Tensor& logits, const std::vector<std::vector<float>>& targets) {
  detail::require_rank(logits, 2, "prefix_mse", "logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (targets.size() != n) throw ShapeError("prefix_mse: one target row per logit row required");
  std::size_t count = 0;
  double acc = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r].size() > c) throw ShapeError("prefix_mse: snapshot wider than the current head");
    for (std::size_t j = 0; j < targets[r].size(); ++j) {
      const double d = static_cast<double>(logits.ptr()[r * c + j]) - targets[r][j];
      acc += d * d;
    }
    count += targets[r].size();
  }
  if (count == 0) throw ContractError("prefix_mse: no entries to compare");
  Tensor out = detail::scalar_tensor(static_cast<float>(acc / static_cast<double>(count)), false);
  if (tape.tracks({&logits})) {
    out.set_requires_grad(true);
    tape.record(out, [logits = Tensor(logits), out, targets, n, c, count]() mutable {
      auto g = logits.ensure_grad();
      const float scale = 2.0f * out.grad()[0] / static_cast<float>(count);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < targets[r].size(); ++j)
          g[r * c + j] += scale * (logits.ptr()[r * c + j] - targets[r][j]);
    });
  }
  return out;
}

inline Tensor sum(Tape& tape, const Tensor& input) {
  double acc = 0.0;
  for (float v : input.data()) acc += v;
  Tensor out = detail::scalar_tensor(static_cast<float>(acc), false);
  if (tape.tracks({&input})) {
    out.set_requires_grad(true);
    tape.record(out, [input = Tensor(input), out]() mutable {
      auto g = input.ensure_grad();
      const float go = out.grad()[0];
      for (float& v : g) v += go;
    });
  }
  return out;
}

/// Squared L2 norm of every entry, summed.
inline Tensor sum_squares(Tape& tape, const Tensor& input) {
  double acc = 0.0;
  for (float v : input.data()) acc += static_cast<double>(v) * v;
  Tensor out = detail::scalar_tensor(static_cast<float>(acc), false);
  if (tape.tracks({&input})) {
    out.set_requires_grad(true);
    tape.record(out, [input = Tensor(input), out]() mutable {
      auto g = input.ensure_grad();
      const float go = out.grad()[0];
      auto x = input.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0f * go * x[i];
    });
  }
  return out;
}

inline Tensor scale(Tape& tape, const Tensor& input, float factor) {
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.numel(); ++i) out.data()[i] = factor * input.data()[i];
  if (tape.tracks({&input})) {
    out.set_requires_grad(true);
    tape.record(out, [input = Tensor(input), out, factor]() mutable {
      auto g = input.ensure_grad();
      auto go = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * go[i];
    });
  }
  return out;
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (tape.tracks({&a, &b})) {
    out.set_requires_grad(true);
    tape.record(out, [a = Tensor(a), b = Tensor(b), out]() mutable {
      auto go = out.grad();
      if (a.requires_grad()) {
        auto g = a.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
      }
      if (b.requires_grad()) {
        auto g = b.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
      }
    });
  }
  return out;
}

/// Elementwise product with a constant 0/1 mask (connection masks).
inline Tensor apply_mask(Tape& tape, const Tensor& input, std::span<const std::uint8_t> mask) {
  if (mask.size() != input.numel()) throw ShapeError("apply_mask: mask size does not match tensor");
  Tensor out(input.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) out.data()[i] = mask[i] ? input.data()[i] : 0.0f;
  if (tape.tracks({&input})) {
    out.set_requires_grad(true);
    std::vector<std::uint8_t> m(mask.begin(), mask.end());
    tape.record(out, [input = Tensor(input), out, m = std::move(m)]() mutable {
      auto g = input.ensure_grad();
      auto go = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (m[i]) g[i] += go[i];
    });
  }
  return out;
}

/// Zeroes whole channels of an NCHW tensor (unit masks).
inline Tensor mask_channels(Tape& tape, const Tensor& input, std::span<const std::uint8_t> channel_mask) {
  detail::require_rank(input, 4, "mask_channels", "input");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  if (channel_mask.size() != c) throw ShapeError("mask_channels: mask length does not match channel count");
  std::vector<std::uint8_t> m(channel_mask.begin(), channel_mask.end());
  Tensor out(input.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < hw; ++j) {
        const std::size_t at = (b * c + ch) * hw + j;
        out.data()[at] = m[ch] ? input.data()[at] : 0.0f;
      }
  if (tape.tracks({&input})) {
    out.set_requires_grad(true);
    tape.record(out, [input = Tensor(input), out, m = std::move(m), n, c, hw]() mutable {
      auto g = input.ensure_grad();
      auto go = out.grad();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          if (m[ch])
            for (std::size_t j = 0; j < hw; ++j) g[(b * c + ch) * hw + j] += go[(b * c + ch) * hw + j];
    });
  }
  return out;
}

/// Stacks two tensors along dim 0; trailing dims must agree.
inline Tensor concat_rows(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || a.rank() == 0 ||
      !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    throw ShapeError("concat_rows: incompatible shapes " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<float> values(a.data().begin(), a.data().end());
  values.insert(values.end(), b.data().begin(), b.data().end());
  Tensor out(std::move(shape), std::move(values));
  if (tape.tracks({&a, &b})) {
    out.set_requires_grad(true);
    tape.record(out, [a = Tensor(a), b = Tensor(b), out]() mutable {
      auto go = out.grad();
      if (a.requires_grad()) {
        auto g = a.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
      }
      if (b.requires_grad()) {
        auto g = b.ensure_grad();
        const std::size_t off = a.numel();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[off + i];
      }
    });
  }
  return out;
}

/// Rows [begin, end) along dim 0.
inline Tensor slice_rows(Tape& tape, const Tensor& input, std::size_t begin, std::size_t end) {
  if (input.rank() == 0 || begin > end || end > input.dim(0)) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + shape_string(input.shape()));
  }
  const std::size_t stride = input.dim(0) ? input.numel() / input.dim(0) : 0;
  Shape shape = input.shape();
  shape[0] = end - begin;
  std::vector<float> values(input.data().begin() + static_cast<long>(begin * stride),
                            input.data().begin() + static_cast<long>(end * stride));
  Tensor out(std::move(shape), std::move(values));
  if (tape.tracks({&input})) {
    out.set_requires_grad(true);
    tape.record(out, [input = Tensor(input), out, begin, stride]() mutable {
      auto g = input.ensure_grad();
      auto go = out.grad();
      for (std::size_t i = 0; i < go.size(); ++i) g[begin * stride + i] += go[i];
    });
  }
  return out;
}

/// Σ weights·(param − anchor)², the quadratic anchoring penalty.
inline Tensor weighted_sq_distance(Tape& tape, const Tensor& param, std::span<const float> anchor,
                                   std::span<const float> weights) {
  if (anchor.size() != param.numel() || weights.size() != param.numel()) {
    throw ShapeError("weighted_sq_distance: anchor/weights size " + std::to_string(anchor.size()) + "/" +
                     std::to_string(weights.size()) + " does not match parameter size " +
                     std::to_string(param.numel()));
  }
  double acc = 0.0;
  std::vector<float> local_grad(param.numel());
  auto x = param.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float d = x[i] - anchor[i];
    acc += static_cast<double>(weights[i]) * d * d;
    local_grad[i] = 2.0f * weights[i] * d;
  }
  Tensor out = detail::scalar_tensor(static_cast<float>(acc), false);
  if (tape.tracks({&param})) {
    out.set_requires_grad(true);
    tape.record(out, [param = Tensor(param), out, local_grad = std::move(local_grad)]() mutable {
      auto g = param.ensure_grad();
      const float go = out.grad()[0];
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go * local_grad[i];
    });
  }
  return out;
}

}  // namespace cil
