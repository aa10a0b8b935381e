#pragma once

// Central finite-difference gradient checks shared by the unit suite and
// the acceptance binary.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cil/ops.hpp"
#include "cil/rng.hpp"

namespace cil::testing {

struct GradCase {
  std::string name;
  std::vector<Tensor> params;
  std::function<Tensor(Tape&)> loss;
};

struct GradReport {
  std::string name;
  std::string worst_param;
  double worst_error = 0.0;
};

inline Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0, bool requires_grad = true) {
  Tensor t(std::move(shape), 0.0f, requires_grad);
  for (float& v : t.data()) v = static_cast<float>(rng.normal() * scale);
  return t;
}

/// Values bounded away from zero, for ops with a kink there.
inline Tensor away_from_zero(Rng& rng, Shape shape, double gap) {
  Tensor t(std::move(shape), 0.0f, true);
  for (float& v : t.data()) {
    const double x = rng.normal();
    v = static_cast<float>(x >= 0 ? x + gap : x - gap);
  }
  return t;
}

/// Distinct values spaced `gap` apart in random order, so no pooling window
/// changes its argmax under small perturbations.
inline Tensor spaced_values(Rng& rng, Shape shape, double gap) {
  Tensor t(std::move(shape), 0.0f, true);
  std::vector<std::size_t> order(t.numel());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());
  const double mid = static_cast<double>(order.size()) / 2.0;
  for (std::size_t i = 0; i < order.size(); ++i)
    t.data()[order[i]] = static_cast<float>((static_cast<double>(i) - mid) * gap);
  return t;
}

/// ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖) per parameter, with
/// ε = 1e-2 × RMS(θ) and the loss evaluated in double around each point.
inline GradReport check_gradients(GradCase& c) {
  for (auto& p : c.params) p.zero_grad();
  {
    Tape tape;
    Tensor loss = c.loss(tape);
    tape.backward(loss);
  }
  GradReport report{c.name, "", 0.0};
  for (std::size_t k = 0; k < c.params.size(); ++k) {
    Tensor& p = c.params[k];
    double rms = 0.0;
    for (float v : p.data()) rms += static_cast<double>(v) * v;
    rms = std::sqrt(rms / static_cast<double>(std::max<std::size_t>(1, p.numel())));
    const float eps = static_cast<float>(1e-2 * (rms > 0.0 ? rms : 1.0));
    std::vector<float> analytic(p.numel(), 0.0f);
    if (p.has_grad()) analytic.assign(p.grad().begin(), p.grad().end());
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t j = 0; j < p.numel(); ++j) {
      const float saved = p.data()[j];
      auto eval = [&](float value) {
        p.data()[j] = value;
        Tape tape = Tape::inference();
        return static_cast<double>(c.loss(tape).item());
      };
      const float hi = saved + eps, lo = saved - eps;
      const double numeric = (eval(hi) - eval(lo)) / (static_cast<double>(hi) - static_cast<double>(lo));
      p.data()[j] = saved;
      diff2 += (analytic[j] - numeric) * (analytic[j] - numeric);
      a2 += static_cast<double>(analytic[j]) * analytic[j];
      n2 += numeric * numeric;
    }
    const double denom = std::max(std::sqrt(std::max(a2, n2)), 1e-12);
    const double err = std::sqrt(diff2) / denom;
    if (err > report.worst_error || report.worst_param.empty()) {
      report.worst_error = err;
      report.worst_param = "param" + std::to_string(k);
    }
  }
  return report;
}

/// Smallest distance, over a conv output z (N×C×H×W, even H and W), from
/// a relu kink (|z|) or a 2×2 max-pool argmax swap (top-two gap after relu).
inline double kink_margin(const Tensor& z) {
  double margin = 1e9;
  for (float v : z.data()) margin = std::min(margin, std::abs(static_cast<double>(v)));
  const std::size_t planes = z.dim(0) * z.dim(1), h = z.dim(2), w = z.dim(3);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y + 1 < h; y += 2) {
      for (std::size_t x = 0; x + 1 < w; x += 2) {
        std::vector<double> win;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx)
            win.push_back(std::max(0.0f, z.data()[(p * h + y + dy) * w + x + dx]));
        std::sort(win.begin(), win.end());
        if (win[3] > 0.0) margin = std::min(margin, win[3] - win[2]);
      }
    }
  }
  return margin;
}

/// Reduces any tensor to a scalar with non-uniform upstream gradients.
inline Tensor reduce(Tape& tape, const Tensor& x, const Tensor& target) { return mse(tape, x, target); }

/// One case per differentiable op plus the conv→relu→pool→linear→CE chain.
inline std::vector<GradCase> gradient_cases(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "gradcheck"));
  std::vector<GradCase> cases;
  auto target_like = [&](Shape s) { return random_tensor(rng, std::move(s), 1.0, false); };

  {
    Tensor x = random_tensor(rng, {2, 3, 5, 5}), w = random_tensor(rng, {4, 3, 3, 3}, 0.3), b = random_tensor(rng, {4});
    Tensor t = target_like({2, 4, 5, 5});
    cases.push_back({"conv2d s1 p1", {x, w, b}, [=](Tape& tp) { return reduce(tp, conv2d(tp, x, w, b, 1, 1), t); }});
  }
  {
    Tensor x = random_tensor(rng, {1, 2, 7, 6}), w = random_tensor(rng, {3, 2, 3, 3}, 0.3), b = random_tensor(rng, {3});
    Tensor t = target_like({1, 3, 4, 3});
    cases.push_back({"conv2d s2 p1", {x, w, b}, [=](Tape& tp) { return reduce(tp, conv2d(tp, x, w, b, 2, 1), t); }});
  }
  {
    Tensor x = random_tensor(rng, {2, 2, 4, 4}), w = random_tensor(rng, {2, 2, 2, 2}, 0.3), b = random_tensor(rng, {2});
    Tensor t = target_like({2, 2, 3, 3});
    cases.push_back({"conv2d s1 p0 k2", {x, w, b}, [=](Tape& tp) { return reduce(tp, conv2d(tp, x, w, b, 1, 0), t); }});
  }
  {
    Tensor x = away_from_zero(rng, {3, 4}, 0.2);
    Tensor t = target_like({3, 4});
    cases.push_back({"relu", {x}, [=](Tape& tp) { return reduce(tp, relu(tp, x), t); }});
  }
  {
    Tensor x = spaced_values(rng, {2, 2, 6, 6}, 0.05);
    Tensor t = target_like({2, 2, 3, 3});
    cases.push_back({"max_pool2d", {x}, [=](Tape& tp) { return reduce(tp, max_pool2d(tp, x, 2, 2), t); }});
  }
  {
    Tensor x = spaced_values(rng, {1, 2, 5, 5}, 0.05);
    Tensor t = target_like({1, 2, 2, 2});
    cases.push_back({"max_pool2d w3 s2", {x}, [=](Tape& tp) { return reduce(tp, max_pool2d(tp, x, 3, 2), t); }});
  }
  {
    Tensor x = random_tensor(rng, {2, 3, 4, 4});
    Tensor t = target_like({2, 3});
    cases.push_back({"global_avg_pool", {x}, [=](Tape& tp) { return reduce(tp, global_avg_pool(tp, x), t); }});
  }
  {
    Tensor x = random_tensor(rng, {2, 3, 2});
    Tensor t = target_like({3, 4});
    cases.push_back({"reshape", {x}, [=](Tape& tp) { return reduce(tp, reshape(tp, x, {3, 4}), t); }});
  }
  {
    Tensor x = random_tensor(rng, {3, 5}), w = random_tensor(rng, {4, 5}), b = random_tensor(rng, {4});
    Tensor t = target_like({3, 4});
    cases.push_back({"linear", {x, w, b}, [=](Tape& tp) { return reduce(tp, linear(tp, x, w, b), t); }});
  }
  {
    Tensor z = random_tensor(rng, {4, 5}, 2.0);
    std::vector<int> y = {0, 2, 4, 2};
    std::vector<bool> mask = {true, false, true, false, true};
    cases.push_back({"masked_softmax_cross_entropy", {z},
                     [=](Tape& tp) { return masked_softmax_cross_entropy(tp, z, y, mask); }});
  }
  {
    Tensor z = random_tensor(rng, {3, 4}, 2.0);
    std::vector<int> y = {3, 0, 1};
    cases.push_back({"cross_entropy", {z}, [=](Tape& tp) { return cross_entropy(tp, z, y); }});
  }
  {
    Tensor a = random_tensor(rng, {2, 3}), b = random_tensor(rng, {2, 3});
    cases.push_back({"mse", {a, b}, [=](Tape& tp) { return mse(tp, a, b); }});
  }
  {
    Tensor z = random_tensor(rng, {3, 4});
    std::vector<std::vector<float>> snaps = {{0.5f, -1.0f}, {}, {0.1f, 0.2f, 0.3f}};
    cases.push_back({"prefix_mse", {z}, [=](Tape& tp) { return prefix_mse(tp, z, snaps); }});
  }
  {
    Tensor x = random_tensor(rng, {2, 3});
    Tensor t = target_like({});
    cases.push_back({"sum", {x}, [=](Tape& tp) { return reduce(tp, sum(tp, x), t); }});
  }
  {
    Tensor x = random_tensor(rng, {2, 3});
    cases.push_back({"sum_squares", {x}, [=](Tape& tp) { return sum_squares(tp, x); }});
  }
  {
    Tensor x = random_tensor(rng, {5});
    Tensor t = target_like({5});
    cases.push_back({"scale", {x}, [=](Tape& tp) { return reduce(tp, scale(tp, x, -1.7f), t); }});
  }
  {
    Tensor a = random_tensor(rng, {2, 2}), b = random_tensor(rng, {2, 2});
    Tensor t = target_like({2, 2});
    cases.push_back({"add", {a, b}, [=](Tape& tp) { return reduce(tp, add(tp, a, b), t); }});
  }
  {
    Tensor x = random_tensor(rng, {2, 3});
    std::vector<std::uint8_t> m = {1, 0, 1, 1, 0, 1};
    Tensor t = target_like({2, 3});
    cases.push_back({"apply_mask", {x}, [=](Tape& tp) { return reduce(tp, apply_mask(tp, x, m), t); }});
  }
  {
    Tensor x = random_tensor(rng, {2, 3, 2, 2});
    std::vector<std::uint8_t> m = {1, 0, 1};
    Tensor t = target_like({2, 3, 2, 2});
    cases.push_back({"mask_channels", {x}, [=](Tape& tp) { return reduce(tp, mask_channels(tp, x, m), t); }});
  }
  {
    Tensor a = random_tensor(rng, {2, 3}), b = random_tensor(rng, {1, 3});
    Tensor t = target_like({3, 3});
    cases.push_back({"concat_rows", {a, b}, [=](Tape& tp) { return reduce(tp, concat_rows(tp, a, b), t); }});
  }
  {
    Tensor x = random_tensor(rng, {4, 3});
    Tensor t = target_like({2, 3});
    cases.push_back({"slice_rows", {x}, [=](Tape& tp) { return reduce(tp, slice_rows(tp, x, 1, 3), t); }});
  }
  {
    Tensor p = random_tensor(rng, {6});
    std::vector<float> anchor(6), weights(6);
    for (auto& v : anchor) v = static_cast<float>(rng.normal());
    for (auto& v : weights) v = static_cast<float>(rng.uniform());
    cases.push_back({"weighted_sq_distance", {p}, [=](Tape& tp) { return weighted_sq_distance(tp, p, anchor, weights); }});
  }
  {
    // Redraw until every pre-activation and every pooling window sits at
    // least 0.03 from a kink; the largest single perturbation moves them by
    // about half of that.
    Tensor x, w, b;
    for (int attempt = 0;; ++attempt) {
      x = random_tensor(rng, {2, 2, 4, 4});
      w = random_tensor(rng, {3, 2, 3, 3}, 0.4);
      b = random_tensor(rng, {3}, 0.1);
      Tape probe = Tape::inference();
      const Tensor z = conv2d(probe, x, w, b, 1, 1);
      if (attempt >= 10000 || kink_margin(z) >= 0.03) break;
    }
    Tensor hw = random_tensor(rng, {4, 12}, 0.3), hb = random_tensor(rng, {4}, 0.1);
    std::vector<int> y = {1, 3};
    cases.push_back({"chain conv-relu-pool-linear-ce", {x, w, b, hw, hb}, [=](Tape& tp) {
                       Tensor h = relu(tp, conv2d(tp, x, w, b, 1, 1));
                       h = max_pool2d(tp, h, 2, 2);
                       h = reshape(tp, h, {2, 12});
                       return cross_entropy(tp, linear(tp, h, hw, hb), y);
                     }});
  }
  return cases;
}

}  // namespace cil::testing
