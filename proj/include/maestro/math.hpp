#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

namespace maestro::math {

// Numerically stable log(sum(exp(x))). Returns -inf for an empty range.
template <std::floating_point T>
T logsumexp(std::span<const T> x) {
  if (x.empty()) return -std::numeric_limits<T>::infinity();
  const T hi = *std::max_element(x.begin(), x.end());
  if (!std::isfinite(hi)) return hi;
  T acc = 0;
  for (T v : x) acc += std::exp(v - hi);
  return hi + std::log(acc);
}

template <std::floating_point T>
std::vector<T> log_softmax(std::span<const T> logits) {
  const T lse = logsumexp(logits);
  std::vector<T> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

template <std::floating_point T>
std::vector<T> softmax(std::span<const T> logits) {
  auto out = log_softmax(logits);
  for (auto& v : out) v = std::exp(v);
  return out;
}

// KL(p || q) for distributions given as log-probabilities.
template <std::floating_point T>
T kl_from_log_probs(std::span<const T> log_p, std::span<const T> log_q) {
  T kl = 0;
  for (std::size_t i = 0; i < log_p.size(); ++i) {
    const T p = std::exp(log_p[i]);
    if (p == 0) continue;
    kl += p * (log_p[i] - log_q[i]);
  }
  return kl;
}

// Shannon entropy in nats from log-probabilities.
template <std::floating_point T>
T entropy_from_log_probs(std::span<const T> log_p) {
  T h = 0;
  for (T lp : log_p) {
    const T p = std::exp(lp);
    if (p == 0) continue;
    h -= p * lp;
  }
  return h;
}

template <std::floating_point T>
T mean(std::span<const T> x) {
  if (x.empty()) return T(0);
  return std::accumulate(x.begin(), x.end(), T(0)) / static_cast<T>(x.size());
}

// Population standard deviation.
template <std::floating_point T>
T stddev(std::span<const T> x) {
  if (x.empty()) return T(0);
  const T m = mean(x);
  T acc = 0;
  for (T v : x) acc += (v - m) * (v - m);
  return std::sqrt(acc / static_cast<T>(x.size()));
}

// Stable descending order of `values`; ties keep the lower index first.
template <std::floating_point T>
std::vector<std::size_t> descending_order(std::span<const T> values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  return idx;
}

// Plackett-Luce negative log-likelihood of the permutation `order` under
// item scores `scores`: -sum_j [ s_{order_j} - log sum_{l>=j} exp(s_{order_l}) ].
// Each suffix denominator is evaluated with its own running max.
template <std::floating_point T>
T plackett_luce_nll(std::span<const T> scores, std::span<const std::size_t> order) {
  const std::size_t n = order.size();
  std::vector<T> suffix(n);
  for (std::size_t j = 0; j < n; ++j) suffix[j] = scores[order[j]];
  T nll = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const std::span<const T> tail(suffix.data() + j, n - j);
    nll -= suffix[j] - logsumexp(tail);
  }
  return nll;
}

// d(plackett_luce_nll)/d(scores).
template <std::floating_point T>
std::vector<T> plackett_luce_nll_grad(std::span<const T> scores,
                                      std::span<const std::size_t> order) {
  const std::size_t n = order.size();
  std::vector<T> grad(scores.size(), T(0));
  std::vector<T> suffix(n);
  for (std::size_t j = 0; j < n; ++j) suffix[j] = scores[order[j]];
  for (std::size_t j = 0; j < n; ++j) {
    const std::span<const T> tail(suffix.data() + j, n - j);
    const T lse = logsumexp(tail);
    grad[order[j]] -= T(1);
    for (std::size_t l = j; l < n; ++l) grad[order[l]] += std::exp(suffix[l] - lse);
  }
  return grad;
}

}  // namespace maestro::math
