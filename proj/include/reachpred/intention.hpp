#pragma once

#include "reachpred/core.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace reachpred::intention {

inline constexpr double kVarianceFloor = 1e-6;

// Two-state Gaussian HMM over the scalar velocity observable. State 0 is REST,
// state 1 is MOTION; after training the REST mean is always the smaller one.
struct HmmModel {
  std::array<double, 2> initial{1.0, 0.0};
  // transition[j][i] = p(state i at t | state j at t-1); rows sum to 1
  std::array<std::array<double, 2>, 2> transition{{{0.95, 0.05}, {0.05, 0.95}}};
  std::array<double, 2> mean{0.0, 1.0};
  std::array<double, 2> variance{1.0, 1.0};
  // Average gyro magnitudes (arm, forearm) of the training data; the live
  // band-pass filters start from this level.
  std::array<double, 2> input_level{0.0, 0.0};

  // training metadata
  int iterations = 0;
  double log_likelihood = 0.0;
  std::vector<double> ll_trace;

  void validate() const {
    for (int j = 0; j < 2; ++j) {
      const double s = transition[j][0] + transition[j][1];
      if (std::abs(s - 1.0) > 1e-9 || transition[j][0] < 0 || transition[j][1] < 0) throw Error("HmmModel: transition row " + std::to_string(j) + " is not stochastic");
      if (!(variance[j] > 0.0)) throw Error("HmmModel: non-positive emission variance");
    }
    if (std::abs(initial[0] + initial[1] - 1.0) > 1e-9) throw Error("HmmModel: initial distribution does not sum to 1");
  }
};

struct IntentionBelief {
  std::array<double, 2> posterior{1.0, 0.0};
  double last_observable = 0.0;
  long sample_index = -1;
};

inline double log_gauss(double x, double mean, double var) {
  constexpr double kLog2Pi = 1.8378770664093454836;
  const double d = x - mean;
  return -0.5 * (kLog2Pi + std::log(var) + d * d / var);
}

// One filtering step: emission times predicted prior, normalised in the log domain.
inline IntentionBelief forward_step(const HmmModel& model, const IntentionBelief& belief, double x) {
  IntentionBelief next;
  std::array<double, 2> logp{};
  for (int i = 0; i < 2; ++i) {
    double prior = 0.0;
    for (int j = 0; j < 2; ++j) prior += model.transition[j][i] * belief.posterior[j];
    logp[i] = log_gauss(x, model.mean[i], model.variance[i]) + (prior > 0.0 ? std::log(prior) : -std::numeric_limits<double>::infinity());
  }
  const double m = std::max(logp[0], logp[1]);
  if (!std::isfinite(m)) {
    next.posterior = belief.posterior;
  } else {
    const double e0 = std::exp(logp[0] - m), e1 = std::exp(logp[1] - m);
    next.posterior = {e0 / (e0 + e1), e1 / (e0 + e1)};
  }
  next.last_observable = x;
  next.sample_index = belief.sample_index + 1;
  return next;
}

// Belief before the first observation. The first forward_step pushes it
// through the transition matrix once, like every later step.
inline IntentionBelief initial_belief(const HmmModel& model) {
  IntentionBelief b;
  b.posterior = model.initial;
  return b;
}

inline Activity predict_intention(const IntentionBelief& belief) {
  return belief.posterior[1] > belief.posterior[0] ? Activity::motion : Activity::rest;
}

struct BaumWelchOptions {
  double tol = 1e-6;  // on |delta log-likelihood| per sample
  int max_iter = 200;
  double variance_floor = kVarianceFloor;
};

struct BaumWelchResult {
  HmmModel model;
  std::vector<std::string> warnings;
};

namespace detail {

// Scaled forward-backward over one sequence; accumulates expected counts.
struct Stats {
  std::array<double, 2> gamma0{};
  std::array<std::array<double, 2>, 2> xi{};
  std::array<double, 2> w{}, wx{}, wxx{};
  double ll = 0.0;
};

inline void forward_backward(const HmmModel& m, std::span<const double> x, Stats& st) {
  const std::size_t n = x.size();
  std::vector<std::array<double, 2>> alpha(n), beta(n), emis(n);
  std::vector<double> emis_log(n), scale(n);
  for (std::size_t t = 0; t < n; ++t) {
    // emissions scaled by their max so underflow never zeros both states
    double l0 = log_gauss(x[t], m.mean[0], m.variance[0]), l1 = log_gauss(x[t], m.mean[1], m.variance[1]);
    double mx = std::max(l0, l1);
    emis[t] = {std::exp(l0 - mx), std::exp(l1 - mx)};
    emis_log[t] = mx;
  }
  double ll = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    std::array<double, 2> a{};
    for (int i = 0; i < 2; ++i) {
      double prior = t == 0 ? m.initial[i] : m.transition[0][i] * alpha[t - 1][0] + m.transition[1][i] * alpha[t - 1][1];
      a[i] = prior * emis[t][i];
    }
    double c = a[0] + a[1];
    if (!(c > 0.0)) c = std::numeric_limits<double>::min();
    alpha[t] = {a[0] / c, a[1] / c};
    ll += std::log(c) + emis_log[t];
    scale[t] = c;
  }
  beta[n - 1] = {1.0, 1.0};
  for (std::size_t t = n - 1; t-- > 0;) {
    for (int j = 0; j < 2; ++j) {
      double b = 0.0;
      for (int i = 0; i < 2; ++i) b += m.transition[j][i] * emis[t + 1][i] * beta[t + 1][i];
      beta[t][j] = b / scale[t + 1];
    }
  }
  for (std::size_t t = 0; t < n; ++t) {
    std::array<double, 2> g{alpha[t][0] * beta[t][0], alpha[t][1] * beta[t][1]};
    const double s = g[0] + g[1];
    g = {g[0] / s, g[1] / s};
    if (t == 0) {
      st.gamma0[0] += g[0];
      st.gamma0[1] += g[1];
    }
    for (int i = 0; i < 2; ++i) {
      st.w[i] += g[i];
      st.wx[i] += g[i] * x[t];
      st.wxx[i] += g[i] * x[t] * x[t];
    }
    if (t + 1 < n) {
      double tot = 0.0;
      std::array<std::array<double, 2>, 2> xi{};
      for (int j = 0; j < 2; ++j)
        for (int i = 0; i < 2; ++i) {
          xi[j][i] = alpha[t][j] * m.transition[j][i] * emis[t + 1][i] * beta[t + 1][i];
          tot += xi[j][i];
        }
      for (int j = 0; j < 2; ++j)
        for (int i = 0; i < 2; ++i) st.xi[j][i] += xi[j][i] / tot;
    }
  }
  st.ll += ll;
}

inline void order_states(HmmModel& m) {
  if (m.mean[0] <= m.mean[1]) return;
  std::swap(m.mean[0], m.mean[1]);
  std::swap(m.variance[0], m.variance[1]);
  std::swap(m.initial[0], m.initial[1]);
  auto t = m.transition;
  for (int j = 0; j < 2; ++j)
    for (int i = 0; i < 2; ++i) m.transition[j][i] = t[1 - j][1 - i];
}

}  // namespace detail

inline double sequence_log_likelihood(const HmmModel& m, std::span<const std::vector<double>> sequences) {
  detail::Stats st;
  for (const auto& s : sequences) detail::forward_backward(m, s, st);
  return st.ll;
}

// EM on the scaled forward-backward recursions. The log-likelihood recorded in
// ll_trace is that of the parameters entering each iteration.
inline BaumWelchResult baum_welch(std::span<const std::vector<double>> sequences, HmmModel init, const BaumWelchOptions& opt = {}) {
  if (sequences.empty()) throw Error("baum_welch: no sequences");
  for (const auto& s : sequences)
    if (s.size() < 10) throw Error("baum_welch: every sequence needs at least 10 samples");
  init.validate();

  BaumWelchResult res;
  HmmModel m = init;
  m.ll_trace.clear();
  std::size_t total = 0;
  for (const auto& s : sequences) total += s.size();
  bool floored = false;
  double prev = -std::numeric_limits<double>::infinity();
  int it = 0;
  for (; it < opt.max_iter; ++it) {
    detail::Stats st;
    for (const auto& s : sequences) detail::forward_backward(m, s, st);
    m.ll_trace.push_back(st.ll);
    if (it > 0 && std::abs(st.ll - prev) < opt.tol * static_cast<double>(total)) {
      prev = st.ll;
      break;
    }
    prev = st.ll;

    const double g0 = st.gamma0[0] + st.gamma0[1];
    m.initial = {st.gamma0[0] / g0, st.gamma0[1] / g0};
    for (int j = 0; j < 2; ++j) {
      const double row = st.xi[j][0] + st.xi[j][1];
      if (row > 0.0) m.transition[j] = {st.xi[j][0] / row, st.xi[j][1] / row};
    }
    for (int i = 0; i < 2; ++i) {
      if (st.w[i] > 1e-12) {
        m.mean[i] = st.wx[i] / st.w[i];
        double v = st.wxx[i] / st.w[i] - m.mean[i] * m.mean[i];
        if (v < opt.variance_floor) {
          v = opt.variance_floor;
          floored = true;
        }
        m.variance[i] = v;
      } else {
        m.variance[i] = std::max(m.variance[i], opt.variance_floor);
        floored = true;
      }
    }
  }
  m.iterations = it;
  m.log_likelihood = prev;
  detail::order_states(m);
  if (floored) res.warnings.push_back("baum_welch: emission variance floored at " + std::to_string(opt.variance_floor) + " (degenerate observable)");
  res.model = m;
  return res;
}

// Protocol-informed initial model: 1-D 2-means on the observable for the
// emission means, sticky transitions, start at REST.
inline HmmModel initial_model(std::span<const std::vector<double>> sequences) {
  std::vector<double> all;
  for (const auto& s : sequences) all.insert(all.end(), s.begin(), s.end());
  if (all.empty()) throw Error("initial_model: no data");
  auto [lo_it, hi_it] = std::minmax_element(all.begin(), all.end());
  double c0 = *lo_it, c1 = *hi_it;
  std::array<double, 2> var{1.0, 1.0};
  for (int iter = 0; iter < 100; ++iter) {
    std::array<double, 2> s{}, ss{}, n{};
    for (double v : all) {
      int k = std::abs(v - c0) <= std::abs(v - c1) ? 0 : 1;
      s[k] += v;
      ss[k] += v * v;
      n[k] += 1;
    }
    double n0 = n[0] > 0 ? s[0] / n[0] : c0, n1 = n[1] > 0 ? s[1] / n[1] : c1;
    for (int k = 0; k < 2; ++k) {
      const double mu = k == 0 ? n0 : n1;
      var[k] = n[k] > 1 ? std::max(ss[k] / n[k] - mu * mu, kVarianceFloor) : 1.0;
    }
    if (n0 == c0 && n1 == c1) break;
    c0 = n0;
    c1 = n1;
  }
  HmmModel m;
  m.mean = {c0, c1};
  m.variance = var;
  m.initial = {1.0, 0.0};
  m.transition = {{{0.95, 0.05}, {0.05, 0.95}}};
  detail::order_states(m);
  return m;
}

}  // namespace reachpred::intention
