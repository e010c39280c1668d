#pragma once

#include "reachpred/core.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

namespace reachpred::dsp {

enum class FilterKind { band_pass, low_pass };

// One second-order section, a0 normalised to 1.
struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0;
  double a1 = 0, a2 = 0;
};

struct FilterSpec {
  FilterKind kind = FilterKind::band_pass;
  int order = 0;  // total number of poles
  double low_hz = 0;
  double high_hz = 0;
  double sample_rate = kSampleRate;
  std::vector<Biquad> sections;
};

namespace detail {

using cplx = std::complex<double>;

// Groups poles into conjugate pairs (real poles paired in order) and builds
// sections whose zeros are taken two at a time from `zeros`.
inline std::vector<Biquad> zpk_to_sections(std::vector<cplx> zeros, std::vector<cplx> poles, double gain) {
  std::vector<std::array<cplx, 2>> pole_pairs;
  std::vector<cplx> reals;
  std::vector<bool> used(poles.size(), false);
  for (std::size_t i = 0; i < poles.size(); ++i) {
    if (used[i]) continue;
    if (std::abs(poles[i].imag()) < 1e-12 * std::max(1.0, std::abs(poles[i]))) {
      reals.push_back(cplx(poles[i].real(), 0.0));
      used[i] = true;
      continue;
    }
    // find the conjugate partner
    std::size_t best = poles.size();
    double best_d = 1e300;
    for (std::size_t j = i + 1; j < poles.size(); ++j) {
      if (used[j]) continue;
      double d = std::abs(poles[j] - std::conj(poles[i]));
      if (d < best_d) best_d = d, best = j;
    }
    if (best == poles.size()) throw Error("filter design: unpaired complex pole");
    used[i] = used[best] = true;
    pole_pairs.push_back({poles[i], std::conj(poles[i])});
  }
  for (std::size_t i = 0; i < reals.size(); i += 2) {
    if (i + 1 < reals.size())
      pole_pairs.push_back({reals[i], reals[i + 1]});
    else
      pole_pairs.push_back({reals[i], cplx(0.0, 0.0)});  // first-order section
  }

  std::vector<Biquad> out;
  std::size_t zi = 0;
  for (std::size_t s = 0; s < pole_pairs.size(); ++s) {
    const bool first_order = (pole_pairs[s][1] == cplx(0.0, 0.0)) && zeros.size() - zi < 2;
    Biquad q;
    auto [p1, p2] = pole_pairs[s];
    q.a1 = -(p1 + p2).real();
    q.a2 = (p1 * p2).real();
    cplx z1 = zi < zeros.size() ? zeros[zi++] : cplx(0, 0);
    cplx z2 = (!first_order && zi < zeros.size()) ? zeros[zi++] : cplx(0, 0);
    q.b0 = 1.0;
    q.b1 = -(z1 + z2).real();
    q.b2 = (z1 * z2).real();
    out.push_back(q);
  }
  out.front().b0 *= gain;
  out.front().b1 *= gain;
  out.front().b2 *= gain;
  return out;
}

// Analog Butterworth prototype poles (unit cutoff, left half plane).
inline std::vector<cplx> prototype_poles(int n) {
  constexpr double kPi = 3.14159265358979323846;
  std::vector<cplx> p;
  for (int k = 0; k < n; ++k) p.push_back(std::exp(cplx(0.0, kPi * (2.0 * k + n + 1) / (2.0 * n))));
  return p;
}

inline double prewarp(double hz, double fs) {
  constexpr double kPi = 3.14159265358979323846;
  return 2.0 * fs * std::tan(kPi * hz / fs);
}

// Bilinear transform of an analog zpk; zeros at infinity land on z = -1.
inline void bilinear(std::vector<cplx>& zeros, std::vector<cplx>& poles, double& gain, double fs) {
  const double fs2 = 2.0 * fs;
  cplx num(1.0, 0.0), den(1.0, 0.0);
  for (auto& z : zeros) {
    num *= fs2 - z;
    z = (fs2 + z) / (fs2 - z);
  }
  for (auto& p : poles) {
    den *= fs2 - p;
    p = (fs2 + p) / (fs2 - p);
  }
  const std::size_t extra = poles.size() - zeros.size();
  for (std::size_t i = 0; i < extra; ++i) zeros.push_back(cplx(-1.0, 0.0));
  gain *= (num / den).real();
}

inline void check_stable(const std::vector<Biquad>& sections) {
  for (const auto& q : sections) {
    // roots of z^2 + a1 z + a2
    cplx disc = std::sqrt(cplx(q.a1 * q.a1 - 4.0 * q.a2, 0.0));
    cplx r1 = (-q.a1 + disc) / 2.0, r2 = (-q.a1 - disc) / 2.0;
    if (!(std::abs(r1) < 1.0) || !(std::abs(r2) < 1.0)) throw Error("filter design: unstable section (pole on/outside unit circle)");
    for (double c : {q.b0, q.b1, q.b2, q.a1, q.a2})
      if (!std::isfinite(c)) throw Error("filter design: non-finite coefficient");
  }
}

}  // namespace detail

// Butterworth band-pass. `order` counts the poles of the final design and must
// be even (prototype order = order / 2).
inline FilterSpec design_bandpass(double low, double high, int order, double fs) {
  if (!(low > 0.0 && low < high && high < fs / 2.0))
    throw Error("design_bandpass: need 0 < low < high < fs/2");
  if (order < 2 || order % 2 != 0) throw Error("design_bandpass: order must be even and >= 2");
  const int n = order / 2;
  const double w1 = detail::prewarp(low, fs), w2 = detail::prewarp(high, fs);
  const double wo = std::sqrt(w1 * w2), bw = w2 - w1;

  std::vector<detail::cplx> zeros, poles;
  for (auto p : detail::prototype_poles(n)) {
    detail::cplx lp = p * bw / 2.0;
    detail::cplx root = std::sqrt(lp * lp - wo * wo);
    poles.push_back(lp + root);
    poles.push_back(lp - root);
  }
  zeros.assign(static_cast<std::size_t>(n), detail::cplx(0.0, 0.0));
  double gain = std::pow(bw, n);
  detail::bilinear(zeros, poles, gain, fs);
  // interleave +1 / -1 zeros so every section is b = [1, 0, -1]
  std::vector<detail::cplx> ordered;
  for (int i = 0; i < n; ++i) {
    ordered.push_back(zeros[static_cast<std::size_t>(i)]);
    ordered.push_back(zeros[static_cast<std::size_t>(n + i)]);
  }

  FilterSpec spec{FilterKind::band_pass, order, low, high, fs, detail::zpk_to_sections(ordered, poles, gain)};
  detail::check_stable(spec.sections);
  return spec;
}

inline FilterSpec design_lowpass(double cutoff, int order, double fs) {
  if (!(cutoff > 0.0 && cutoff < fs / 2.0)) throw Error("design_lowpass: need 0 < cutoff < fs/2");
  if (order < 1) throw Error("design_lowpass: order must be >= 1");
  const double w = detail::prewarp(cutoff, fs);
  std::vector<detail::cplx> zeros, poles;
  for (auto p : detail::prototype_poles(order)) poles.push_back(p * w);
  double gain = std::pow(w, order);
  detail::bilinear(zeros, poles, gain, fs);
  FilterSpec spec{FilterKind::low_pass, order, 0.0, cutoff, fs, detail::zpk_to_sections(zeros, poles, gain)};
  detail::check_stable(spec.sections);
  return spec;
}

// Transposed direct-form II delay line, two values per section.
struct FilterState {
  std::vector<std::array<double, 2>> z;
};

inline FilterState zero_state(const FilterSpec& spec) { return FilterState{std::vector<std::array<double, 2>>(spec.sections.size(), {0.0, 0.0})}; }

// State the cascade would sit in after an infinitely long constant input `x0`.
inline FilterState steady_state(const FilterSpec& spec, double x0) {
  FilterState st = zero_state(spec);
  double u = x0;
  for (std::size_t s = 0; s < spec.sections.size(); ++s) {
    const Biquad& q = spec.sections[s];
    const double dc = (q.b0 + q.b1 + q.b2) / (1.0 + q.a1 + q.a2);
    const double y = dc * u;
    const double z2 = q.b2 * u - q.a2 * y;
    const double z1 = q.b1 * u - q.a1 * y + z2;
    st.z[s] = {z1, z2};
    u = y;
  }
  return st;
}

inline double filter_sample(const FilterSpec& spec, FilterState& st, double x) {
  double u = x;
  for (std::size_t s = 0; s < spec.sections.size(); ++s) {
    const Biquad& q = spec.sections[s];
    auto& z = st.z[s];
    const double y = q.b0 * u + z[0];
    z[0] = q.b1 * u - q.a1 * y + z[1];
    z[1] = q.b2 * u - q.a2 * y;
    u = y;
  }
  return u;
}

// Functional streaming form: O(order) per sample.
inline std::pair<FilterState, double> causal_filter_step(const FilterSpec& spec, FilterState state, double x) {
  if (state.z.size() != spec.sections.size()) state = zero_state(spec);
  double y = filter_sample(spec, state, x);
  return {std::move(state), y};
}

// Single forward pass over a whole series.
inline std::vector<double> lfilter(const FilterSpec& spec, std::span<const double> x, std::optional<FilterState> init = std::nullopt) {
  FilterState st = init ? *init : zero_state(spec);
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = filter_sample(spec, st, x[i]);
  return y;
}

inline std::size_t filtfilt_padlen(const FilterSpec& spec) { return 3 * static_cast<std::size_t>(spec.order + 1); }

// Zero-phase forward-backward filtering with odd reflection padding and
// steady-state initial conditions on both passes.
inline std::vector<double> filtfilt(const FilterSpec& spec, std::span<const double> x) {
  const std::size_t n = x.size();
  const std::size_t pad = filtfilt_padlen(spec);
  if (n <= pad) throw Error("filtfilt: series of length " + std::to_string(n) + " too short to pad (need > " + std::to_string(pad) + ")");
  std::vector<double> ext;
  ext.reserve(n + 2 * pad);
  for (std::size_t i = pad; i >= 1; --i) ext.push_back(2.0 * x[0] - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 1; i <= pad; ++i) ext.push_back(2.0 * x[n - 1] - x[n - 1 - i]);

  auto fwd = lfilter(spec, ext, steady_state(spec, ext.front()));
  std::reverse(fwd.begin(), fwd.end());
  auto bwd = lfilter(spec, fwd, steady_state(spec, fwd.front()));
  std::reverse(bwd.begin(), bwd.end());
  return {bwd.begin() + static_cast<std::ptrdiff_t>(pad), bwd.begin() + static_cast<std::ptrdiff_t>(pad + n)};
}

// Streaming filter object: owns its state, single consumer. By default the
// state is primed to the steady state of the first sample; prime(level)
// instead starts it as if `level` had been applied forever.
class CausalFilter {
 public:
  explicit CausalFilter(FilterSpec spec) : spec_(std::move(spec)), state_(zero_state(spec_)) {}

  double step(double x) {
    if (!primed_) {
      state_ = steady_state(spec_, x);
      primed_ = true;
    }
    return filter_sample(spec_, state_, x);
  }
  void reset() {
    state_ = zero_state(spec_);
    primed_ = false;
  }
  void prime(double level) {
    state_ = steady_state(spec_, level);
    primed_ = true;
  }
  // Disables first-sample priming (plain zero initial state).
  void start_from_zero() { primed_ = true; }

  const FilterSpec& spec() const { return spec_; }

 private:
  FilterSpec spec_;
  FilterState state_;
  bool primed_ = false;
};

inline FilterSpec motion_bandpass() { return design_bandpass(0.01, 3.0, 4, kSampleRate); }

inline double norm3(const std::array<double, 3>& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]); }

// Streaming velocity observable: BP(|w_arm|) + BP(|w_forearm|), one value per
// frame. The band-pass blocks DC, so a stream that starts at rest settles to
// minus the average input level over tens of seconds; priming with the
// expected input level (arm, forearm) skips that transient.
class VelocityObservable {
 public:
  explicit VelocityObservable(const FilterSpec& spec = motion_bandpass(), std::optional<std::array<double, 2>> level = std::nullopt)
      : arm_(spec), forearm_(spec), level_(level) {
    reset();
  }

  double step(const SampleFrame& f) {
    const double a = norm3(f.gyro_arm), b = norm3(f.gyro_forearm);
    if (warm_) {
      // settle the low-pass part on the first sample; the slow high-pass
      // memory stays near the primed level
      for (int i = 0; i < kWarmup; ++i) arm_.step(a), forearm_.step(b);
      warm_ = false;
    }
    return arm_.step(a) + forearm_.step(b);
  }
  void reset() {
    arm_.reset();
    forearm_.reset();
    warm_ = false;
    if (level_) {
      arm_.prime((*level_)[0]);
      forearm_.prime((*level_)[1]);
      warm_ = true;
    }
  }

 private:
  CausalFilter arm_;
  CausalFilter forearm_;
  std::optional<std::array<double, 2>> level_;
  bool warm_ = false;
  static constexpr int kWarmup = 50;
};

inline double velocity_magnitude(const SampleFrame& frame, VelocityObservable& filters) { return filters.step(frame); }

// Mean gyro magnitudes (arm, forearm) over a session.
inline std::array<double, 2> mean_input_level(std::span<const SampleFrame> frames) {
  std::array<double, 2> m{0.0, 0.0};
  for (const auto& f : frames) {
    m[0] += norm3(f.gyro_arm);
    m[1] += norm3(f.gyro_forearm);
  }
  if (!frames.empty())
    for (auto& v : m) v /= static_cast<double>(frames.size());
  return m;
}

// Causal observable over a recorded session (same arithmetic as live ingest).
inline std::vector<double> causal_velocity_observable(std::span<const SampleFrame> frames, std::optional<std::array<double, 2>> level = std::nullopt,
                                                      const FilterSpec& spec = motion_bandpass()) {
  VelocityObservable obs(spec, level);
  std::vector<double> y;
  y.reserve(frames.size());
  for (const auto& f : frames) y.push_back(obs.step(f));
  return y;
}

// Zero-phase observable used by offline segmentation.
inline std::vector<double> batch_velocity_observable(std::span<const SampleFrame> frames, const FilterSpec& spec = motion_bandpass()) {
  std::vector<double> arm(frames.size()), fore(frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i) {
    arm[i] = norm3(frames[i].gyro_arm);
    fore[i] = norm3(frames[i].gyro_forearm);
  }
  auto a = filtfilt(spec, arm), b = filtfilt(spec, fore);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

// Full-wave rectification followed by a causal 2nd-order 2 Hz low-pass.
inline std::vector<double> emg_envelope(std::span<const double> raw, double fs = kSampleRate) {
  const FilterSpec lp = design_lowpass(2.0, 2, fs);
  FilterState st = zero_state(lp);
  std::vector<double> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = std::max(0.0, filter_sample(lp, st, std::abs(raw[i])));
  return out;
}

// Centered moving average; edges average over the samples that exist.
inline std::vector<double> moving_average(std::span<const double> x, std::size_t window) {
  if (window == 0) throw Error("moving_average: window must be positive");
  const std::size_t n = x.size();
  std::vector<double> prefix(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + x[i];
  std::vector<double> y(n);
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(window / 2);
  for (std::size_t i = 0; i < n; ++i) {
    std::ptrdiff_t lo = static_cast<std::ptrdiff_t>(i) - half;
    std::ptrdiff_t hi = lo + static_cast<std::ptrdiff_t>(window);
    lo = std::max<std::ptrdiff_t>(lo, 0);
    hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(n));
    y[i] = (prefix[static_cast<std::size_t>(hi)] - prefix[static_cast<std::size_t>(lo)]) / static_cast<double>(hi - lo);
  }
  return y;
}

enum class MotionRole { none, forward, backward };

inline std::string_view to_string(MotionRole r) {
  switch (r) {
    case MotionRole::forward: return "forward";
    case MotionRole::backward: return "backward";
    default: return "none";
  }
}

struct SegmentInterval {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  Activity state = Activity::rest;
  MotionRole role = MotionRole::none;
  std::optional<int> direction;

  std::size_t length() const { return end - start; }
  bool operator==(const SegmentInterval&) const = default;
};

struct SegmentOptions {
  double rest_window_s = 1.0;
  double rest_sigma = 6.0;
  double smoothing_window_s = 1.0;
  double stage2_threshold = 0.1;
  double baseline_window_s = 10.0;
  double refine_sigma = 1.0;
  double refine_limit_s = 0.3;
};

// Direction of each trial, read off the frame labels (largest label seen).
inline std::map<int, int> trial_directions(std::span<const SampleFrame> frames) {
  std::map<int, int> dir;
  for (const auto& f : frames)
    if (f.label && *f.label > 0) dir[f.trial_id] = std::max(dir[f.trial_id], *f.label);
  return dir;
}

// Slowly varying rest level of the band-passed trace: median over a centered
// window, evaluated on a coarse grid and linearly interpolated.
inline std::vector<double> running_median(std::span<const double> y, std::size_t window, std::size_t stride = 25) {
  const std::size_t n = y.size();
  std::vector<double> out(n);
  if (n == 0) return out;
  std::vector<std::size_t> knots;
  for (std::size_t i = 0; i < n; i += stride) knots.push_back(i);
  if (knots.back() != n - 1) knots.push_back(n - 1);
  std::vector<double> vals, buf;
  for (std::size_t k : knots) {
    const std::size_t lo = k > window / 2 ? k - window / 2 : 0;
    const std::size_t hi = std::min(n, lo + window);
    buf.assign(y.begin() + static_cast<std::ptrdiff_t>(lo), y.begin() + static_cast<std::ptrdiff_t>(hi));
    auto mid = buf.begin() + static_cast<std::ptrdiff_t>(buf.size() / 2);
    std::nth_element(buf.begin(), mid, buf.end());
    vals.push_back(*mid);
  }
  for (std::size_t j = 0; j + 1 < knots.size(); ++j) {
    const std::size_t a = knots[j], b = knots[j + 1];
    for (std::size_t i = a; i <= b; ++i) out[i] = vals[j] + (vals[j + 1] - vals[j]) * static_cast<double>(i - a) / static_cast<double>(b - a);
  }
  if (knots.size() == 1) out[0] = vals[0];
  return out;
}

// Two cascaded filter+threshold stages over the summed gyro magnitude.
// Stage 1: zero-phase band-pass; a sample is above threshold when it exceeds
// the local rest level by 6 sd of the rest bookends (first and last second).
// The high-pass edge strips the DC that reaching adds, so the rest level
// drifts across a session; it is tracked with a running median instead of
// the bookend mean. Stage 2: 1 s centered moving average of the stage-1
// binary trace, threshold 0.1; this drops short blips and bridges gaps.
// Motion boundaries are the stage-1 edges inside each stage-2 region.
inline std::vector<SegmentInterval> segment_session(std::span<const SampleFrame> frames, const SegmentOptions& opt = {}) {
  const std::size_t n = frames.size();
  const std::size_t rest_n = static_cast<std::size_t>(std::lround(opt.rest_window_s * kSampleRate));
  if (n < 2 * rest_n + 1) throw Error("segment_session: session shorter than its rest bookends");

  const auto y = batch_velocity_observable(frames);
  auto window_var = [&](std::size_t a, std::size_t b) {
    double m = 0, q = 0;
    for (std::size_t i = a; i < b; ++i) m += y[i];
    m /= static_cast<double>(b - a);
    for (std::size_t i = a; i < b; ++i) q += (y[i] - m) * (y[i] - m);
    return q / static_cast<double>(b - a);
  };
  const double sd = std::sqrt(0.5 * (window_var(0, rest_n) + window_var(n - rest_n, n)));
  const auto base = running_median(y, static_cast<std::size_t>(std::lround(opt.baseline_window_s * kSampleRate)));

  std::vector<double> above(n);
  for (std::size_t i = 0; i < n; ++i) above[i] = y[i] > base[i] + opt.rest_sigma * sd ? 1.0 : 0.0;
  const auto smooth = moving_average(above, static_cast<std::size_t>(std::lround(opt.smoothing_window_s * kSampleRate)));

  std::vector<std::pair<std::size_t, std::size_t>> motion;
  for (std::size_t i = 0; i < n;) {
    if (smooth[i] < opt.stage2_threshold) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < n && smooth[j] >= opt.stage2_threshold) ++j;
    std::size_t first = j, last = i;
    for (std::size_t k = i; k < j; ++k)
      if (above[k] > 0.5) {
        first = std::min(first, k);
        last = k;
      }
    if (first < j) motion.emplace_back(first, last + 1);
    i = j;
  }

  // Edge refinement on the unfiltered summed magnitude: the zero-phase
  // filter smears each edge by a few samples, the raw trace does not.
  std::vector<double> raw(n);
  for (std::size_t i = 0; i < n; ++i) raw[i] = norm3(frames[i].gyro_arm) + norm3(frames[i].gyro_forearm);
  {
    double m = 0, q = 0;
    for (std::size_t i = 0; i < rest_n; ++i) m += raw[i] + raw[n - 1 - i];
    m /= 2.0 * static_cast<double>(rest_n);
    for (std::size_t i = 0; i < rest_n; ++i) q += (raw[i] - m) * (raw[i] - m) + (raw[n - 1 - i] - m) * (raw[n - 1 - i] - m);
    const double level = m + opt.refine_sigma * std::sqrt(q / (2.0 * static_cast<double>(rest_n)));
    for (std::size_t k = 0; k < motion.size(); ++k) {
      auto& [s, e] = motion[k];
      const std::size_t lo = k == 0 ? 1 : motion[k - 1].second + 1;
      const std::size_t hi = k + 1 == motion.size() ? n - 1 : motion[k + 1].first - 1;
      const std::size_t s0 = s, e0 = e;
      if (raw[s] > level) {
        while (s > lo && raw[s - 1] > level) --s;
      } else {
        while (s + 1 < e && raw[s] <= level) ++s;
      }
      if (raw[e - 1] > level) {
        while (e < hi && raw[e] > level) ++e;
      } else {
        while (e > s + 1 && raw[e - 1] <= level) --e;
      }
      // keep the filtered edges if the raw trace is too noisy to follow
      const std::size_t max_shift = static_cast<std::size_t>(std::lround(opt.refine_limit_s * kSampleRate));
      if ((s0 > s ? s0 - s : s - s0) > max_shift) s = s0;
      if ((e0 > e ? e0 - e : e - e0) > max_shift) e = e0;
    }
  }

  std::vector<SegmentInterval> out;
  if (motion.empty()) {
    out.push_back({0, n, Activity::rest, MotionRole::none, std::nullopt});
    return out;
  }
  if (motion.front().first == 0 || motion.back().second == n) throw Error("segment_session: session lacks rest bookends");

  const auto dirs = trial_directions(frames);
  std::size_t cursor = 0;
  for (std::size_t m = 0; m < motion.size(); ++m) {
    auto [s, e] = motion[m];
    if (s > cursor) out.push_back({cursor, s, Activity::rest, MotionRole::none, std::nullopt});
    SegmentInterval seg{s, e, Activity::motion, m % 2 == 0 ? MotionRole::forward : MotionRole::backward, std::nullopt};
    const int trial = frames[(s + e) / 2].trial_id;
    if (auto it = dirs.find(trial); it != dirs.end()) seg.direction = it->second;
    out.push_back(seg);
    cursor = e;
  }
  if (cursor < n) out.push_back({cursor, n, Activity::rest, MotionRole::none, std::nullopt});
  return out;
}

}  // namespace reachpred::dsp
