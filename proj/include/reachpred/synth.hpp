#pragma once

#include "reachpred/core.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

namespace reachpred::synth {

inline constexpr double kPi = 3.14159265358979323846;

struct MinimumJerkProfile {
  std::vector<double> position, velocity, acceleration;
};

// x(tau) = d (10 tau^3 - 15 tau^4 + 6 tau^5), sampled at t = i / fs for
// i = 0 .. round(duration * fs).
inline MinimumJerkProfile minimum_jerk(double distance, double duration, double fs) {
  if (!(distance > 0.0) || !(duration > 0.0) || !(fs > 0.0)) throw Error("minimum_jerk: distance, duration and rate must be positive");
  const int n = static_cast<int>(std::lround(duration * fs));
  MinimumJerkProfile p;
  for (int i = 0; i <= n; ++i) {
    const double tau = std::min(1.0, (i / fs) / duration);
    const double t2 = tau * tau, t3 = t2 * tau, t4 = t3 * tau;
    p.position.push_back(distance * (10 * t3 - 15 * t4 + 6 * t4 * tau));
    p.velocity.push_back(distance / duration * (30 * t2 - 60 * t3 + 30 * t4));
    p.acceleration.push_back(distance / (duration * duration) * (60 * tau - 180 * t2 + 120 * t3));
  }
  return p;
}

// Muscle gains for one direction: cosine tuning over 16 preferred angles
// (the forearm band is rotated half a spacing), diagonals as the normalised
// blend of their two neighbouring cardinal patterns.
inline std::array<double, kEmgChannels> cardinal_gains(double angle) {
  std::array<double, kEmgChannels> g{};
  for (std::size_t m = 0; m < kEmgChannels; ++m) {
    const double pref = 2.0 * kPi * static_cast<double>(m % 8) / 8.0 + (m >= 8 ? kPi / 8.0 : 0.0);
    g[m] = std::max(0.0, std::cos(angle - pref));
  }
  return g;
}

inline std::array<double, kEmgChannels> muscle_gains(int direction) {
  if (direction <= 4) return cardinal_gains(direction_angle(direction));
  // NE = N + E, SE = S + E, SW = S + W, NW = N + W
  static constexpr std::array<std::array<int, 2>, 4> nb = {{{1, 2}, {3, 2}, {3, 4}, {1, 4}}};
  const auto a = cardinal_gains(direction_angle(nb[static_cast<std::size_t>(direction - 5)][0]));
  const auto b = cardinal_gains(direction_angle(nb[static_cast<std::size_t>(direction - 5)][1]));
  double na = 0, nab = 0;
  std::array<double, kEmgChannels> g{};
  for (std::size_t m = 0; m < kEmgChannels; ++m) {
    g[m] = a[m] + b[m];
    na += a[m] * a[m];
    nab += g[m] * g[m];
  }
  const double s = std::sqrt(na / nab);
  for (auto& v : g) v *= s;
  return g;
}

struct SynthConfig {
  int directions = 4;
  int reps = 20;
  double distance = 0.15;        // m
  double duration_mean = 1.2;    // s
  double duration_sd = 0.2;
  double duration_min = 0.6;
  double rest_mean = 2.0;
  double rest_sd = 0.25;
  double rest_min = 1.2;
  double lead_rest = 2.0;
  double sample_rate = kSampleRate;

  double gyro_gain = 8.5;        // rad/s per m/s of hand speed
  double forearm_gyro_gain = 10.0;
  double accel_gain = 3.0;       // sensor m/s^2 per hand m/s^2
  double emg_amplitude = 1.0;
  // Angle between the IMU images of the two planar axes. Small values make
  // the inertial channels nearly degenerate between N/E and S/W.
  double imu_separation_deg = 2.0;
  // Direction-independent elbow extension (flexion on the way back), as a
  // fraction of the planar term. Keeps every heading visible to the gyros
  // when the planar mixing is nearly rank one.
  double elbow_gain = 0.7;

  double gyro_noise = 0.03;      // rad/s
  double accel_noise = 0.25;     // m/s^2
  double emg_noise = 0.35;
  double posture_sd = 0.04;      // rad, per-trial tilt of the gravity vector
  double emg_tone_sd = 0.10;     // per-trial common-mode co-contraction
  double noise_scale = 3.71;     // multiplies every stochastic perturbation; calibrated value
  double signal_scale = 1.0;     // multiplies every motion-driven component

  unsigned long seed = 42;

  void validate() const {
    if (directions != 4 && directions != 8) throw Error("SynthConfig: directions must be 4 or 8");
    if (reps < 1) throw Error("SynthConfig: reps must be >= 1");
    if (!(duration_mean > 0 && duration_min > 0 && rest_mean > 0 && rest_min > 0 && lead_rest >= 1.0)) throw Error("SynthConfig: durations must be positive (lead rest >= 1 s)");
    if (noise_scale < 0 || signal_scale < 0) throw Error("SynthConfig: scales must be non-negative");
  }
};

// Reference dataset: seed 42, 20 reps per class, noise scale calibrated so
// the FDA + GMM cross-validated accuracy at 30% of the reach sits near 0.91
// for L = 4 (see calibrate_noise in pipeline.hpp).
inline SynthConfig reference_config(int directions = 4) {
  SynthConfig c;
  c.directions = directions;
  c.seed = 42;
  return c;
}

struct TrialTruth {
  int trial_id = 0;
  int label = 0;
  std::size_t forward_onset = 0, forward_offset = 0;  // [onset, offset)
  std::size_t backward_onset = 0, backward_offset = 0;
  bool operator==(const TrialTruth&) const = default;
};

struct GroundTruth {
  std::vector<TrialTruth> trials;
  bool operator==(const GroundTruth&) const = default;
};

struct Session {
  std::vector<SampleFrame> frames;
  GroundTruth truth;
};

namespace detail {

using Vec3 = std::array<double, 3>;

inline Vec3 normalized(Vec3 v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  return {v[0] / n, v[1] / n, v[2] / n};
}

// Images of the planar x and y axes, separated by `sep` radians, and the
// elbow axis orthogonal to both.
struct AxisPair {
  Vec3 x, y, elbow;
};

inline AxisPair make_axes(Vec3 primary, Vec3 helper, double sep) {
  const Vec3 e1 = normalized(primary);
  const double d = helper[0] * e1[0] + helper[1] * e1[1] + helper[2] * e1[2];
  const Vec3 e2 = normalized({helper[0] - d * e1[0], helper[1] - d * e1[1], helper[2] - d * e1[2]});
  AxisPair a;
  a.x = e1;
  for (std::size_t i = 0; i < 3; ++i) a.y[i] = std::cos(sep) * e1[i] + std::sin(sep) * e2[i];
  a.elbow = {e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0]};
  return a;
}

struct Movement {
  std::size_t onset = 0;
  std::vector<double> speed, accel;  // along the unit heading
  double heading = 0.0;
};

}  // namespace detail

// Generates one session: lead rest, then reps blocks of a shuffled direction
// order; each trial is forward reach, rest on target, backward reach, rest at
// home. Timing and channel noise come from separate seeded streams so a
// noise sweep keeps the kinematic ground truth fixed.
inline Session gen_session(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 timing(cfg.seed);
  std::mt19937_64 noise(cfg.seed ^ 0x9E3779B97F4A7C15ULL);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double fs = cfg.sample_rate;

  auto draw = [&](double mean, double sd, double lo) { return std::max(lo, mean + sd * gauss(timing)); };
  auto samples = [&](double seconds) { return static_cast<std::size_t>(std::lround(seconds * fs)); };

  Session s;
  std::vector<detail::Movement> moves;
  std::vector<std::pair<std::size_t, int>> trial_starts;  // frame index, trial id
  std::size_t cursor = samples(cfg.lead_rest);
  int trial_id = 0;
  std::vector<int> order(static_cast<std::size_t>(cfg.directions));
  for (int rep = 0; rep < cfg.reps; ++rep) {
    for (int d = 0; d < cfg.directions; ++d) order[static_cast<std::size_t>(d)] = d + 1;
    std::shuffle(order.begin(), order.end(), timing);
    for (int dir : order) {
      ++trial_id;
      TrialTruth tt;
      tt.trial_id = trial_id;
      tt.label = dir;
      trial_starts.emplace_back(cursor, trial_id);
      for (int leg = 0; leg < 2; ++leg) {
        const double dur = draw(cfg.duration_mean, cfg.duration_sd, cfg.duration_min);
        const auto prof = minimum_jerk(cfg.distance, dur, fs);
        detail::Movement mv;
        mv.onset = cursor;
        mv.heading = direction_angle(dir) + (leg == 1 ? kPi : 0.0);
        mv.speed.assign(prof.velocity.begin(), prof.velocity.end() - 1);
        mv.accel.assign(prof.acceleration.begin(), prof.acceleration.end() - 1);
        const std::size_t len = mv.speed.size();
        if (leg == 0) {
          tt.forward_onset = cursor;
          tt.forward_offset = cursor + len;
        } else {
          tt.backward_onset = cursor;
          tt.backward_offset = cursor + len;
        }
        cursor += len;
        moves.push_back(std::move(mv));
        cursor += samples(draw(cfg.rest_mean, cfg.rest_sd, cfg.rest_min));
      }
      s.truth.trials.push_back(tt);
    }
  }
  const std::size_t total = cursor;

  const double sep = cfg.imu_separation_deg * kPi / 180.0;
  const auto gyro_arm_axes = detail::make_axes({0.8, 0.2, 0.55}, {0.1, 1.0, -0.3}, sep);
  const auto gyro_fore_axes = detail::make_axes({0.3, 0.9, 0.3}, {1.0, -0.2, 0.4}, sep);
  const auto acc_arm_axes = detail::make_axes({1.0, 0.3, 0.1}, {-0.2, 1.0, 0.2}, sep);
  const auto acc_fore_axes = detail::make_axes({0.2, 1.0, -0.1}, {1.0, 0.1, 0.3}, sep);

  std::vector<std::array<double, kEmgChannels>> gains(static_cast<std::size_t>(cfg.directions) + 1);
  for (int d = 1; d <= cfg.directions; ++d) gains[static_cast<std::size_t>(d)] = muscle_gains(d);
  // backward reaches recruit the antagonist pattern
  auto backward_gains = [&](double heading) { return cardinal_gains(heading); };

  // per-trial nuisance: gravity tilt and co-contraction tone
  const double ns = cfg.noise_scale;
  std::vector<std::array<double, 3>> posture(static_cast<std::size_t>(trial_id) + 1);
  std::vector<double> tone(static_cast<std::size_t>(trial_id) + 1);
  for (std::size_t k = 0; k < posture.size(); ++k) {
    posture[k] = {cfg.posture_sd * ns * gauss(noise), cfg.posture_sd * ns * gauss(noise), cfg.posture_sd * ns * gauss(noise)};
    tone[k] = std::abs(cfg.emg_tone_sd * ns * gauss(noise));
  }

  const double nominal_peak = 1.875 * cfg.distance / cfg.duration_mean;
  s.frames.resize(total);
  std::size_t next_trial = 0;
  int current_trial = 0;
  std::size_t mv_idx = 0;
  for (std::size_t i = 0; i < total; ++i) {
    while (next_trial < trial_starts.size() && trial_starts[next_trial].first <= i) current_trial = trial_starts[next_trial++].second;
    while (mv_idx < moves.size() && moves[mv_idx].onset + moves[mv_idx].speed.size() <= i) ++mv_idx;

    double speed = 0, acc = 0, heading = 0;
    int label = 0;
    bool forward = false;
    if (mv_idx < moves.size() && i >= moves[mv_idx].onset) {
      const auto& mv = moves[mv_idx];
      speed = mv.speed[i - mv.onset] * cfg.signal_scale;
      acc = mv.accel[i - mv.onset] * cfg.signal_scale;
      heading = mv.heading;
      label = s.truth.trials[mv_idx / 2].label;
      forward = mv_idx % 2 == 0;
    }
    const double vx = speed * std::cos(heading), vy = speed * std::sin(heading);
    const double ax = acc * std::cos(heading), ay = acc * std::sin(heading);
    const double elbow_v = cfg.elbow_gain * (forward ? speed : -speed);
    const double elbow_a = cfg.elbow_gain * (forward ? acc : -acc);

    SampleFrame& f = s.frames[i];
    f.t = static_cast<double>(i) / fs;
    f.trial_id = current_trial;
    f.label = label;
    const auto& tilt = posture[static_cast<std::size_t>(current_trial)];
    const detail::Vec3 g_arm = detail::normalized({tilt[0], tilt[1], 1.0});
    const detail::Vec3 g_fore = detail::normalized({tilt[1] + 0.3, tilt[2], 1.0});
    for (std::size_t k = 0; k < 3; ++k) {
      f.gyro_arm[k] = cfg.gyro_gain * (vx * gyro_arm_axes.x[k] + vy * gyro_arm_axes.y[k] + elbow_v * gyro_arm_axes.elbow[k]) + cfg.gyro_noise * ns * gauss(noise);
      f.gyro_forearm[k] = cfg.forearm_gyro_gain * (vx * gyro_fore_axes.x[k] + vy * gyro_fore_axes.y[k] + elbow_v * gyro_fore_axes.elbow[k]) + cfg.gyro_noise * ns * gauss(noise);
      f.accel_arm[k] = 9.81 * g_arm[k] + cfg.accel_gain * (ax * acc_arm_axes.x[k] + ay * acc_arm_axes.y[k] + elbow_a * acc_arm_axes.elbow[k]) + cfg.accel_noise * ns * gauss(noise);
      f.accel_forearm[k] =
          9.81 * g_fore[k] + cfg.accel_gain * (ax * acc_fore_axes.x[k] + ay * acc_fore_axes.y[k] + elbow_a * acc_fore_axes.elbow[k]) + cfg.accel_noise * ns * gauss(noise);
    }
    const double activation = speed / nominal_peak;
    const auto g = label == 0 ? std::array<double, kEmgChannels>{} : (forward ? gains[static_cast<std::size_t>(label)] : backward_gains(heading));
    for (std::size_t m = 0; m < kEmgChannels; ++m) {
      const double drive = activation * (cfg.emg_amplitude * g[m] + tone[static_cast<std::size_t>(current_trial)]);
      f.emg[m] = std::max(0.0, drive + cfg.emg_noise * ns * gauss(noise));
    }
  }
  return s;
}

// Same kinematics and noise stream at several signal-to-noise levels: the
// motion-driven components are scaled by the level, the noise is unchanged.
// An infinite level means signal at unit scale with the noise removed.
inline std::vector<Session> channel_snr_sweep(const SynthConfig& cfg, const std::vector<double>& levels) {
  std::vector<Session> out;
  for (double snr : levels) {
    if (snr < 0 || std::isnan(snr)) throw Error("channel_snr_sweep: levels must be non-negative");
    SynthConfig c = cfg;
    if (std::isinf(snr)) {
      c.noise_scale = 0.0;
      c.signal_scale = 1.0;
    } else {
      c.signal_scale = snr;
    }
    out.push_back(gen_session(c));
  }
  return out;
}

}  // namespace reachpred::synth
