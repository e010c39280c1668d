#pragma once

#include "reachpred/core.hpp"
#include "reachpred/synth.hpp"

#include <cmath>
#include <optional>
#include <random>
#include <vector>

// Frame adapter for pointer input (the browser demo). A 2-D cursor has no
// gyros or muscles, so the adapter fills the standard 28 channels from the
// cursor kinematics: planar velocity drives both gyro triplets, acceleration
// plus gravity the accelerometers, and speed-modulated cosine-tuned envelopes
// stand in for EMG. The engine then runs its usual inference path unchanged.
namespace reachpred::cursor {

// Position in metres on the reach plane, home at the origin, y pointing N.
struct PointerSample {
  double t = 0.0;
  double x = 0.0;
  double y = 0.0;
};

struct AdapterConfig {
  double sample_rate = kSampleRate;
  double gyro_gain = 8.5;
  double forearm_gyro_gain = 10.0;
  double accel_gain = 3.0;
  double emg_amplitude = 1.0;
  double nominal_speed = 1.875 * 0.15 / 1.2;  // peak speed of an average reach
  double emg_floor = 0.02;
  double smoothing = 0.5;  // EMA weight of the newest velocity estimate
};

inline SampleFrame cursor_frame(double t, double vx, double vy, double ax, double ay, const AdapterConfig& cfg) {
  SampleFrame f;
  f.t = t;
  f.gyro_arm = {cfg.gyro_gain * vx, cfg.gyro_gain * vy, 0.0};
  f.gyro_forearm = {cfg.forearm_gyro_gain * (0.9 * vx + 0.3 * vy), cfg.forearm_gyro_gain * (0.9 * vy - 0.3 * vx), 0.0};
  f.accel_arm = {cfg.accel_gain * ax, cfg.accel_gain * ay, 9.81};
  f.accel_forearm = {cfg.accel_gain * (0.9 * ax + 0.3 * ay), cfg.accel_gain * (0.9 * ay - 0.3 * ax), 9.81};
  const double speed = std::hypot(vx, vy);
  const auto g = speed > 0 ? synth::cardinal_gains(std::atan2(vy, vx)) : std::array<double, kEmgChannels>{};
  for (std::size_t m = 0; m < kEmgChannels; ++m) f.emg[m] = cfg.emg_floor + cfg.emg_amplitude * (speed / cfg.nominal_speed) * g[m];
  return f;
}

// Resamples irregular pointer events onto the 100 Hz frame grid (linear
// interpolation) and differentiates. Frames are stamped t0 + k / fs.
class CursorAdapter {
 public:
  explicit CursorAdapter(AdapterConfig cfg = {}) : cfg_(cfg) {}

  std::vector<SampleFrame> push(const PointerSample& s) {
    std::vector<SampleFrame> out;
    if (!prev_) {
      prev_ = s;
      t0_ = s.t;
      k_ = 0;
    }
    if (s.t < prev_->t) throw Error("CursorAdapter: pointer samples out of order");
    const double dt = 1.0 / cfg_.sample_rate;
    while (true) {
      const double tk = t0_ + static_cast<double>(k_) / cfg_.sample_rate;
      if (tk > s.t) break;
      double x = s.x, y = s.y;
      if (s.t > prev_->t) {
        const double w = (tk - prev_->t) / (s.t - prev_->t);
        x = prev_->x + w * (s.x - prev_->x);
        y = prev_->y + w * (s.y - prev_->y);
      }
      double vx = 0, vy = 0;
      if (last_pos_) {
        vx = cfg_.smoothing * (x - (*last_pos_)[0]) / dt + (1 - cfg_.smoothing) * vel_[0];
        vy = cfg_.smoothing * (y - (*last_pos_)[1]) / dt + (1 - cfg_.smoothing) * vel_[1];
      }
      const double ax = (vx - vel_[0]) / dt, ay = (vy - vel_[1]) / dt;
      out.push_back(cursor_frame(tk, vx, vy, ax, ay, cfg_));
      vel_ = {vx, vy};
      last_pos_ = std::array<double, 2>{x, y};
      ++k_;
    }
    prev_ = s;
    return out;
  }

  void reset() {
    prev_.reset();
    last_pos_.reset();
    vel_ = {0.0, 0.0};
    k_ = 0;
  }

 private:
  AdapterConfig cfg_;
  std::optional<PointerSample> prev_;
  std::optional<std::array<double, 2>> last_pos_;
  std::array<double, 2> vel_{0.0, 0.0};
  double t0_ = 0.0;
  long k_ = 0;
};

struct CursorSessionConfig {
  synth::SynthConfig base;     // protocol timing, directions, reps, seed
  double tremor = 0.0003;      // m, white positional jitter
  double curvature_sd = 0.08;  // lateral bow as a fraction of the distance
};

struct CursorSession {
  std::vector<PointerSample> pointer;
  synth::Session session;  // adapter frames with labels and truth
};

// Scripted pointer reaches on the usual protocol, pushed through the adapter.
// Used to train the demo bundle and as the scripted-client oracle.
inline CursorSession gen_cursor_session(const CursorSessionConfig& cc, const AdapterConfig& acfg = {}) {
  const auto& cfg = cc.base;
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double fs = cfg.sample_rate;
  auto draw = [&](double mean, double sd, double lo) { return std::max(lo, mean + sd * gauss(rng)); };
  auto samples = [&](double seconds) { return static_cast<std::size_t>(std::lround(seconds * fs)); };

  CursorSession out;
  std::vector<std::array<double, 2>> pos;
  std::vector<int> label, trial;
  auto hold = [&](std::size_t n, std::array<double, 2> p, int tr) {
    for (std::size_t i = 0; i < n; ++i) pos.push_back(p), label.push_back(0), trial.push_back(tr);
  };
  hold(samples(cfg.lead_rest), {0, 0}, 0);
  int trial_id = 0;
  std::vector<int> order(static_cast<std::size_t>(cfg.directions));
  for (int rep = 0; rep < cfg.reps; ++rep) {
    for (int d = 0; d < cfg.directions; ++d) order[static_cast<std::size_t>(d)] = d + 1;
    std::shuffle(order.begin(), order.end(), rng);
    for (int dir : order) {
      ++trial_id;
      synth::TrialTruth tt;
      tt.trial_id = trial_id;
      tt.label = dir;
      const double a = direction_angle(dir);
      const std::array<double, 2> target{cfg.distance * std::cos(a), cfg.distance * std::sin(a)};
      for (int leg = 0; leg < 2; ++leg) {
        const auto prof = synth::minimum_jerk(cfg.distance, draw(cfg.duration_mean, cfg.duration_sd, cfg.duration_min), fs);
        const double bow = cc.curvature_sd * cfg.distance * gauss(rng);
        const std::size_t n = prof.position.size() - 1;
        (leg == 0 ? tt.forward_onset : tt.backward_onset) = pos.size();
        for (std::size_t i = 0; i < n; ++i) {
          const double s = prof.position[i] / cfg.distance;
          const double along = leg == 0 ? s : 1.0 - s;
          const double side = bow * std::sin(synth::kPi * s);
          pos.push_back({along * target[0] - side * std::sin(a), along * target[1] + side * std::cos(a)});
          label.push_back(dir);
          trial.push_back(trial_id);
        }
        (leg == 0 ? tt.forward_offset : tt.backward_offset) = pos.size();
        hold(samples(draw(cfg.rest_mean, cfg.rest_sd, cfg.rest_min)), leg == 0 ? target : std::array<double, 2>{0, 0}, trial_id);
      }
      out.session.truth.trials.push_back(tt);
    }
  }

  const double jitter = cc.tremor * cfg.noise_scale;
  CursorAdapter adapter(acfg);
  for (std::size_t i = 0; i < pos.size(); ++i) {
    PointerSample p{static_cast<double>(i) / fs, pos[i][0] + jitter * gauss(rng), pos[i][1] + jitter * gauss(rng)};
    out.pointer.push_back(p);
    for (auto& f : adapter.push(p)) {
      f.trial_id = trial[i];
      f.label = label[i];
      out.session.frames.push_back(f);
    }
  }
  return out;
}

}  // namespace reachpred::cursor
