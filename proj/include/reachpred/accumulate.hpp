#pragma once

#include "reachpred/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace reachpred::accumulate {

// What the sum criterion adds up. `normalized` sums the class-normalised
// posteriors, so C_s(t) = t. `raw_density` sums the unnormalised class
// densities instead.
enum class SumMode { normalized, raw_density };

struct StoppingConfig {
  double th_r = 0.95;
  double th_s = 95.0;
  int timeout = 240;  // samples since onset before giving up
  double target_accuracy = 0.95;
  SumMode sum_mode = SumMode::normalized;

  void validate() const {
    if (!(th_r >= 0.0 && th_r < 1.0)) throw Error("StoppingConfig: th_r must lie in [0, 1)");
    if (!(th_s > 0.0)) throw Error("StoppingConfig: th_s must be positive");
    if (timeout <= 0) throw Error("StoppingConfig: timeout must be positive");
  }
  bool operator==(const StoppingConfig&) const = default;
};

struct AccumulatorState {
  int t = 0;
  Eigen::VectorXd alpha;       // running sums of normalised posteriors
  Eigen::VectorXd alpha_norm;  // alpha / sum(alpha)
  Eigen::VectorXd raw_alpha;   // running sums of raw class densities
  double onset_time = 0.0;
};

inline AccumulatorState make_accumulator(int classes, double onset_time = 0.0) {
  AccumulatorState s;
  s.alpha = Eigen::VectorXd::Zero(classes);
  s.alpha_norm = Eigen::VectorXd::Constant(classes, 1.0 / classes);
  s.raw_alpha = Eigen::VectorXd::Zero(classes);
  s.onset_time = onset_time;
  return s;
}

// rho: class posteriors on the simplex. raw (optional): the unnormalised
// class densities for the raw_density sum mode.
inline AccumulatorState accumulate_step(AccumulatorState s, const Eigen::Ref<const Eigen::VectorXd>& rho, const Eigen::VectorXd* raw = nullptr) {
  if (rho.size() != s.alpha.size()) throw Error("accumulate_step: posterior has the wrong number of classes");
  s.alpha += rho;
  const double total = s.alpha.sum();
  s.alpha_norm = total > 0.0 ? Eigen::VectorXd(s.alpha / total) : Eigen::VectorXd::Constant(s.alpha.size(), 1.0 / static_cast<double>(s.alpha.size()));
  if (raw) s.raw_alpha += *raw;
  s.t += 1;
  return s;
}

// 1-based class with the largest normalised evidence; ties go to the lowest index.
inline int current_prediction(const AccumulatorState& s) {
  if (s.t < 1) throw Error("current_prediction: no evidence accumulated yet");
  int best = 0;
  for (int l = 1; l < s.alpha_norm.size(); ++l)
    if (s.alpha_norm[l] > s.alpha_norm[best]) best = l;
  return best + 1;
}

// 1 - k2/k1 over the two largest normalised evidences.
inline double ratio_criterion(const Eigen::Ref<const Eigen::VectorXd>& alpha_norm) {
  if (alpha_norm.size() < 2) throw Error("ratio_criterion: need at least 2 classes");
  double k1 = -1.0, k2 = -1.0;
  for (Eigen::Index l = 0; l < alpha_norm.size(); ++l) {
    const double v = alpha_norm[l];
    if (v > k1) {
      k2 = k1;
      k1 = v;
    } else if (v > k2) {
      k2 = v;
    }
  }
  if (!(k1 > 0.0)) return 0.0;
  return 1.0 - k2 / k1;
}

inline double ratio_criterion(const AccumulatorState& s) {
  if (s.t < 1) throw Error("ratio_criterion: no evidence accumulated yet");
  return ratio_criterion(s.alpha_norm);
}

inline double sum_criterion(const AccumulatorState& s, SumMode mode = SumMode::normalized) {
  return mode == SumMode::normalized ? s.alpha.sum() : s.raw_alpha.sum();
}

enum class StopKind { proceed, stop, abort };

struct StopDecision {
  StopKind kind = StopKind::proceed;
  int prediction = 0;  // valid when kind == stop
  double c_r = 0.0;
  double c_s = 0.0;
};

// Stop as soon as C_r > th_r or C_s > th_s; abort once t exceeds the timeout.
inline StopDecision should_stop(const AccumulatorState& s, const StoppingConfig& cfg) {
  StopDecision d;
  d.c_s = sum_criterion(s, cfg.sum_mode);
  if (s.t >= 1) {
    d.c_r = ratio_criterion(s.alpha_norm);
    if (d.c_r > cfg.th_r || d.c_s > cfg.th_s) {
      d.kind = StopKind::stop;
      d.prediction = current_prediction(s);
      return d;
    }
  }
  if (s.t > cfg.timeout) d.kind = StopKind::abort;
  return d;
}

// Per-class shuffled round-robin fold assignment. Returns the fold index of
// each trial. The round-robin start rotates between classes so fold sizes
// stay balanced when class counts are not multiples of k.
inline std::vector<int> stratified_kfold(const std::vector<int>& trial_labels, int k, unsigned long seed) {
  if (k < 1) throw Error("stratified_kfold: k must be >= 1");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < trial_labels.size(); ++i) by_class[trial_labels[i]].push_back(i);
  for (const auto& [cls, idx] : by_class)
    if (static_cast<int>(idx.size()) < k) throw Error("stratified_kfold: class " + std::to_string(cls) + " has fewer than k trials");
  std::mt19937_64 rng(seed);
  std::vector<int> fold(trial_labels.size(), 0);
  int offset = 0;
  for (auto& [cls, idx] : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i = 0; i < idx.size(); ++i) fold[idx[i]] = static_cast<int>((static_cast<std::size_t>(offset) + i) % static_cast<std::size_t>(k));
    offset = static_cast<int>((static_cast<std::size_t>(offset) + idx.size()) % static_cast<std::size_t>(k));
  }
  return fold;
}

// Class posteriors of one held-out reach, one row per sample from onset.
struct TrialEvidence {
  int trial_id = 0;
  int label = 0;
  int fold = 0;
  Eigen::MatrixXd posteriors;  // S x L, rows on the simplex
  Eigen::MatrixXd log_density;  // S x L, optional (raw_density mode)
  int length() const { return static_cast<int>(posteriors.rows()); }
};

struct ReplayOutcome {
  int stop_index = 0;  // number of samples consumed when the decision was taken
  int prediction = 0;
  bool stopped = false;  // false: no criterion fired before the reach ended
};

// Accumulates a recorded reach until the stopping rule fires. A reach that
// ends first is classified with the evidence available at its last sample.
inline ReplayOutcome replay_trial(const TrialEvidence& ev, double th_r, double th_s, SumMode mode = SumMode::normalized) {
  const int classes = static_cast<int>(ev.posteriors.cols());
  AccumulatorState s = make_accumulator(classes);
  StoppingConfig cfg;
  cfg.th_r = th_r;
  cfg.th_s = th_s;
  cfg.timeout = std::numeric_limits<int>::max();
  cfg.sum_mode = mode;
  ReplayOutcome out;
  for (int t = 0; t < ev.length(); ++t) {
    Eigen::VectorXd raw;
    if (mode == SumMode::raw_density) raw = ev.log_density.row(t).transpose().array().exp().matrix();
    s = accumulate_step(std::move(s), ev.posteriors.row(t).transpose(), mode == SumMode::raw_density ? &raw : nullptr);
    auto d = should_stop(s, cfg);
    if (d.kind == StopKind::stop) {
      out.stop_index = s.t;
      out.prediction = d.prediction;
      out.stopped = true;
      return out;
    }
  }
  out.stop_index = s.t;
  out.prediction = s.t > 0 ? current_prediction(s) : 1;
  return out;
}

struct FrontierRow {
  double th_r = 0, th_s = 0;
  double mean_acc = 0, std_acc = 0;
  double mean_time_s = 0;
  double mean_pct_trajectory = 0;
};

struct GridResult {
  StoppingConfig config;
  FrontierRow selected;
  bool target_met = false;
  std::vector<FrontierRow> frontier;
};

inline std::vector<double> default_ratio_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 9; ++i) g.push_back(0.50 + 0.05 * i);
  g.push_back(0.99);
  return g;
}

inline std::vector<double> default_sum_grid() {
  std::vector<double> g;
  for (int s = 5; s <= 150; s += 5) g.push_back(s);
  return g;
}

inline FrontierRow evaluate_cell(const std::vector<TrialEvidence>& trials, double th_r, double th_s, SumMode mode = SumMode::normalized) {
  FrontierRow row{th_r, th_s};
  if (trials.empty()) return row;
  std::map<int, std::pair<int, int>> per_fold;  // correct, total
  double time = 0.0, pct = 0.0;
  int correct = 0;
  for (const auto& tr : trials) {
    auto o = replay_trial(tr, th_r, th_s, mode);
    const bool ok = o.prediction == tr.label;
    correct += ok;
    auto& f = per_fold[tr.fold];
    f.first += ok;
    f.second += 1;
    time += o.stop_index / kSampleRate;
    pct += 100.0 * o.stop_index / std::max(1, tr.length());
  }
  const double n = static_cast<double>(trials.size());
  row.mean_acc = correct / n;
  row.mean_time_s = time / n;
  row.mean_pct_trajectory = pct / n;
  if (per_fold.size() > 1) {
    double m = 0.0, sq = 0.0;
    for (auto& [_, f] : per_fold) m += static_cast<double>(f.first) / f.second;
    m /= static_cast<double>(per_fold.size());
    for (auto& [_, f] : per_fold) sq += std::pow(static_cast<double>(f.first) / f.second - m, 2);
    row.std_acc = std::sqrt(sq / static_cast<double>(per_fold.size() - 1));
  }
  return row;
}

// Replays every held-out reach for every threshold pair. Selection: among
// cells meeting the target accuracy, the smallest mean stop time; ties go to
// the larger th_r, then the smaller th_s. With no qualifying cell the most
// accurate one is returned and target_met is false.
inline GridResult grid_search(const std::vector<TrialEvidence>& trials, const std::vector<double>& ratio_grid, const std::vector<double>& sum_grid, double target_accuracy = 0.95,
                              SumMode mode = SumMode::normalized) {
  if (ratio_grid.empty() || sum_grid.empty()) throw Error("grid_search: empty grid");
  GridResult res;
  for (double r : ratio_grid)
    for (double s : sum_grid) res.frontier.push_back(evaluate_cell(trials, r, s, mode));

  const FrontierRow* best = nullptr;
  for (const auto& row : res.frontier) {
    if (row.mean_acc + 1e-12 < target_accuracy) continue;
    if (!best || row.mean_time_s < best->mean_time_s - 1e-12 ||
        (std::abs(row.mean_time_s - best->mean_time_s) <= 1e-12 && (row.th_r > best->th_r || (row.th_r == best->th_r && row.th_s < best->th_s))))
      best = &row;
  }
  res.target_met = best != nullptr;
  if (!best) {
    for (const auto& row : res.frontier)
      if (!best || row.mean_acc > best->mean_acc || (row.mean_acc == best->mean_acc && row.mean_time_s < best->mean_time_s)) best = &row;
  }
  res.selected = *best;
  res.config.th_r = best->th_r;
  res.config.th_s = best->th_s;
  res.config.target_accuracy = target_accuracy;
  res.config.sum_mode = mode;
  return res;
}

}  // namespace reachpred::accumulate
