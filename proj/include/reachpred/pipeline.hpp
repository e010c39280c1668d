#pragma once

#include "reachpred/accumulate.hpp"
#include "reachpred/core.hpp"
#include "reachpred/dsp.hpp"
#include "reachpred/fsm.hpp"
#include "reachpred/intention.hpp"
#include "reachpred/mixture.hpp"
#include "reachpred/reduce.hpp"
#include "reachpred/store.hpp"
#include "reachpred/synth.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace reachpred::pipeline {

// One forward reach: frames [start, end) of a session.
struct Reach {
  int trial_id = 0;
  int label = 0;
  std::size_t start = 0, end = 0;
  std::size_t length() const { return end - start; }
};

inline std::vector<Reach> reaches_from_segments(const std::vector<SampleFrame>& frames, const std::vector<dsp::SegmentInterval>& segs) {
  std::vector<Reach> out;
  for (const auto& s : segs) {
    if (s.state != Activity::motion || s.role != dsp::MotionRole::forward || !s.direction) continue;
    out.push_back({frames[(s.start + s.end) / 2].trial_id, *s.direction, s.start, s.end});
  }
  return out;
}

inline std::vector<Reach> reaches_from_truth(const synth::GroundTruth& truth) {
  std::vector<Reach> out;
  for (const auto& t : truth.trials) out.push_back({t.trial_id, t.label, t.forward_onset, t.forward_offset});
  return out;
}

inline int class_count(const std::vector<Reach>& reaches) {
  int mx = 0;
  for (const auto& r : reaches) mx = std::max(mx, r.label);
  return mx;
}

struct DirectionOptions {
  reduce::VariantOptions reduce;
  mixture::DirectionFitOptions mixture;
};

struct DirectionPipeline {
  reduce::ReducerMap map;
  mixture::DirectionModel model;
  std::vector<std::string> warnings;
};

inline DirectionPipeline fit_direction(const std::vector<SampleFrame>& frames, const std::vector<Reach>& reaches, const std::vector<std::size_t>& use, reduce::Variant variant,
                                       int classes, unsigned long seed, const DirectionOptions& opt = {}) {
  std::size_t rows = 0;
  for (std::size_t i : use) rows += reaches[i].length();
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(kChannels));
  std::vector<int> labels;
  labels.reserve(rows);
  Eigen::Index r = 0;
  for (std::size_t i : use) {
    const auto& rc = reaches[i];
    for (std::size_t k = rc.start; k < rc.end; ++k) {
      x.row(r++) = frames[k].channels().transpose();
      labels.push_back(rc.label);
    }
  }
  DirectionPipeline p;
  auto vf = reduce::fit_variant(variant, x, labels, static_cast<unsigned>(seed), opt.reduce);
  p.map = std::move(vf.map);
  p.warnings = std::move(vf.warnings);
  const Eigen::MatrixXd z = reduce::transform_rows(p.map, x);
  p.model = mixture::fit_direction_model(z, labels, classes, seed, opt.mixture, &p.warnings);
  return p;
}

// Per-sample class log densities and normalised posteriors for one reach.
inline accumulate::TrialEvidence trial_evidence(const DirectionPipeline& p, const std::vector<SampleFrame>& frames, const Reach& reach) {
  accumulate::TrialEvidence ev;
  ev.trial_id = reach.trial_id;
  ev.label = reach.label;
  const Eigen::MatrixXd z = reduce::transform_rows(p.map, stack_channels(frames, reach.start, reach.end));
  const int l_count = p.model.classes;
  ev.log_density.resize(z.rows(), l_count);
  for (int l = 0; l < l_count; ++l) {
    const Eigen::MatrixXd t = p.model.mixtures[static_cast<std::size_t>(l)].component_log_terms_batch(z);
    for (Eigen::Index i = 0; i < t.rows(); ++i) {
      const double m = t.row(i).maxCoeff();
      ev.log_density(i, l) = std::isfinite(m) ? m + std::log((t.row(i).array() - m).exp().sum()) : m;
    }
  }
  ev.posteriors.resize(z.rows(), l_count);
  for (Eigen::Index i = 0; i < z.rows(); ++i) ev.posteriors.row(i) = mixture::normalize_over_classes(ev.log_density.row(i).transpose()).transpose();
  return ev;
}

// Stratified k-fold: fit on k-1 folds, collect evidence on the held-out reaches.
inline std::vector<accumulate::TrialEvidence> cross_validate(const std::vector<SampleFrame>& frames, const std::vector<Reach>& reaches, reduce::Variant variant, int folds,
                                                             unsigned long seed, const DirectionOptions& opt = {}, std::vector<std::string>* warnings = nullptr) {
  const int classes = class_count(reaches);
  std::vector<int> labels;
  for (const auto& r : reaches) labels.push_back(r.label);
  const auto fold = accumulate::stratified_kfold(labels, folds, seed);
  std::vector<accumulate::TrialEvidence> out(reaches.size());
  for (int f = 0; f < folds; ++f) {
    std::vector<std::size_t> train, test;
    for (std::size_t i = 0; i < reaches.size(); ++i) (fold[i] == f ? test : train).push_back(i);
    auto p = fit_direction(frames, reaches, train, variant, classes, seed + static_cast<unsigned long>(f), opt);
    if (warnings) warnings->insert(warnings->end(), p.warnings.begin(), p.warnings.end());
    for (std::size_t i : test) {
      out[i] = trial_evidence(p, frames, reaches[i]);
      out[i].fold = f;
    }
  }
  return out;
}

// Samples observed after `percent` of a reach of `length` samples (at least 1).
inline int samples_at_percent(int length, double percent) { return std::clamp(static_cast<int>(std::ceil(percent / 100.0 * length - 1e-9)), 1, length); }

struct CurvePoint {
  double percent = 0;
  double mean_acc = 0;
  double std_acc = 0;  // across folds
};

// Accumulated-evidence argmax after a fixed fraction of each reach.
inline CurvePoint accuracy_at(const std::vector<accumulate::TrialEvidence>& evidence, double percent) {
  CurvePoint pt{percent};
  std::map<int, std::pair<int, int>> per_fold;
  int correct = 0;
  for (const auto& ev : evidence) {
    const int n = samples_at_percent(ev.length(), percent);
    const Eigen::VectorXd alpha = ev.posteriors.topRows(n).colwise().sum().transpose();
    Eigen::Index best = 0;
    for (Eigen::Index l = 1; l < alpha.size(); ++l)
      if (alpha[l] > alpha[best]) best = l;
    const bool ok = best + 1 == ev.label;
    correct += ok;
    per_fold[ev.fold].first += ok;
    per_fold[ev.fold].second += 1;
  }
  pt.mean_acc = evidence.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(evidence.size());
  if (per_fold.size() > 1) {
    double m = 0, sq = 0;
    for (auto& [_, f] : per_fold) m += static_cast<double>(f.first) / f.second;
    m /= static_cast<double>(per_fold.size());
    for (auto& [_, f] : per_fold) sq += std::pow(static_cast<double>(f.first) / f.second - m, 2);
    pt.std_acc = std::sqrt(sq / static_cast<double>(per_fold.size() - 1));
  }
  return pt;
}

inline std::vector<double> default_percents() { return {10, 20, 30, 40, 50, 60, 70, 80, 90, 100}; }

inline std::vector<CurvePoint> accuracy_curve(const std::vector<accumulate::TrialEvidence>& evidence, const std::vector<double>& percents = default_percents()) {
  std::vector<CurvePoint> out;
  for (double p : percents) out.push_back(accuracy_at(evidence, p));
  return out;
}

inline double mean_accuracy(const std::vector<CurvePoint>& curve, double lo, double hi) {
  double s = 0;
  int n = 0;
  for (const auto& p : curve)
    if (p.percent >= lo - 1e-9 && p.percent <= hi + 1e-9) {
      s += p.mean_acc;
      ++n;
    }
  return n ? s / n : 0.0;
}

// Reaches of a session: segmented when possible, ground truth otherwise.
inline std::vector<Reach> session_reaches(const std::vector<SampleFrame>& frames, const std::optional<synth::GroundTruth>& truth, bool use_truth = false) {
  if (use_truth) {
    if (!truth) throw Error("ground-truth reaches requested but the session has no truth sidecar");
    return reaches_from_truth(*truth);
  }
  auto r = reaches_from_segments(frames, dsp::segment_session(frames));
  if (r.empty()) throw Error("segmentation found no forward reaches with a direction label");
  return r;
}

// Five-fold FDA + GMM accuracy at 30% of the reach on a generated session.
inline double reference_accuracy(const synth::SynthConfig& cfg, double percent = 30.0, int folds = 5) {
  const auto s = synth::gen_session(cfg);
  const auto reaches = session_reaches(s.frames, s.truth);
  return accuracy_at(cross_validate(s.frames, reaches, reduce::Variant::fda, folds, cfg.seed), percent).mean_acc;
}

struct CalibrationStep {
  double noise_scale = 0;
  double accuracy = 0;
};

// Bisection on the global noise multiplier so the reference accuracy lands on
// `target`. Accuracy decreases with noise; returns the last bracket midpoint.
inline std::vector<CalibrationStep> calibrate_noise(synth::SynthConfig cfg, double target = 0.91, double lo = 0.25, double hi = 8.0, int steps = 10, double tolerance = 0.01) {
  std::vector<CalibrationStep> trace;
  for (int i = 0; i < steps; ++i) {
    const double mid = std::sqrt(lo * hi);
    cfg.noise_scale = mid;
    const double acc = reference_accuracy(cfg);
    trace.push_back({mid, acc});
    if (std::abs(acc - target) <= tolerance) break;
    (acc > target ? lo : hi) = mid;
  }
  return trace;
}

// ---------------------------------------------------------------- training

struct TrainOptions {
  reduce::Variant variant = reduce::Variant::fda;
  unsigned long seed = 42;
  int folds = 5;
  double target_accuracy = 0.95;
  std::vector<double> ratio_grid = accumulate::default_ratio_grid();
  std::vector<double> sum_grid = accumulate::default_sum_grid();
  accumulate::SumMode sum_mode = accumulate::SumMode::normalized;
  bool use_truth = false;
  DirectionOptions direction;
};

struct TrainResult {
  store::ModelBundle bundle;
  accumulate::GridResult grid;
  std::vector<dsp::SegmentInterval> segments;
  std::vector<Reach> reaches;
  std::vector<accumulate::TrialEvidence> evidence;
};

inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t i = static_cast<std::size_t>(pos);
  const double f = pos - static_cast<double>(i);
  return i + 1 < v.size() ? v[i] * (1 - f) + v[i + 1] * f : v[i];
}

// HMM on the causal observable (the one the live engine sees).
inline intention::BaumWelchResult train_intention(const std::vector<SampleFrame>& frames) {
  const auto level = dsp::mean_input_level(frames);
  const std::vector<std::vector<double>> seq{dsp::causal_velocity_observable(frames, level)};
  auto res = intention::baum_welch(seq, intention::initial_model(seq));
  res.model.input_level = level;
  return res;
}

struct TuneResult {
  accumulate::GridResult grid;
  std::vector<accumulate::TrialEvidence> evidence;
  std::vector<std::string> warnings;
};

// Cross-validated evidence for the reaches, then the threshold grid search.
inline TuneResult tune_thresholds(const std::vector<SampleFrame>& frames, const std::vector<Reach>& reaches, const TrainOptions& opt) {
  TuneResult t;
  t.evidence = cross_validate(frames, reaches, opt.variant, opt.folds, opt.seed, opt.direction, &t.warnings);
  t.grid = accumulate::grid_search(t.evidence, opt.ratio_grid, opt.sum_grid, opt.target_accuracy, opt.sum_mode);
  if (!t.grid.target_met) t.warnings.push_back("tune: no threshold pair met the target accuracy; the most accurate cell was kept");
  return t;
}

// Writes tuned thresholds into a bundle. The timeout is twice the 90th
// percentile of the reach length.
inline void apply_tuning(store::ModelBundle& b, const TuneResult& t, const std::vector<Reach>& reaches) {
  std::vector<double> durations;
  for (const auto& r : reaches) durations.push_back(static_cast<double>(r.length()));
  b.stopping = t.grid.config;
  b.stopping.timeout = std::max(1, static_cast<int>(std::lround(2.0 * percentile(durations, 0.9))));
}

// HMM, tuned thresholds from the cross-validated evidence, and the direction
// model refit on every reach.
inline TrainResult train(const store::Dataset& data, const TrainOptions& opt) {
  TrainResult res;
  const auto& frames = data.frames;
  res.segments = dsp::segment_session(frames);
  res.reaches = opt.use_truth ? session_reaches(frames, data.truth, true) : reaches_from_segments(frames, res.segments);
  if (res.reaches.empty()) throw Error("train: no labelled forward reaches in the session");
  const int classes = class_count(res.reaches);

  store::ModelBundle& b = res.bundle;
  auto hmm = train_intention(frames);
  b.hmm = hmm.model;
  b.provenance.warnings = hmm.warnings;

  auto tuned = tune_thresholds(frames, res.reaches, opt);
  res.grid = tuned.grid;
  res.evidence = std::move(tuned.evidence);
  b.provenance.warnings.insert(b.provenance.warnings.end(), tuned.warnings.begin(), tuned.warnings.end());

  std::vector<std::size_t> all(res.reaches.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  auto p = fit_direction(frames, res.reaches, all, opt.variant, classes, opt.seed, opt.direction);
  b.reducer = std::move(p.map);
  b.direction = std::move(p.model);
  b.provenance.warnings.insert(b.provenance.warnings.end(), p.warnings.begin(), p.warnings.end());

  apply_tuning(b, tuned, res.reaches);
  b.fsm = fsm::derive_config(res.segments);
  for (int l = 1; l <= classes; ++l) b.command_space.push_back(direction_name(l));
  b.provenance.dataset_hash = data.hash;
  b.provenance.seeds["train"] = static_cast<long long>(opt.seed);
  b.provenance.seeds["folds"] = opt.folds;
  return res;
}

}  // namespace reachpred::pipeline
