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

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace reachpred::engine {

using json = nlohmann::json;

// kind is one of: state, intention, probability, transition, command, abort,
// reset, error. Payload fields depend on the kind (see README).
struct EngineEvent {
  std::string kind;
  double t = 0.0;
  long frame = -1;
  json payload = json::object();
  double latency_ms = 0.0;  // processing time of the frame that produced it

  // Wire form; latency is omitted unless asked for so logs stay deterministic.
  json to_json(bool with_latency = false) const {
    json j = payload;
    j["kind"] = kind;
    j["t"] = t;
    j["frame"] = frame;
    if (with_latency) j["latency_ms"] = latency_ms;
    return j;
  }
  bool same_payload(const EngineEvent& o) const { return kind == o.kind && frame == o.frame && payload == o.payload; }
};

inline json vec_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

// One live session: streaming filters, HMM belief, accumulator (armed only in
// EVIDENCE_ACCUMULATION) and the controller. Single consumer.
class SessionEngine {
 public:
  explicit SessionEngine(store::ModelBundle bundle) : bundle_(std::move(bundle)) {
    bundle_.validate();
    classes_ = bundle_.direction.classes;
    reset_state();
  }

  const store::ModelBundle& bundle() const { return bundle_; }
  const fsm::ControllerState& controller() const { return cs_; }
  const intention::IntentionBelief& belief() const { return belief_; }
  Activity intention() const { return intention_; }
  const std::optional<accumulate::AccumulatorState>& accumulator() const { return acc_; }
  long frames_seen() const { return frame_index_ + 1; }

  EngineEvent state_event(double t) const {
    EngineEvent e{"state", t, frame_index_};
    e.payload["state"] = std::string(fsm::to_string(cs_.state));
    e.payload["intention"] = std::string(to_string(intention_));
    e.payload["posterior"] = belief_.posterior;
    e.payload["classes"] = bundle_.command_space;
    return e;
  }

  std::vector<EngineEvent> reset(double t = 0.0) {
    reset_state();
    std::vector<EngineEvent> out;
    out.push_back({"reset", t, frame_index_});
    out.back().payload["scope"] = "session";
    out.push_back(state_event(t));
    return out;
  }

  // Operator reset: controller back to HOME, accumulator dropped; filters,
  // belief and the frame clock carry on.
  std::vector<EngineEvent> reset_controller(double t) {
    cs_ = fsm::ControllerState{};
    acc_.reset();
    std::vector<EngineEvent> out;
    out.push_back({"reset", t, frame_index_});
    out.back().payload["scope"] = "controller";
    out.push_back(state_event(t));
    return out;
  }

  // Per frame: causal filters -> observable -> HMM step -> intention; in EA,
  // reduce -> class densities -> normalise -> accumulate -> stopping rule;
  // then the controller step. Events come out in that order.
  std::vector<EngineEvent> ingest(const SampleFrame& frame) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<EngineEvent> out;
    if (last_t_ && !(frame.t > *last_t_)) {
      EngineEvent e{"error", frame.t, frame_index_};
      e.payload["message"] = "out-of-order frame rejected (t=" + store::format_double(frame.t) + " after " + store::format_double(*last_t_) + ")";
      out.push_back(std::move(e));
      return out;
    }
    last_t_ = frame.t;
    ++frame_index_;
    const long fi = frame_index_;

    const double x = observable_.step(frame);
    belief_ = intention::forward_step(bundle_.hmm, belief_, x);
    belief_.sample_index = fi;
    const Activity now = intention::predict_intention(belief_);
    if (now != intention_) {
      EngineEvent e{"intention", frame.t, fi};
      e.payload["state"] = std::string(to_string(now));
      e.payload["posterior"] = belief_.posterior;
      out.push_back(std::move(e));
    }
    intention_ = now;

    fsm::StopInput stop = fsm::StopInput::none;
    std::optional<int> predicted;
    if (cs_.state == fsm::State::evidence_accumulation && acc_ && now == Activity::motion) {
      const Eigen::VectorXd z = reduce::transform(bundle_.reducer, frame.channels());
      const Eigen::VectorXd log_rho = mixture::class_log_pdf(bundle_.direction, z);
      const Eigen::VectorXd rho = mixture::normalize_over_classes(log_rho);
      if (bundle_.stopping.sum_mode == accumulate::SumMode::raw_density) {
        const Eigen::VectorXd raw = log_rho.array().exp().matrix();
        acc_ = accumulate::accumulate_step(std::move(*acc_), rho, &raw);
      } else {
        acc_ = accumulate::accumulate_step(std::move(*acc_), rho);
      }
      const auto d = accumulate::should_stop(*acc_, bundle_.stopping);
      EngineEvent e{"probability", frame.t, fi};
      e.payload["alpha"] = vec_json(acc_->alpha_norm);
      e.payload["c_r"] = d.c_r;
      e.payload["c_s"] = d.c_s;
      e.payload["samples"] = acc_->t;
      e.payload["leading"] = direction_name(accumulate::current_prediction(*acc_));
      out.push_back(std::move(e));
      stop = d.kind == accumulate::StopKind::stop ? fsm::StopInput::stop : d.kind == accumulate::StopKind::abort ? fsm::StopInput::abort : fsm::StopInput::proceed;
      if (d.kind == accumulate::StopKind::stop) predicted = d.prediction;
    }

    const auto prev = cs_.state;
    auto r = fsm::fsm_step(cs_, now, stop, predicted, bundle_.fsm, frame.t);
    cs_ = r.next;
    if (!r.trigger.empty()) {
      EngineEvent e{"transition", frame.t, fi};
      e.payload["from"] = std::string(fsm::to_string(prev));
      e.payload["to"] = std::string(fsm::to_string(cs_.state));
      e.payload["trigger"] = r.trigger;
      if (cs_.pending_direction) e.payload["direction"] = direction_name(*cs_.pending_direction);
      out.push_back(std::move(e));
      log_.push_back(fsm::transition_log_line(frame.t, prev, r.trigger, cs_.state, r.command));
      if (cs_.state == fsm::State::evidence_accumulation)
        acc_ = accumulate::make_accumulator(classes_, frame.t);
      else
        acc_.reset();
      if (prev == fsm::State::evidence_accumulation && (r.trigger == "a(0)" || r.trigger == "b(1)")) {
        EngineEvent a{"abort", frame.t, fi};
        a.payload["reason"] = r.trigger;
        out.push_back(std::move(a));
      }
    }
    if (r.command) {
      EngineEvent e{"command", frame.t, fi};
      e.payload["command"] = r.command->kind == fsm::CommandKind::go_home ? "GO_HOME" : "GO_TO_TARGET";
      if (r.command->kind == fsm::CommandKind::go_to_target) e.payload["direction"] = direction_name(r.command->direction);
      out.push_back(std::move(e));
    }

    last_latency_ms_ = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    for (auto& e : out) e.latency_ms = last_latency_ms_;
    return out;
  }

  double last_latency_ms() const { return last_latency_ms_; }
  const std::vector<std::string>& transition_log() const { return log_; }

 private:
  void reset_state() {
    observable_ = dsp::VelocityObservable(dsp::motion_bandpass(), bundle_.hmm.input_level);
    belief_ = intention::initial_belief(bundle_.hmm);
    intention_ = Activity::rest;
    cs_ = fsm::ControllerState{};
    acc_.reset();
    last_t_.reset();
    frame_index_ = -1;
    log_.clear();
  }

  store::ModelBundle bundle_;
  int classes_ = 0;
  dsp::VelocityObservable observable_;
  intention::IntentionBelief belief_;
  Activity intention_ = Activity::rest;
  fsm::ControllerState cs_;
  std::optional<accumulate::AccumulatorState> acc_;
  std::optional<double> last_t_;
  long frame_index_ = -1;
  double last_latency_ms_ = 0.0;
  std::vector<std::string> log_;
};

// ---------------------------------------------------------------- replay

struct ReplayMetrics {
  int trials = 0;
  int commands = 0;          // GO_TO_TARGET issued
  int correct_commands = 0;  // matching the trial's direction
  double direction_accuracy = 0;  // correct commands / trials
  double command_precision = 0;   // correct commands / issued commands
  double mean_stop_time_s = 0;    // command time minus true onset
  double mean_pct_trajectory = 0;
  double hmm_accuracy = 0;        // per-frame intention vs truth
  int transitions = 0;
  int erroneous_transitions = 0;
  double erroneous_rate = 0;
  int blip_aborts = 0;            // EA -> HOME outside any reach
  int manual_resets = 0;          // controller stuck past a reach at the next trial start
  double latency_mean_ms = 0, latency_p99_ms = 0, latency_max_ms = 0;
  bool has_truth = false;
};

struct ReplayResult {
  std::vector<EngineEvent> events;
  std::vector<std::string> log;
  std::vector<double> latencies_ms;
  ReplayMetrics metrics;
};

namespace detail {

// Activity phase of every frame from the ground truth: -1 rest, or the index
// of the trial whose forward (+1) / backward (-1) motion covers it.
struct Phases {
  std::vector<int> trial;  // trial index or -1
  std::vector<int> part;   // 0 rest, 1 forward, 2 backward
};

inline Phases phases(std::size_t n, const synth::GroundTruth& gt) {
  Phases p{std::vector<int>(n, -1), std::vector<int>(n, 0)};
  for (std::size_t k = 0; k < gt.trials.size(); ++k) {
    const auto& t = gt.trials[k];
    for (std::size_t i = t.forward_onset; i < std::min(n, t.forward_offset); ++i) p.trial[i] = static_cast<int>(k), p.part[i] = 1;
    for (std::size_t i = t.backward_onset; i < std::min(n, t.backward_offset); ++i) p.trial[i] = static_cast<int>(k), p.part[i] = 2;
  }
  return p;
}

}  // namespace detail

// Lag allowance (samples) when matching controller transitions against the
// true activity: the debounce plus the intention detector's delay.
inline long transition_allowance(const fsm::FsmConfig& cfg) { return cfg.debounce + 30; }

// Checks every transition against the truth:
//   HOME->EA        inside a forward reach (or a rest blip later aborted)
//   EA->SC, SC->OT  inside the forward reach that opened EA, up to the allowance after it
//   EA->OT (b(1))   same window as EA->SC
//   EA->HOME        a rest blip; erroneous when it cuts a true forward reach
//   OT->BM          from backward onset to the allowance after its end
//   BM->HOME        from the allowance before backward end up to the next
//                   forward onset (the arm is at rest the whole time)
inline void score_transitions(const std::vector<EngineEvent>& events, const synth::GroundTruth& gt, std::size_t n_frames, const fsm::FsmConfig& cfg, ReplayMetrics& m) {
  const long allow = transition_allowance(cfg);
  auto trial_at = [&](long f, int part, long before, long after) -> bool {
    for (const auto& t : gt.trials) {
      const long on = static_cast<long>(part == 1 ? t.forward_onset : t.backward_onset);
      const long off = static_cast<long>(part == 1 ? t.forward_offset : t.backward_offset);
      if (f >= on - before && f < off + after) return true;
    }
    return false;
  };
  (void)n_frames;
  for (const auto& e : events) {
    if (e.kind != "transition") continue;
    ++m.transitions;
    const std::string from = e.payload["from"], to = e.payload["to"], trig = e.payload["trigger"];
    const long f = e.frame;
    bool ok = true;
    if (from == "HOME") {
      ok = true;  // judged when EA is left
    } else if (from == "EVIDENCE_ACCUMULATION" && to == "HOME") {
      const bool in_reach = trial_at(f, 1, 0, 0);
      ok = !in_reach;
      if (ok) ++m.blip_aborts;
    } else if (from == "EVIDENCE_ACCUMULATION" || from == "SEND_COMMAND") {
      ok = trial_at(f, 1, 0, allow);
    } else if (from == "ON_TARGET") {
      ok = trial_at(f, 2, 0, allow);
    } else if (from == "BACK_MOVEMENT") {
      bool found = false;
      for (std::size_t k = 0; k < gt.trials.size(); ++k) {
        const long until = k + 1 < gt.trials.size() ? static_cast<long>(gt.trials[k + 1].forward_onset) : std::numeric_limits<long>::max();
        if (f >= static_cast<long>(gt.trials[k].backward_offset) - allow && f < until) found = true;
      }
      ok = found;
    }
    if (!ok) ++m.erroneous_transitions;
  }
  m.erroneous_rate = m.transitions ? static_cast<double>(m.erroneous_transitions) / m.transitions : 0.0;
}

inline ReplayMetrics compute_metrics(const std::vector<EngineEvent>& events, const std::vector<SampleFrame>& frames, const std::optional<synth::GroundTruth>& truth,
                                     const fsm::FsmConfig& cfg, const std::vector<double>& latencies) {
  ReplayMetrics m;
  if (!latencies.empty()) {
    std::vector<double> l = latencies;
    std::sort(l.begin(), l.end());
    double s = 0;
    for (double v : l) s += v;
    m.latency_mean_ms = s / static_cast<double>(l.size());
    m.latency_p99_ms = l[std::min(l.size() - 1, static_cast<std::size_t>(std::ceil(0.99 * static_cast<double>(l.size()))) - 1)];
    m.latency_max_ms = l.back();
  }
  for (const auto& e : events)
    if (e.kind == "command" && e.payload["command"] == "GO_TO_TARGET") ++m.commands;
  if (!truth) return m;
  m.has_truth = true;
  const auto& gt = *truth;
  m.trials = static_cast<int>(gt.trials.size());
  const auto ph = detail::phases(frames.size(), gt);

  // per-frame intention from the intention-change events
  Activity cur = Activity::rest;
  std::size_t next = 0, agree = 0;
  std::vector<const EngineEvent*> changes;
  for (const auto& e : events)
    if (e.kind == "intention") changes.push_back(&e);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    while (next < changes.size() && changes[next]->frame <= static_cast<long>(i)) cur = changes[next++]->payload["state"] == "MOTION" ? Activity::motion : Activity::rest;
    agree += (cur == Activity::motion) == (ph.part[i] != 0);
  }
  m.hmm_accuracy = frames.empty() ? 0.0 : static_cast<double>(agree) / static_cast<double>(frames.size());

  // commands: attributed to the trial whose forward onset precedes them most closely
  double stop_time = 0, pct = 0;
  for (const auto& e : events) {
    if (e.kind != "command" || e.payload["command"] != "GO_TO_TARGET") continue;
    const synth::TrialTruth* owner = nullptr;
    for (const auto& t : gt.trials)
      if (static_cast<long>(t.forward_onset) <= e.frame) owner = &t;
    if (!owner || e.frame >= static_cast<long>(owner->backward_onset)) continue;
    if (direction_index(e.payload["direction"].get<std::string>()) == owner->label) ++m.correct_commands;
    const double since = static_cast<double>(e.frame - static_cast<long>(owner->forward_onset) + 1);
    stop_time += since / kSampleRate;
    pct += 100.0 * since / static_cast<double>(owner->forward_offset - owner->forward_onset);
  }
  if (m.commands) {
    m.mean_stop_time_s = stop_time / m.commands;
    m.mean_pct_trajectory = pct / m.commands;
    m.command_precision = static_cast<double>(m.correct_commands) / m.commands;
  }
  m.direction_accuracy = m.trials ? static_cast<double>(m.correct_commands) / m.trials : 0.0;
  score_transitions(events, gt, frames.size(), cfg, m);
  return m;
}

// Feeds a recorded session through a fresh engine. speed > 0 paces frames in
// real time divided by speed; 0 runs as fast as possible. With ground truth
// and operator_resets, a controller still in ON_TARGET or BACK_MOVEMENT (or
// SEND_COMMAND) when a trial starts is reset, the way an operator restarts from the next trial
// after a transition error, so one mistake is not charged again on every
// later trial.
inline ReplayResult replay(const store::ModelBundle& bundle, const std::vector<SampleFrame>& frames, const std::optional<synth::GroundTruth>& truth = std::nullopt,
                           double speed = 0.0, bool operator_resets = true) {
  ReplayResult res;
  SessionEngine eng(bundle);
  res.events.push_back(eng.state_event(frames.empty() ? 0.0 : frames.front().t));
  res.latencies_ms.reserve(frames.size());
  std::vector<long> checks;
  if (truth && operator_resets)
    for (const auto& t : truth->trials) checks.push_back(static_cast<long>(t.forward_onset));
  std::size_t next_check = 0;
  int resets = 0;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto& f = frames[i];
    while (next_check < checks.size() && checks[next_check] <= static_cast<long>(i)) {
      const auto st = eng.controller().state;
      if (checks[next_check] == static_cast<long>(i) && st != fsm::State::home && st != fsm::State::evidence_accumulation) {
        auto ev = eng.reset_controller(f.t);
        res.events.insert(res.events.end(), ev.begin(), ev.end());
        ++resets;
      }
      ++next_check;
    }
    if (speed > 0.0) {
      const auto due = start + std::chrono::duration<double>((f.t - frames.front().t) / speed);
      std::this_thread::sleep_until(due);
    }
    auto ev = eng.ingest(f);
    res.latencies_ms.push_back(eng.last_latency_ms());
    res.events.insert(res.events.end(), std::make_move_iterator(ev.begin()), std::make_move_iterator(ev.end()));
  }
  res.log = eng.transition_log();
  res.metrics = compute_metrics(res.events, frames, truth, bundle.fsm, res.latencies_ms);
  res.metrics.manual_resets = resets;
  return res;
}

// Adds short gyro bursts in the middle of some rest periods, the kind of
// spurious activity the debounce is meant to swallow. Returns the burst
// centres (frame indices).
inline std::vector<std::size_t> inject_intention_noise(std::vector<SampleFrame>& frames, const synth::GroundTruth& gt, int every = 4, int width = 6, double peak = 0.6) {
  std::vector<std::size_t> centres;
  for (std::size_t k = 0; k + 1 < gt.trials.size(); k += static_cast<std::size_t>(every)) {
    const std::size_t a = gt.trials[k].backward_offset, b = gt.trials[k + 1].forward_onset;
    if (b <= a + static_cast<std::size_t>(4 * width)) continue;
    const std::size_t c = (a + b) / 2;
    for (int i = -width / 2; i < width / 2; ++i) {
      const double w = std::sin(3.14159265358979323846 * (i + width / 2 + 0.5) / width);
      auto& f = frames[static_cast<std::size_t>(static_cast<long>(c) + i)];
      f.gyro_arm[0] += peak * w;
      f.gyro_forearm[1] += peak * w;
    }
    centres.push_back(c);
  }
  return centres;
}

inline std::string format_event_log(const std::vector<EngineEvent>& events) {
  std::string out;
  for (const auto& e : events) out += e.to_json().dump() + "\n";
  return out;
}

}  // namespace reachpred::engine
