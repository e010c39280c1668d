#pragma once

#include "reachpred/accumulate.hpp"
#include "reachpred/core.hpp"
#include "reachpred/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <string_view>

namespace reachpred::fsm {

enum class State { home, evidence_accumulation, send_command, on_target, back_movement };

inline std::string_view to_string(State s) {
  switch (s) {
    case State::home: return "HOME";
    case State::evidence_accumulation: return "EVIDENCE_ACCUMULATION";
    case State::send_command: return "SEND_COMMAND";
    case State::on_target: return "ON_TARGET";
    case State::back_movement: return "BACK_MOVEMENT";
  }
  return "?";
}

inline State parse_state(std::string_view s) {
  for (State st : {State::home, State::evidence_accumulation, State::send_command, State::on_target, State::back_movement})
    if (to_string(st) == s) return st;
  throw Error("unknown FSM state '" + std::string(s) + "'");
}

struct FsmConfig {
  int debounce = 50;   // X: consecutive samples gating a(0) / a(1)
  int timeout = 240;   // Y: samples in EA before b(1)
  void validate() const {
    if (debounce < 1 || timeout < 1) throw Error("FsmConfig: X and Y must be >= 1");
  }
  bool operator==(const FsmConfig&) const = default;
};

struct ControllerState {
  State state = State::home;
  int rest_run = 0;
  int motion_run = 0;
  int accumulation_samples = 0;
  bool arrived = false;  // ON_TARGET: X consecutive REST seen since entry
  std::optional<int> pending_direction;
  bool operator==(const ControllerState&) const = default;
};

enum class CommandKind { go_to_target, go_home };

struct RobotCommand {
  CommandKind kind = CommandKind::go_home;
  int direction = 0;  // 1..L for go_to_target
  double issued_at = 0.0;
  bool operator==(const RobotCommand&) const = default;
};

inline std::string describe(const RobotCommand& c) {
  return c.kind == CommandKind::go_home ? "GO_HOME" : "GO_TO_TARGET(" + direction_name(c.direction) + ")";
}

// Input from the direction thread. `none` outside EVIDENCE_ACCUMULATION.
enum class StopInput { none, proceed, stop, abort };

struct StepResult {
  ControllerState next;
  std::optional<RobotCommand> command;
  std::string trigger;  // empty when the state did not change
};

// The five-state controller. Transitions:
//   HOME -> EA            first MOTION sample
//   EA   -> SEND_COMMAND  stopping rule fired
//   EA   -> HOME          X consecutive REST          a(0)
//   EA   -> ON_TARGET     Y samples without a stop    b(1), no command
//   SEND_COMMAND -> ON_TARGET  next step, emits GO_TO_TARGET
//   ON_TARGET -> BACK_MOVEMENT X consecutive MOTION   a(1), emits GO_HOME
//                              (counted only once the arm has settled for X
//                              REST samples; a stop usually lands mid-reach)
//   BACK_MOVEMENT -> HOME      X consecutive REST     a(0)
// Counters reset on every transition and saturate at X, which keeps the
// reachable state space finite.
inline StepResult fsm_step(const ControllerState& cs, Activity intention, StopInput stop, std::optional<int> predicted, const FsmConfig& cfg, double now = 0.0) {
  StepResult r;
  ControllerState n = cs;
  auto go = [&](State s, std::string trigger) {
    n = ControllerState{};
    n.state = s;
    r.trigger = std::move(trigger);
  };
  const bool motion = intention == Activity::motion;
  auto bump = [&](int c) { return std::min(c + 1, cfg.debounce); };
  switch (cs.state) {
    case State::home:
      if (motion) go(State::evidence_accumulation, "motion");
      break;
    case State::evidence_accumulation: {
      n.accumulation_samples += 1;
      n.rest_run = motion ? 0 : bump(cs.rest_run);
      n.motion_run = motion ? bump(cs.motion_run) : 0;
      if (stop == StopInput::stop && predicted) {
        go(State::send_command, "t(r,s)");
        n.pending_direction = *predicted;
      } else if (n.rest_run >= cfg.debounce) {
        go(State::home, "a(0)");
      } else if (stop == StopInput::abort || n.accumulation_samples >= cfg.timeout) {
        go(State::on_target, "b(1)");
      }
      break;
    }
    case State::send_command:
      r.command = RobotCommand{CommandKind::go_to_target, cs.pending_direction.value_or(0), now};
      go(State::on_target, "sent");
      break;
    case State::on_target:
      n.rest_run = motion ? 0 : bump(cs.rest_run);
      if (n.rest_run >= cfg.debounce) n.arrived = true;
      n.motion_run = motion && n.arrived ? bump(cs.motion_run) : 0;
      if (n.motion_run >= cfg.debounce) {
        go(State::back_movement, "a(1)");
        r.command = RobotCommand{CommandKind::go_home, 0, now};
      }
      break;
    case State::back_movement:
      n.rest_run = motion ? 0 : bump(cs.rest_run);
      n.motion_run = motion ? bump(cs.motion_run) : 0;
      if (n.rest_run >= cfg.debounce) go(State::home, "a(0)");
      break;
  }
  r.next = n;
  return r;
}

inline ControllerState reset(const ControllerState&) { return ControllerState{}; }

inline bool is_legal_transition(State from, State to) {
  if (from == to) return true;
  switch (from) {
    case State::home: return to == State::evidence_accumulation;
    case State::evidence_accumulation: return to == State::send_command || to == State::home || to == State::on_target;
    case State::send_command: return to == State::on_target;
    case State::on_target: return to == State::back_movement;
    case State::back_movement: return to == State::home;
  }
  return false;
}

// X from the mean REST segment length, Y from the mean MOTION segment length.
inline FsmConfig derive_config(std::span<const dsp::SegmentInterval> segments, double fraction_x = 0.25, double fraction_y = 2.0) {
  double rest = 0, motion = 0;
  int nr = 0, nm = 0;
  for (const auto& s : segments) {
    if (s.state == Activity::rest) {
      rest += static_cast<double>(s.length());
      ++nr;
    } else {
      motion += static_cast<double>(s.length());
      ++nm;
    }
  }
  if (nr == 0 || nm == 0) throw Error("derive_config: need at least one REST and one MOTION segment");
  FsmConfig cfg;
  cfg.debounce = std::max(1, static_cast<int>(std::lround(fraction_x * rest / nr)));
  cfg.timeout = std::max(1, static_cast<int>(std::lround(fraction_y * motion / nm)));
  return cfg;
}

inline FsmConfig derive_config_from_means(double mean_rest, double mean_motion, double fraction_x = 0.25, double fraction_y = 2.0) {
  FsmConfig cfg;
  cfg.debounce = std::max(1, static_cast<int>(std::lround(fraction_x * mean_rest)));
  cfg.timeout = std::max(1, static_cast<int>(std::lround(fraction_y * mean_motion)));
  return cfg;
}

// "timestamp,old_state,trigger,new_state,command"
inline std::string transition_log_line(double t, State from, std::string_view trigger, State to, const std::optional<RobotCommand>& cmd) {
  char ts[32];
  std::snprintf(ts, sizeof ts, "%.2f", t);
  return std::string(ts) + "," + std::string(to_string(from)) + "," + std::string(trigger) + "," + std::string(to_string(to)) + "," + (cmd ? describe(*cmd) : "");
}

}  // namespace reachpred::fsm
