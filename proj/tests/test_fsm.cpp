#include "reachpred/fsm.hpp"

#include <gtest/gtest.h>

#include <deque>
#include <set>

using namespace reachpred;
using namespace reachpred::fsm;

namespace {

constexpr Activity R = Activity::rest;
constexpr Activity M = Activity::motion;

struct Driver {
  FsmConfig cfg;
  ControllerState cs;
  std::vector<RobotCommand> commands;
  std::vector<std::pair<State, std::string>> path;  // (new state, trigger)
  double t = 0.0;

  void step(Activity a, StopInput s = StopInput::none, std::optional<int> pred = std::nullopt) {
    if (cs.state != State::evidence_accumulation) s = StopInput::none;
    else if (s == StopInput::none) s = StopInput::proceed;
    const auto r = fsm_step(cs, a, s, pred, cfg, t);
    if (r.command) commands.push_back(*r.command);
    if (!r.trigger.empty()) path.emplace_back(r.next.state, r.trigger);
    cs = r.next;
    t += 0.01;
  }
  void run(Activity a, int n) {
    for (int i = 0; i < n; ++i) step(a);
  }
};

std::string key(const ControllerState& c) {
  return std::to_string(static_cast<int>(c.state)) + "/" + std::to_string(c.rest_run) + "/" + std::to_string(c.motion_run) + "/" + std::to_string(c.accumulation_samples) + "/" +
         std::to_string(c.arrived) + "/" + std::to_string(c.pending_direction.value_or(-1));
}

}  // namespace

TEST(Fsm, ExhaustiveReachableTransitionsAreLegal) {
  FsmConfig cfg{3, 5};
  std::set<std::string> seen;
  std::deque<ControllerState> todo{ControllerState{}};
  seen.insert(key(todo.front()));
  std::set<std::pair<State, State>> edges;
  while (!todo.empty()) {
    const ControllerState cs = todo.front();
    todo.pop_front();
    for (Activity a : {R, M})
      for (StopInput s : {StopInput::none, StopInput::proceed, StopInput::stop, StopInput::abort})
        for (std::optional<int> p : {std::optional<int>{}, std::optional<int>{1}, std::optional<int>{4}}) {
          const auto r = fsm_step(cs, a, s, p, cfg, 1.0);
          ASSERT_TRUE(is_legal_transition(cs.state, r.next.state)) << to_string(cs.state) << " -> " << to_string(r.next.state);
          edges.insert({cs.state, r.next.state});
          // commands only on the two command-bearing edges
          if (r.command) {
            if (r.command->kind == CommandKind::go_to_target) {
              EXPECT_EQ(cs.state, State::send_command);
              EXPECT_EQ(r.next.state, State::on_target);
              EXPECT_EQ(r.command->direction, cs.pending_direction.value_or(0));
            } else {
              EXPECT_EQ(cs.state, State::on_target);
              EXPECT_EQ(r.next.state, State::back_movement);
            }
          } else {
            EXPECT_FALSE(cs.state == State::send_command);
            EXPECT_FALSE(cs.state == State::on_target && r.next.state == State::back_movement);
          }
          EXPECT_EQ(r.trigger.empty(), r.next.state == cs.state);
          // counters stay bounded
          EXPECT_LE(r.next.rest_run, cfg.debounce);
          EXPECT_LE(r.next.motion_run, cfg.debounce);
          EXPECT_LE(r.next.accumulation_samples, cfg.timeout);
          if (seen.insert(key(r.next)).second) todo.push_back(r.next);
        }
  }
  // every legal edge is exercised
  const std::set<std::pair<State, State>> want{{State::home, State::evidence_accumulation}, {State::evidence_accumulation, State::send_command}, {State::evidence_accumulation, State::home},
                                               {State::evidence_accumulation, State::on_target}, {State::send_command, State::on_target}, {State::on_target, State::back_movement},
                                               {State::back_movement, State::home}};
  for (const auto& e : want) EXPECT_TRUE(edges.count(e)) << to_string(e.first) << " -> " << to_string(e.second);
  const State all[] = {State::home, State::evidence_accumulation, State::send_command, State::on_target, State::back_movement};
  for (State a : all)
    for (State b : all)
      if (a != b && !want.count({a, b})) EXPECT_FALSE(is_legal_transition(a, b));
}

TEST(Fsm, FullReachCycle) {
  Driver d;
  d.cfg = {5, 30};
  d.run(R, 10);
  EXPECT_EQ(d.cs.state, State::home);
  d.step(M);
  EXPECT_EQ(d.cs.state, State::evidence_accumulation);
  d.run(M, 8);
  d.step(M, StopInput::stop, 3);
  EXPECT_EQ(d.cs.state, State::send_command);
  d.step(M);
  EXPECT_EQ(d.cs.state, State::on_target);
  ASSERT_EQ(d.commands.size(), 1u);
  EXPECT_EQ(d.commands[0].kind, CommandKind::go_to_target);
  EXPECT_EQ(d.commands[0].direction, 3);
  // rest of the forward reach: motion before arrival does not count
  d.run(M, 20);
  EXPECT_EQ(d.cs.state, State::on_target);
  d.run(R, 5);
  EXPECT_TRUE(d.cs.arrived);
  d.run(M, 4);
  EXPECT_EQ(d.cs.state, State::on_target);
  d.step(M);
  EXPECT_EQ(d.cs.state, State::back_movement);
  ASSERT_EQ(d.commands.size(), 2u);
  EXPECT_EQ(d.commands[1].kind, CommandKind::go_home);
  d.run(M, 20);
  d.run(R, 4);
  EXPECT_EQ(d.cs.state, State::back_movement);
  d.step(R);
  EXPECT_EQ(d.cs.state, State::home);
  const std::vector<std::string> triggers{"motion", "t(r,s)", "sent", "a(1)", "a(0)"};
  ASSERT_EQ(d.path.size(), triggers.size());
  for (std::size_t i = 0; i < triggers.size(); ++i) EXPECT_EQ(d.path[i].second, triggers[i]);
}

TEST(Fsm, SingleMotionBlipReturnsHomeWithoutCommand) {
  Driver d;
  d.cfg = {5, 30};
  d.run(R, 3);
  d.step(M);
  EXPECT_EQ(d.cs.state, State::evidence_accumulation);
  d.run(R, 4);
  EXPECT_EQ(d.cs.state, State::evidence_accumulation);
  d.step(R);
  EXPECT_EQ(d.cs.state, State::home);
  EXPECT_TRUE(d.commands.empty());
  EXPECT_EQ(d.path.back().second, "a(0)");
}

TEST(Fsm, RestRunInterruptedByMotionRestarts) {
  Driver d;
  d.cfg = {5, 100};
  d.step(M);
  d.run(R, 4);
  d.step(M);
  d.run(R, 4);
  EXPECT_EQ(d.cs.state, State::evidence_accumulation);
  d.step(R);
  EXPECT_EQ(d.cs.state, State::home);
}

TEST(Fsm, TimeoutAndAbortSkipTheCommand) {
  for (bool abort : {false, true}) {
    Driver d;
    d.cfg = {5, 12};
    d.step(M);
    if (abort) {
      d.step(M, StopInput::abort);
    } else {
      d.run(M, 11);
      EXPECT_EQ(d.cs.state, State::evidence_accumulation);
      d.step(M);
    }
    EXPECT_EQ(d.cs.state, State::on_target);
    EXPECT_EQ(d.path.back().second, "b(1)");
    EXPECT_TRUE(d.commands.empty());
  }
}

TEST(Fsm, StopWithoutPredictionIsIgnored) {
  const auto r = fsm_step(ControllerState{State::evidence_accumulation}, M, StopInput::stop, std::nullopt, FsmConfig{5, 30});
  EXPECT_EQ(r.next.state, State::evidence_accumulation);
}

TEST(Fsm, StopWinsOverSimultaneousRestRun) {
  ControllerState cs{State::evidence_accumulation};
  cs.rest_run = 4;
  const auto r = fsm_step(cs, R, StopInput::stop, 2, FsmConfig{5, 30});
  EXPECT_EQ(r.next.state, State::send_command);
  EXPECT_EQ(r.next.pending_direction, 2);
}

TEST(Fsm, ResetReturnsHome) {
  ControllerState cs{State::on_target, 3, 2, 0, true, 4};
  EXPECT_EQ(reset(cs), ControllerState{});
}

TEST(Fsm, NamesRoundTrip) {
  for (State s : {State::home, State::evidence_accumulation, State::send_command, State::on_target, State::back_movement}) EXPECT_EQ(parse_state(to_string(s)), s);
  EXPECT_THROW(parse_state("IDLE"), Error);
}

TEST(Fsm, LogLineFormat) {
  EXPECT_EQ(transition_log_line(1.234, State::send_command, "sent", State::on_target, RobotCommand{CommandKind::go_to_target, 1, 1.23}),
            "1.23,SEND_COMMAND,sent,ON_TARGET,GO_TO_TARGET(" + direction_name(1) + ")");
  EXPECT_EQ(transition_log_line(0.0, State::home, "motion", State::evidence_accumulation, std::nullopt), "0.00,HOME,motion,EVIDENCE_ACCUMULATION,");
}

TEST(Fsm, DerivedConfigFromSegments) {
  std::vector<dsp::SegmentInterval> segs{{0, 200, Activity::rest}, {200, 300, Activity::motion}, {300, 500, Activity::rest}, {500, 620, Activity::motion}, {620, 800, Activity::rest}};
  const auto c = derive_config(segs);
  EXPECT_EQ(c.debounce, static_cast<int>(std::lround(0.25 * (200 + 200 + 180) / 3.0)));
  EXPECT_EQ(c.timeout, 220);
  std::vector<dsp::SegmentInterval> rest_only{{0, 100, Activity::rest}};
  EXPECT_THROW(derive_config(rest_only), Error);
  EXPECT_THROW((FsmConfig{0, 5}.validate()), Error);
}
