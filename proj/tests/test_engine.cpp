#include "reachpred/engine.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

using namespace reachpred;
using engine::EngineEvent;

namespace {

std::vector<EngineEvent> of_kind(const std::vector<EngineEvent>& evs, const std::string& kind) {
  std::vector<EngineEvent> out;
  for (const auto& e : evs)
    if (e.kind == kind) out.push_back(e);
  return out;
}

// Frames of one trial: from the onset back to the end of the following rest.
std::vector<SampleFrame> one_trial(const synth::Session& s, std::size_t k, std::size_t lead = 300) {
  const auto& t = s.truth.trials[k];
  const std::size_t a = t.forward_onset > lead ? t.forward_onset - lead : 0;
  const std::size_t b = k + 1 < s.truth.trials.size() ? s.truth.trials[k + 1].forward_onset - 50 : s.frames.size();
  return {s.frames.begin() + static_cast<long>(a), s.frames.begin() + static_cast<long>(b)};
}

}  // namespace

TEST(Engine, SingleNorthReachRunsTheWholeCycle) {
  const auto& tr = support::trained();
  std::size_t k = 0;
  while (tr.session.truth.trials[k].label != 1) ++k;
  const auto frames = one_trial(tr.session, k);
  const auto res = engine::replay(tr.bundle, frames);
  const auto cmds = of_kind(res.events, "command");
  ASSERT_EQ(cmds.size(), 2u);
  EXPECT_EQ(cmds[0].payload["command"], "GO_TO_TARGET");
  EXPECT_EQ(cmds[0].payload["direction"], "N");
  EXPECT_EQ(cmds[1].payload["command"], "GO_HOME");
  std::vector<std::string> path;
  for (const auto& e : of_kind(res.events, "transition")) path.push_back(e.payload["to"]);
  const std::vector<std::string> want{"EVIDENCE_ACCUMULATION", "SEND_COMMAND", "ON_TARGET", "BACK_MOVEMENT", "HOME"};
  EXPECT_EQ(path, want);
  ASSERT_EQ(res.log.size(), 5u);
  EXPECT_NE(res.log[2].find("GO_TO_TARGET(N)"), std::string::npos);
  EXPECT_NE(res.log[3].find("GO_HOME"), std::string::npos);
}

TEST(Engine, RestOnlyStreamEmitsNothing) {
  const auto& tr = support::trained();
  const std::vector<SampleFrame> rest(tr.session.frames.begin(), tr.session.frames.begin() + static_cast<long>(tr.session.truth.trials[0].forward_onset) - 20);
  const auto res = engine::replay(tr.bundle, rest);
  ASSERT_EQ(res.events.size(), 1u);  // the initial state snapshot
  EXPECT_EQ(res.events[0].kind, "state");
  EXPECT_TRUE(res.log.empty());
}

TEST(Engine, OutOfOrderFrameRejectedAndStateKept) {
  const auto& tr = support::trained();
  engine::SessionEngine eng(tr.bundle);
  eng.ingest(tr.session.frames[0]);
  eng.ingest(tr.session.frames[1]);
  const auto before = eng.controller();
  for (const auto& f : {tr.session.frames[1], tr.session.frames[0]}) {
    const auto ev = eng.ingest(f);
    ASSERT_EQ(ev.size(), 1u);
    EXPECT_EQ(ev[0].kind, "error");
    EXPECT_NE(ev[0].payload["message"].get<std::string>().find("out-of-order"), std::string::npos);
  }
  EXPECT_EQ(eng.frames_seen(), 2);
  EXPECT_EQ(eng.controller(), before);
  EXPECT_TRUE(eng.ingest(tr.session.frames[2]).empty() || eng.frames_seen() == 3);
}

TEST(Engine, ResetMidReachReturnsHomeAndRestartsClock) {
  const auto& tr = support::trained();
  const auto& t = tr.session.truth.trials[0];
  engine::SessionEngine eng(tr.bundle);
  for (std::size_t i = 0; i < t.forward_onset + 40; ++i) eng.ingest(tr.session.frames[i]);
  ASSERT_EQ(eng.controller().state, fsm::State::evidence_accumulation);
  ASSERT_TRUE(eng.accumulator().has_value());
  const auto ev = eng.reset(tr.session.frames[t.forward_onset + 40].t);
  ASSERT_EQ(ev.size(), 2u);
  EXPECT_EQ(ev[0].kind, "reset");
  EXPECT_EQ(ev[0].payload["scope"], "session");
  EXPECT_EQ(ev[1].payload["state"], "HOME");
  EXPECT_EQ(eng.controller(), fsm::ControllerState{});
  EXPECT_FALSE(eng.accumulator().has_value());
  EXPECT_EQ(eng.frames_seen(), 0);
  EXPECT_TRUE(eng.transition_log().empty());
  // timestamps may start over after a reset
  EXPECT_TRUE(of_kind(eng.ingest(tr.session.frames[0]), "error").empty());
}

TEST(Engine, ControllerResetKeepsClockAndBelief) {
  const auto& tr = support::trained();
  engine::SessionEngine eng(tr.bundle);
  for (std::size_t i = 0; i < tr.session.truth.trials[0].forward_onset + 40; ++i) eng.ingest(tr.session.frames[i]);
  const auto seen = eng.frames_seen();
  const auto ev = eng.reset_controller(1.0);
  EXPECT_EQ(ev[0].payload["scope"], "controller");
  EXPECT_EQ(eng.controller().state, fsm::State::home);
  EXPECT_EQ(eng.frames_seen(), seen);
}

TEST(Engine, EventsInCausalOrderPerFrame) {
  const auto& tr = support::trained();
  const auto res = engine::replay(tr.bundle, tr.session.frames, tr.session.truth);
  const std::map<std::string, int> rank{{"intention", 0}, {"probability", 1}, {"transition", 2}, {"abort", 3}, {"command", 4}};
  long frame = -2;
  int last = -1;
  for (const auto& e : res.events) {
    if (!rank.count(e.kind)) continue;
    EXPECT_GE(e.frame, frame);
    if (e.frame != frame) last = -1;
    EXPECT_GE(rank.at(e.kind), last) << "frame " << e.frame;
    frame = e.frame;
    last = rank.at(e.kind);
  }
  // a GO_TO_TARGET always follows an EA -> SEND_COMMAND transition on the previous frame
  for (std::size_t i = 0; i < res.events.size(); ++i) {
    const auto& e = res.events[i];
    if (e.kind != "command" || e.payload["command"] != "GO_TO_TARGET") continue;
    bool found = false;
    for (std::size_t j = i; j-- > 0;)
      if (res.events[j].kind == "transition") {
        found = res.events[j].payload["to"] == "ON_TARGET" && res.events[j].frame == e.frame;
        break;
      }
    EXPECT_TRUE(found);
  }
}

TEST(Engine, PrefixReplayMatchesFullReplay) {
  const auto& tr = support::trained();
  const auto full = engine::replay(tr.bundle, tr.session.frames);
  for (std::size_t cut : {std::size_t{700}, std::size_t{3000}, std::size_t{9001}}) {
    const std::vector<SampleFrame> head(tr.session.frames.begin(), tr.session.frames.begin() + static_cast<long>(cut));
    const auto part = engine::replay(tr.bundle, head);
    std::vector<EngineEvent> want;
    for (const auto& e : full.events)
      if (e.frame < static_cast<long>(cut)) want.push_back(e);
    ASSERT_EQ(part.events.size(), want.size()) << "cut " << cut;
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_TRUE(part.events[i].same_payload(want[i]));
  }
}

TEST(Engine, ReplayIsDeterministic) {
  const auto& tr = support::trained();
  const auto a = engine::replay(tr.bundle, tr.session.frames, tr.session.truth);
  const auto b = engine::replay(tr.bundle, tr.session.frames, tr.session.truth);
  EXPECT_EQ(engine::format_event_log(a.events), engine::format_event_log(b.events));
  EXPECT_EQ(a.log, b.log);
}

TEST(Engine, ReferenceReplayMeetsTransitionTargets) {
  const auto& tr = support::trained();
  const auto m = engine::replay(tr.bundle, tr.session.frames, tr.session.truth).metrics;
  EXPECT_TRUE(m.has_truth);
  EXPECT_EQ(m.trials, 80);
  EXPECT_LE(m.erroneous_rate, 0.02);
  EXPECT_GE(m.command_precision, 0.98);
  EXPECT_GT(m.hmm_accuracy, 0.9);
  EXPECT_LE(m.latency_p99_ms, 10.0);
}

TEST(Engine, ZeroNoiseReplayIsPerfect) {
  const auto& tr = support::trained(0.0);
  const auto m = engine::replay(tr.bundle, tr.session.frames, tr.session.truth).metrics;
  EXPECT_EQ(m.commands, 80);
  EXPECT_DOUBLE_EQ(m.direction_accuracy, 1.0);
  EXPECT_EQ(m.erroneous_transitions, 0);
  EXPECT_EQ(m.manual_resets, 0);
}

TEST(Engine, InjectedBlipsAbortWithoutCommands) {
  const auto& tr = support::trained();
  auto frames = tr.session.frames;
  const auto centres = engine::inject_intention_noise(frames, tr.session.truth);
  ASSERT_FALSE(centres.empty());
  const auto res = engine::replay(tr.bundle, frames, tr.session.truth);
  EXPECT_GE(res.metrics.blip_aborts, 1);
  // no robot command inside any burst window
  for (const auto& e : of_kind(res.events, "command"))
    for (auto c : centres) EXPECT_FALSE(std::abs(e.frame - static_cast<long>(c)) < 60) << "command near burst at " << c;
}

TEST(Engine, EventWireForm) {
  EngineEvent e{"transition", 1.25, 125};
  e.payload["from"] = "HOME";
  e.latency_ms = 0.5;
  const auto j = e.to_json();
  EXPECT_EQ(j["kind"], "transition");
  EXPECT_EQ(j["frame"], 125);
  EXPECT_EQ(j["from"], "HOME");
  EXPECT_FALSE(j.contains("latency_ms"));
  EXPECT_EQ(e.to_json(true)["latency_ms"], 0.5);
}
