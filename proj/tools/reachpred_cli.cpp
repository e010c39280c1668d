#include "reachpred/reachpred.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <csignal>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <sstream>

using namespace reachpred;
namespace fs = std::filesystem;

namespace {

void need_input(const std::string& p) {
  if (!fs::exists(p)) throw Error("input not found: " + p);
}

void need_output(const std::string& p) {
  const fs::path parent = fs::path(p).parent_path();
  if (!parent.empty() && !fs::is_directory(parent)) throw Error("output directory does not exist: " + parent.string());
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  for (auto part : store::split(s)) out.push_back(store::parse_double(part, 0, "grid"));
  if (out.empty()) throw Error("empty grid");
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point t0) { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); }

// ---------------------------------------------------------------- synth

struct SynthArgs {
  std::string out;
  int directions = 4;
  int reps = 20;
  unsigned long seed = 42;
  double noise_scale = -1;
  bool zero_noise = false;
  bool cursor = false;
  bool inject = false;
};

int cmd_synth(const SynthArgs& a) {
  need_output(a.out);
  auto cfg = synth::reference_config(a.directions);
  cfg.reps = a.reps;
  cfg.seed = a.seed;
  if (a.noise_scale >= 0) cfg.noise_scale = a.noise_scale;
  if (a.zero_noise) cfg.noise_scale = 0.0;
  synth::Session s;
  if (a.cursor) {
    cursor::CursorSessionConfig cc;
    cc.base = cfg;
    if (a.noise_scale < 0 && !a.zero_noise) cc.base.noise_scale = 1.0;
    s = cursor::gen_cursor_session(cc).session;
  } else {
    s = synth::gen_session(cfg);
  }
  if (a.inject) {
    const auto c = engine::inject_intention_noise(s.frames, s.truth);
    std::printf("injected %zu gyro bursts into rest periods\n", c.size());
  }
  store::save_dataset(a.out, s.frames, s.truth);
  std::printf("wrote %s (%zu frames, %zu trials) and %s\n", a.out.c_str(), s.frames.size(), s.truth.trials.size(), store::truth_sidecar(a.out).string().c_str());
  return 0;
}

// ---------------------------------------------------------------- segment

int cmd_segment(const std::string& in, const std::string& out) {
  need_input(in);
  need_output(out);
  const auto d = store::load_dataset(in);
  const auto segs = dsp::segment_session(d.frames);
  store::write_atomic(out, store::format_segments(segs));
  int motion = 0;
  for (const auto& s : segs) motion += s.state == Activity::motion;
  std::printf("%zu intervals, %d motion\n", segs.size(), motion);
  if (d.truth) {
    std::vector<double> onset;
    for (const auto& s : segs)
      if (s.state == Activity::motion)
        for (const auto& t : d.truth->trials)
          for (std::size_t on : {t.forward_onset, t.backward_onset})
            if (std::abs(static_cast<double>(s.start) - static_cast<double>(on)) < 50) onset.push_back(static_cast<double>(s.start) - static_cast<double>(on));
    if (!onset.empty()) {
      double mean = 0, mx = 0;
      for (double e : onset) mean += std::abs(e), mx = std::max(mx, std::abs(e));
      std::printf("onset error vs truth: %zu matched of %zu, mean |err| %.1f ms, max %.0f ms\n", onset.size(), 2 * d.truth->trials.size(), 10.0 * mean / static_cast<double>(onset.size()), 10.0 * mx);
    }
  }
  return 0;
}

// ---------------------------------------------------------------- train / tune

struct TrainArgs {
  std::string in, out, frontier, variant = "fda", sum_mode = "normalized", ratio_grid, sum_grid, created;
  unsigned long seed = 42;
  int folds = 5;
  double target = 0.95;
  bool use_truth = false;
};

pipeline::TrainOptions train_options(const TrainArgs& a) {
  pipeline::TrainOptions o;
  o.variant = reduce::parse_variant(a.variant);
  o.seed = a.seed;
  o.folds = a.folds;
  o.target_accuracy = a.target;
  o.use_truth = a.use_truth;
  if (!a.ratio_grid.empty()) o.ratio_grid = parse_list(a.ratio_grid);
  if (!a.sum_grid.empty()) o.sum_grid = parse_list(a.sum_grid);
  if (a.sum_mode == "raw") o.sum_mode = accumulate::SumMode::raw_density;
  else if (a.sum_mode != "normalized") throw Error("--sum-mode must be normalized or raw");
  return o;
}

void print_selection(const accumulate::GridResult& g) {
  std::printf("selected th_r=%g th_s=%g: held-out accuracy %.3f +- %.3f, stop %.3f s, %.1f%% of trajectory%s\n", g.config.th_r, g.config.th_s, g.selected.mean_acc, g.selected.std_acc,
              g.selected.mean_time_s, g.selected.mean_pct_trajectory, g.target_met ? "" : " (target not met)");
}

int cmd_train(const TrainArgs& a) {
  need_input(a.in);
  need_output(a.out);
  if (!a.frontier.empty()) need_output(a.frontier);
  const auto opt = train_options(a);
  const auto t0 = std::chrono::steady_clock::now();
  const auto d = store::load_dataset(a.in);
  auto r = pipeline::train(d, opt);
  auto& b = r.bundle;
  b.provenance.dataset_path = a.in;
  b.provenance.created = a.created.empty() ? utc_now() : a.created;
  if (!a.frontier.empty()) {
    store::write_atomic(a.frontier, store::format_frontier(r.grid.frontier));
    b.provenance.frontier_path = a.frontier;
  }
  store::save_bundle(b, a.out);
  std::printf("%s: %zu reaches, %d classes, C = %d features\n", std::string(reduce::to_string(opt.variant)).c_str(), r.reaches.size(), b.direction.classes, b.reducer.dim());
  std::printf("HMM: REST mean %.3f var %.4f, MOTION mean %.3f var %.4f\n", b.hmm.mean[0], b.hmm.variance[0], b.hmm.mean[1], b.hmm.variance[1]);
  print_selection(r.grid);
  std::printf("controller: X = %d, Y = %d samples; bundle %s (%.1f s)\n", b.fsm.debounce, b.fsm.timeout, a.out.c_str(), seconds_since(t0));
  for (const auto& w : b.provenance.warnings) std::printf("warning: %s\n", w.c_str());
  return 0;
}

int cmd_tune(TrainArgs a, const std::string& bundle_in) {
  need_input(a.in);
  need_input(bundle_in);
  need_output(a.out);
  if (!a.frontier.empty()) need_output(a.frontier);
  auto b = store::load_bundle(bundle_in);
  const auto d = store::load_dataset(a.in);
  if (!b.provenance.dataset_hash.empty() && b.provenance.dataset_hash != d.hash)
    std::printf("warning: dataset hash %s differs from the one the bundle was trained on (%s)\n", d.hash.c_str(), b.provenance.dataset_hash.c_str());
  a.variant = std::string(reduce::to_string(b.reducer.variant));
  if (b.provenance.seeds.count("train")) a.seed = static_cast<unsigned long>(b.provenance.seeds["train"]);
  const auto opt = train_options(a);
  const auto reaches = pipeline::session_reaches(d.frames, d.truth, a.use_truth);
  const auto t = pipeline::tune_thresholds(d.frames, reaches, opt);
  pipeline::apply_tuning(b, t, reaches);
  for (const auto& w : t.warnings) b.provenance.warnings.push_back(w);
  if (!a.frontier.empty()) {
    store::write_atomic(a.frontier, store::format_frontier(t.grid.frontier));
    b.provenance.frontier_path = a.frontier;
  }
  store::save_bundle(b, a.out);
  print_selection(t.grid);
  std::printf("frontier: %zu cells%s\n", t.grid.frontier.size(), a.frontier.empty() ? "" : (" written to " + a.frontier).c_str());
  return 0;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::vector<std::string> datasets;
  std::vector<std::string> variants{"pca", "pcanmf", "fda", "fda_imu"};
  std::string out;
  unsigned long seed = 42;
  int folds = 5;
  double noise_scale = -1;
  bool zero_noise = false;
  bool use_truth = false;
};

int cmd_eval(const EvalArgs& a) {
  for (const auto& p : a.datasets) need_input(p);
  if (!a.out.empty()) need_output(a.out);
  struct Named {
    std::string name;
    std::vector<SampleFrame> frames;
    std::optional<synth::GroundTruth> truth;
  };
  std::vector<Named> sets;
  if (a.datasets.empty()) {
    for (int l : {4, 8}) {
      auto cfg = synth::reference_config(l);
      if (a.noise_scale >= 0) cfg.noise_scale = a.noise_scale;
      if (a.zero_noise) cfg.noise_scale = 0.0;
      auto s = synth::gen_session(cfg);
      sets.push_back({"reference L=" + std::to_string(l), std::move(s.frames), std::move(s.truth)});
    }
  } else {
    for (const auto& p : a.datasets) {
      auto d = store::load_dataset(p);
      sets.push_back({p, std::move(d.frames), std::move(d.truth)});
    }
  }
  const auto pct = pipeline::default_percents();
  std::string csv = "dataset,classes,variant,percent,mean_acc,std_acc\n";
  for (const auto& s : sets) {
    const auto reaches = pipeline::session_reaches(s.frames, s.truth, a.use_truth);
    const int classes = pipeline::class_count(reaches);
    std::printf("\n%s: %zu reaches, %d classes\n%-8s", s.name.c_str(), reaches.size(), classes, "variant");
    for (double p : pct) std::printf(" %5.0f%%", p);
    std::printf("  %8s %8s\n", "10-50%", "time");
    for (const auto& vn : a.variants) {
      const auto v = reduce::parse_variant(vn);
      const auto t0 = std::chrono::steady_clock::now();
      std::vector<std::string> warnings;
      const auto ev = pipeline::cross_validate(s.frames, reaches, v, a.folds, a.seed, {}, &warnings);
      const auto curve = pipeline::accuracy_curve(ev, pct);
      std::printf("%-8s", std::string(reduce::to_string(v)).c_str());
      for (const auto& c : curve) {
        std::printf(" %6.3f", c.mean_acc);
        csv += s.name + "," + std::to_string(classes) + "," + std::string(reduce::to_string(v)) + "," + store::format_double(c.percent) + "," + store::format_double(c.mean_acc) + "," +
               store::format_double(c.std_acc) + "\n";
      }
      std::printf("  %8.3f %7.1fs\n", pipeline::mean_accuracy(curve, 10, 50), seconds_since(t0));
      for (const auto& w : warnings) std::printf("  warning: %s\n", w.c_str());
    }
  }
  if (!a.out.empty()) {
    store::write_atomic(a.out, csv);
    std::printf("\ntable written to %s\n", a.out.c_str());
  }
  return 0;
}

// ---------------------------------------------------------------- replay

struct ReplayArgs {
  std::string in, bundle, events;
  double speed = 0;
  bool inject = false, no_resets = false, json_out = false;
};

int cmd_replay(const ReplayArgs& a) {
  need_input(a.in);
  need_input(a.bundle);
  if (!a.events.empty()) need_output(a.events);
  const auto b = store::load_bundle(a.bundle);
  auto d = store::load_dataset(a.in);
  if (a.inject) {
    if (!d.truth) throw Error("--inject-noise needs the ground-truth sidecar");
    engine::inject_intention_noise(d.frames, *d.truth);
  }
  const auto r = engine::replay(b, d.frames, d.truth, a.speed, !a.no_resets);
  if (!a.events.empty()) store::write_atomic(a.events, engine::format_event_log(r.events));
  const auto& m = r.metrics;
  nlohmann::ordered_json j;
  j["frames"] = d.frames.size();
  j["events"] = r.events.size();
  j["commands"] = m.commands;
  j["latency_mean_ms"] = m.latency_mean_ms;
  j["latency_p99_ms"] = m.latency_p99_ms;
  j["latency_max_ms"] = m.latency_max_ms;
  if (m.has_truth) {
    j["trials"] = m.trials;
    j["correct_commands"] = m.correct_commands;
    j["direction_accuracy"] = m.direction_accuracy;
    j["command_precision"] = m.command_precision;
    j["mean_stop_time_s"] = m.mean_stop_time_s;
    j["mean_pct_trajectory"] = m.mean_pct_trajectory;
    j["hmm_accuracy"] = m.hmm_accuracy;
    j["transitions"] = m.transitions;
    j["erroneous_transitions"] = m.erroneous_transitions;
    j["erroneous_rate"] = m.erroneous_rate;
    j["blip_aborts"] = m.blip_aborts;
    j["operator_resets"] = m.manual_resets;
  } else {
    j["note"] = "no ground truth: timing metrics only";
  }
  if (a.json_out) {
    std::cout << j.dump(2) << "\n";
  } else {
    for (auto it = j.begin(); it != j.end(); ++it) std::cout << it.key() << " = " << it.value().dump() << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------- serve

service::Server* g_server = nullptr;

int cmd_serve(const std::vector<std::string>& bundles, const std::string& host, int port, int heartbeat) {
  if (bundles.empty()) throw Error("serve needs at least one --bundle");
  service::BundleRegistry reg;
  for (const auto& spec : bundles) {
    const auto eq = spec.find('=');
    const std::string name = eq == std::string::npos ? fs::path(spec).stem().string() : spec.substr(0, eq);
    const std::string path = eq == std::string::npos ? spec : spec.substr(eq + 1);
    need_input(path);
    reg.add(name, store::load_bundle(path));
  }
  service::Options opt;
  opt.heartbeat_frames = heartbeat;
  service::Server server(std::move(reg), opt);
  const int bound = server.bind(host, port);
  std::printf("listening on http://%s:%d (protocol %d)\n", host.c_str(), bound, service::kProtocolVersion);
  std::fflush(stdout);
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (g_server) g_server->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_server) g_server->stop();
  });
  server.run();
  g_server = nullptr;
  return 0;
}

// ---------------------------------------------------------------- calibrate

int cmd_calibrate(int directions, double target, int steps) {
  auto cfg = synth::reference_config(directions);
  std::printf("noise_scale  accuracy@30%%\n");
  for (const auto& s : pipeline::calibrate_noise(cfg, target, 0.25, 8.0, steps)) std::printf("%11.4f  %.3f\n", s.noise_scale, s.accuracy);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reaching-direction prediction: generate, segment, train, tune, evaluate, replay and serve."};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic session and its ground-truth sidecar");
  synth->add_option("-o,--out", sa.out, "Session CSV to write")->required();
  synth->add_option("-L,--directions", sa.directions, "4 or 8")->check(CLI::IsMember({4, 8}));
  synth->add_option("--reps", sa.reps, "Repetitions per direction")->check(CLI::PositiveNumber);
  synth->add_option("--seed", sa.seed);
  synth->add_option("--noise-scale", sa.noise_scale, "Override the calibrated noise multiplier");
  synth->add_flag("--zero-noise", sa.zero_noise, "Noise-free session");
  synth->add_flag("--cursor", sa.cursor, "Frames from scripted pointer reaches through the cursor adapter");
  synth->add_flag("--inject-noise", sa.inject, "Add short gyro bursts in some rest periods");

  std::string seg_in, seg_out;
  auto* seg = app.add_subcommand("segment", "Offline motion/rest segmentation");
  seg->add_option("-i,--in", seg_in, "Session CSV")->required();
  seg->add_option("-o,--out", seg_out, "Intervals CSV to write")->required();

  TrainArgs ta;
  auto add_tuning = [&](CLI::App* c) {
    c->add_option("-i,--in", ta.in, "Session CSV")->required();
    c->add_option("-o,--out", ta.out, "Bundle JSON to write")->required();
    c->add_option("--frontier", ta.frontier, "Also write the grid-search frontier table");
    c->add_option("--folds", ta.folds)->check(CLI::Range(2, 20));
    c->add_option("--target-acc", ta.target, "Held-out accuracy the thresholds must reach")->check(CLI::Range(0.0, 1.0));
    c->add_option("--ratio-grid", ta.ratio_grid, "Comma-separated th_r values");
    c->add_option("--sum-grid", ta.sum_grid, "Comma-separated th_s values");
    c->add_option("--sum-mode", ta.sum_mode, "normalized (C_s counts samples) or raw");
    c->add_flag("--use-truth", ta.use_truth, "Take reaches from the truth sidecar instead of segmentation");
  };
  auto* train = app.add_subcommand("train", "Fit the HMM, reducer, class mixtures and stopping thresholds");
  add_tuning(train);
  train->add_option("--variant", ta.variant, "pca | pcanmf | fda | fda_imu");
  train->add_option("--seed", ta.seed);
  train->add_option("--created", ta.created, "Provenance timestamp (default: now, UTC)");

  std::string tune_bundle;
  auto* tune = app.add_subcommand("tune", "Re-run the threshold grid search for an existing bundle");
  add_tuning(tune);
  tune->add_option("-b,--bundle", tune_bundle, "Bundle to tune")->required();

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Accuracy versus share of the reach for each reducer variant");
  eval->add_option("-d,--dataset", ea.datasets, "Session CSVs (default: generated reference sessions, L = 4 and 8)");
  eval->add_option("--variants", ea.variants, "Subset of pca pcanmf fda fda_imu");
  eval->add_option("-o,--out", ea.out, "CSV table to write");
  eval->add_option("--seed", ea.seed);
  eval->add_option("--folds", ea.folds)->check(CLI::Range(2, 20));
  eval->add_option("--noise-scale", ea.noise_scale, "Noise multiplier for generated sessions");
  eval->add_flag("--zero-noise", ea.zero_noise, "Generated sessions without noise");
  eval->add_flag("--use-truth", ea.use_truth);

  ReplayArgs ra;
  auto* rep = app.add_subcommand("replay", "Feed a recorded session through the live engine");
  rep->add_option("-i,--in", ra.in, "Session CSV")->required();
  rep->add_option("-b,--bundle", ra.bundle, "Model bundle")->required();
  rep->add_option("-e,--events", ra.events, "Write the event log (NDJSON)");
  rep->add_option("--speed", ra.speed, "Real-time multiplier; 0 = as fast as possible")->check(CLI::NonNegativeNumber);
  rep->add_flag("--inject-noise", ra.inject, "Add gyro bursts to rest periods before replay");
  rep->add_flag("--no-operator-resets", ra.no_resets, "Never reset a controller stuck past a reach");
  rep->add_flag("--json", ra.json_out, "Metrics as JSON");

  std::vector<std::string> sv_bundles;
  std::string host = "127.0.0.1";
  int port = 8765, heartbeat = 100;
  auto* serve = app.add_subcommand("serve", "Serve live sessions over HTTP (NDJSON in, server-sent events out)");
  serve->add_option("-b,--bundle", sv_bundles, "[name=]path, repeatable; the first is the default")->required();
  serve->add_option("--host", host);
  serve->add_option("-p,--port", port, "0 picks a free port")->check(CLI::Range(0, 65535));
  serve->add_option("--heartbeat", heartbeat, "State event every N frames (0 = off)")->check(CLI::NonNegativeNumber);

  int cal_l = 4, cal_steps = 10;
  double cal_target = 0.91;
  auto* cal = app.add_subcommand("calibrate", "Bisect the noise multiplier for a target accuracy at 30% of the reach");
  cal->add_option("-L,--directions", cal_l)->check(CLI::IsMember({4, 8}));
  cal->add_option("--target", cal_target)->check(CLI::Range(0.0, 1.0));
  cal->add_option("--steps", cal_steps)->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*synth) return cmd_synth(sa);
    if (*seg) return cmd_segment(seg_in, seg_out);
    if (*train) return cmd_train(ta);
    if (*tune) return cmd_tune(ta, tune_bundle);
    if (*eval) return cmd_eval(ea);
    if (*rep) return cmd_replay(ra);
    if (*serve) return cmd_serve(sv_bundles, host, port, heartbeat);
    if (*cal) return cmd_calibrate(cal_l, cal_target, cal_steps);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
