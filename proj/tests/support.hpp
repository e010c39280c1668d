#pragma once

#include "reachpred/pipeline.hpp"

#include <map>

// Trained bundles shared by the engine and service suites. Training is the
// slow part, so each configuration is built once per test binary.
namespace support {

struct Trained {
  reachpred::synth::Session session;
  reachpred::store::ModelBundle bundle;
};

inline const Trained& trained(double noise_scale = reachpred::synth::SynthConfig{}.noise_scale, int directions = 4) {
  static std::map<std::pair<double, int>, Trained> cache;
  auto it = cache.find({noise_scale, directions});
  if (it != cache.end()) return it->second;
  auto cfg = reachpred::synth::reference_config(directions);
  cfg.noise_scale = noise_scale;
  Trained t;
  t.session = reachpred::synth::gen_session(cfg);
  reachpred::store::Dataset d{t.session.frames, t.session.truth, reachpred::store::fnv1a_hex(reachpred::store::format_session(t.session.frames))};
  reachpred::pipeline::TrainOptions opt;
  t.bundle = reachpred::pipeline::train(d, opt).bundle;
  t.bundle.provenance.created = "2026-01-01T00:00:00Z";
  return cache.emplace(std::make_pair(noise_scale, directions), std::move(t)).first->second;
}

}  // namespace support
