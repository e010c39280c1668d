#pragma once

#include "reachpred/accumulate.hpp"
#include "reachpred/core.hpp"
#include "reachpred/dsp.hpp"
#include "reachpred/fsm.hpp"
#include "reachpred/intention.hpp"
#include "reachpred/mixture.hpp"
#include "reachpred/reduce.hpp"
#include "reachpred/synth.hpp"

#include <json.hpp>

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <unistd.h>
#include <vector>

namespace reachpred::store {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr int kFormatVersion = 1;

// ---------------------------------------------------------------- text helpers

inline std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::vector<std::string_view> split(std::string_view line, char sep = ',') {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    const std::size_t next = line.find(sep, pos);
    out.push_back(line.substr(pos, next == std::string_view::npos ? std::string_view::npos : next - pos));
    if (next == std::string_view::npos) break;
    pos = next + 1;
  }
  return out;
}

inline double parse_double(std::string_view s, std::size_t line_no, std::string_view what) {
  double v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw Error("line " + std::to_string(line_no) + ": bad " + std::string(what) + " value '" + std::string(s) + "'");
  return v;
}

inline long parse_long(std::string_view s, std::size_t line_no, std::string_view what) {
  long v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw Error("line " + std::to_string(line_no) + ": bad " + std::string(what) + " value '" + std::string(s) + "'");
  return v;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes to a sibling temporary file, then renames over the target, so a
// failed write never leaves a partial artifact behind.
inline void write_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path() && !path.parent_path().empty() && !fs::exists(path.parent_path()))
    throw Error("output directory does not exist: " + path.parent_path().string());
  const fs::path tmp = path.string() + ".tmp" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw Error("write failed for " + path.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw Error("cannot rename into " + path.string());
  }
}

// 64-bit FNV-1a, hex encoded.
inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string hash_file(const fs::path& path) { return fnv1a_hex(read_file(path)); }

// ---------------------------------------------------------------- sessions

inline std::string session_header() {
  std::string h = "t,trial_id,label";
  for (const auto& n : channel_names()) h += "," + n;
  return h;
}

inline std::string format_session(const std::vector<SampleFrame>& frames) {
  std::string out = session_header() + "\n";
  out.reserve(frames.size() * 28 * 12);
  for (const auto& f : frames) {
    out += format_double(f.t);
    out += ',';
    out += std::to_string(f.trial_id);
    out += ',';
    if (f.label) out += std::to_string(*f.label);
    const auto ch = f.channels();
    for (Eigen::Index i = 0; i < ch.size(); ++i) {
      out += ',';
      out += format_double(ch[i]);
    }
    out += '\n';
  }
  return out;
}

inline std::vector<SampleFrame> parse_session(std::string_view text) {
  std::vector<SampleFrame> frames;
  std::size_t pos = 0, line_no = 0;
  bool header = false;
  const std::size_t fields = 3 + kChannels;
  Eigen::VectorXd ch(kChannels);
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    const bool terminated = eol != std::string_view::npos;
    if (!terminated) eol = text.size();
    std::string_view line = text.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    if (!header) {
      if (line != session_header()) throw Error("line 1: unexpected session header");
      header = true;
      continue;
    }
    const auto parts = split(line);
    if (parts.size() != fields)
      throw Error("line " + std::to_string(line_no) + ": expected " + std::to_string(fields) + " fields, found " + std::to_string(parts.size()) + (terminated ? "" : " (truncated final line)"));
    SampleFrame f;
    f.t = parse_double(parts[0], line_no, "t");
    f.trial_id = static_cast<int>(parse_long(parts[1], line_no, "trial_id"));
    if (!parts[2].empty()) f.label = static_cast<int>(parse_long(parts[2], line_no, "label"));
    for (std::size_t i = 0; i < kChannels; ++i) ch[static_cast<Eigen::Index>(i)] = parse_double(parts[3 + i], line_no, channel_names()[i]);
    f.set_channels(ch);
    for (double e : f.emg)
      if (e < 0) throw Error("line " + std::to_string(line_no) + ": negative EMG envelope");
    if (!frames.empty() && !(f.t > frames.back().t)) throw Error("line " + std::to_string(line_no) + ": timestamps not strictly increasing");
    frames.push_back(f);
  }
  if (!header) throw Error("empty session file");
  return frames;
}

// "<stem>.truth.csv" next to the session file
inline fs::path truth_sidecar(const fs::path& session) {
  fs::path p = session;
  p.replace_extension();
  return p.string() + ".truth.csv";
}

inline std::string format_truth(const synth::GroundTruth& truth) {
  std::string out = "trial_id,label,fwd_onset,fwd_offset,bwd_onset,bwd_offset\n";
  for (const auto& t : truth.trials)
    out += std::to_string(t.trial_id) + "," + std::to_string(t.label) + "," + std::to_string(t.forward_onset) + "," + std::to_string(t.forward_offset) + "," +
           std::to_string(t.backward_onset) + "," + std::to_string(t.backward_offset) + "\n";
  return out;
}

inline synth::GroundTruth parse_truth(std::string_view text) {
  synth::GroundTruth gt;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1) {
      if (line != "trial_id,label,fwd_onset,fwd_offset,bwd_onset,bwd_offset") throw Error("truth line 1: unexpected header");
      continue;
    }
    const auto p = split(line);
    if (p.size() != 6) throw Error("truth line " + std::to_string(line_no) + ": expected 6 fields");
    synth::TrialTruth t;
    t.trial_id = static_cast<int>(parse_long(p[0], line_no, "trial_id"));
    t.label = static_cast<int>(parse_long(p[1], line_no, "label"));
    t.forward_onset = static_cast<std::size_t>(parse_long(p[2], line_no, "fwd_onset"));
    t.forward_offset = static_cast<std::size_t>(parse_long(p[3], line_no, "fwd_offset"));
    t.backward_onset = static_cast<std::size_t>(parse_long(p[4], line_no, "bwd_onset"));
    t.backward_offset = static_cast<std::size_t>(parse_long(p[5], line_no, "bwd_offset"));
    if (!gt.trials.empty() && t.forward_onset <= gt.trials.back().backward_onset) throw Error("truth line " + std::to_string(line_no) + ": onsets not increasing");
    gt.trials.push_back(t);
  }
  return gt;
}

struct Dataset {
  std::vector<SampleFrame> frames;
  std::optional<synth::GroundTruth> truth;
  std::string hash;  // of the session file bytes
};

inline void save_dataset(const fs::path& path, const std::vector<SampleFrame>& frames, const std::optional<synth::GroundTruth>& truth = std::nullopt) {
  write_atomic(path, format_session(frames));
  if (truth) write_atomic(truth_sidecar(path), format_truth(*truth));
}

inline Dataset load_dataset(const fs::path& path) {
  Dataset d;
  const std::string text = read_file(path);
  try {
    d.frames = parse_session(text);
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
  d.hash = fnv1a_hex(text);
  const fs::path side = truth_sidecar(path);
  if (fs::exists(side)) d.truth = parse_truth(read_file(side));
  return d;
}

// ---------------------------------------------------------------- tables

inline std::string format_segments(const std::vector<dsp::SegmentInterval>& segs) {
  std::string out = "start,end,state,role,direction\n";
  for (const auto& s : segs)
    out += std::to_string(s.start) + "," + std::to_string(s.end) + "," + std::string(to_string(s.state)) + "," + std::string(dsp::to_string(s.role)) + "," +
           (s.direction ? direction_name(*s.direction) : "") + "\n";
  return out;
}

inline std::vector<dsp::SegmentInterval> parse_segments(std::string_view text) {
  std::vector<dsp::SegmentInterval> segs;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 || line.empty()) continue;
    const auto p = split(line);
    if (p.size() != 5) throw Error("segments line " + std::to_string(line_no) + ": expected 5 fields");
    dsp::SegmentInterval s;
    s.start = static_cast<std::size_t>(parse_long(p[0], line_no, "start"));
    s.end = static_cast<std::size_t>(parse_long(p[1], line_no, "end"));
    s.state = p[2] == "MOTION" ? Activity::motion : Activity::rest;
    s.role = p[3] == "forward" ? dsp::MotionRole::forward : p[3] == "backward" ? dsp::MotionRole::backward : dsp::MotionRole::none;
    if (!p[4].empty()) s.direction = direction_index(p[4]);
    segs.push_back(s);
  }
  return segs;
}

inline std::string format_frontier(const std::vector<accumulate::FrontierRow>& rows) {
  std::string out = "th_r,th_s,mean_acc,std_acc,mean_time_s,mean_pct_trajectory\n";
  for (const auto& r : rows)
    out += format_double(r.th_r) + "," + format_double(r.th_s) + "," + format_double(r.mean_acc) + "," + format_double(r.std_acc) + "," + format_double(r.mean_time_s) + "," +
           format_double(r.mean_pct_trajectory) + "\n";
  return out;
}

inline std::vector<accumulate::FrontierRow> parse_frontier(std::string_view text) {
  std::vector<accumulate::FrontierRow> rows;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 || line.empty()) continue;
    const auto p = split(line);
    if (p.size() != 6) throw Error("frontier line " + std::to_string(line_no) + ": expected 6 fields");
    rows.push_back({parse_double(p[0], line_no, "th_r"), parse_double(p[1], line_no, "th_s"), parse_double(p[2], line_no, "mean_acc"), parse_double(p[3], line_no, "std_acc"),
                    parse_double(p[4], line_no, "mean_time_s"), parse_double(p[5], line_no, "mean_pct_trajectory")});
  }
  return rows;
}

// ---------------------------------------------------------------- bundle

struct Provenance {
  std::string dataset_hash;
  std::string dataset_path;
  std::string created;  // ISO-8601, supplied by the caller
  std::string frontier_path;
  std::map<std::string, long long> seeds;
  std::vector<std::string> warnings;
  bool operator==(const Provenance&) const = default;
};

struct ModelBundle {
  int format_version = kFormatVersion;
  intention::HmmModel hmm;
  reduce::ReducerMap reducer;
  mixture::DirectionModel direction;
  accumulate::StoppingConfig stopping;
  fsm::FsmConfig fsm;
  std::vector<std::string> command_space;  // direction names the robot can be sent to
  Provenance provenance;

  void validate() const {
    if (format_version != kFormatVersion) throw Error("bundle: unsupported format version " + std::to_string(format_version));
    hmm.validate();
    direction.validate();
    stopping.validate();
    fsm.validate();
    if (reducer.dim() != direction.dim) throw Error("bundle: reducer emits " + std::to_string(reducer.dim()) + " features, mixtures expect " + std::to_string(direction.dim));
    if (static_cast<int>(command_space.size()) != direction.classes) throw Error("bundle: command space size does not match class count");
    if (reducer.input_channels() > static_cast<int>(kChannels)) throw Error("bundle: reducer reads channels beyond the frame");
  }
};

namespace detail {

inline json vec(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline json mat(const Eigen::MatrixXd& m) {
  json a = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    a.push_back(std::move(row));
  }
  return a;
}

inline Eigen::VectorXd to_vec(const json& a) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) v[static_cast<Eigen::Index>(i)] = a[i].get<double>();
  return v;
}

// cols: column count to use for an empty matrix
inline Eigen::MatrixXd to_mat(const json& a, Eigen::Index cols = 0) {
  if (a.empty()) return Eigen::MatrixXd(0, cols);
  Eigen::MatrixXd m(static_cast<Eigen::Index>(a.size()), static_cast<Eigen::Index>(a[0].size()));
  for (std::size_t r = 0; r < a.size(); ++r) {
    if (a[r].size() != a[0].size()) throw Error("bundle: ragged matrix");
    for (std::size_t c = 0; c < a[r].size(); ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = a[r][c].get<double>();
  }
  return m;
}

// JSON has no infinity; non-finite values travel as null.
inline json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
inline double from_num(const json& j) { return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>(); }

inline json hmm_json(const intention::HmmModel& m) {
  json j;
  j["initial"] = m.initial;
  j["transition"] = m.transition;
  j["mean"] = m.mean;
  j["variance"] = m.variance;
  j["input_level"] = m.input_level;
  j["iterations"] = m.iterations;
  j["log_likelihood"] = m.log_likelihood;
  json tr = json::array();
  for (double v : m.ll_trace) tr.push_back(num(v));
  j["ll_trace"] = tr;
  return j;
}

inline intention::HmmModel hmm_from(const json& j) {
  intention::HmmModel m;
  m.initial = j.at("initial").get<std::array<double, 2>>();
  m.transition = j.at("transition").get<std::array<std::array<double, 2>, 2>>();
  m.mean = j.at("mean").get<std::array<double, 2>>();
  m.variance = j.at("variance").get<std::array<double, 2>>();
  m.input_level = j.at("input_level").get<std::array<double, 2>>();
  m.iterations = j.at("iterations").get<int>();
  m.log_likelihood = j.at("log_likelihood").get<double>();
  for (const auto& v : j.at("ll_trace")) m.ll_trace.push_back(from_num(v));
  return m;
}

inline json reducer_json(const reduce::ReducerMap& r) {
  json j;
  j["variant"] = std::string(reduce::to_string(r.variant));
  j["linear_channels"] = r.linear_channels;
  j["offset"] = vec(r.offset);
  j["projection"] = mat(r.projection);
  j["nmf_channels"] = r.nmf_channels;
  j["synergies"] = mat(r.synergies);
  j["seed"] = r.seed;
  j["nmf_vaf"] = r.nmf_vaf;
  j["pca_explained"] = r.pca_explained;
  return j;
}

inline reduce::ReducerMap reducer_from(const json& j) {
  reduce::ReducerMap r;
  r.variant = reduce::parse_variant(j.at("variant").get<std::string>());
  r.linear_channels = j.at("linear_channels").get<std::vector<int>>();
  r.offset = to_vec(j.at("offset"));
  r.projection = to_mat(j.at("projection"), static_cast<Eigen::Index>(r.linear_channels.size()));
  r.nmf_channels = j.at("nmf_channels").get<std::vector<int>>();
  r.synergies = to_mat(j.at("synergies"), static_cast<Eigen::Index>(r.nmf_channels.size()));
  r.seed = j.at("seed").get<unsigned>();
  r.nmf_vaf = j.at("nmf_vaf").get<double>();
  r.pca_explained = j.at("pca_explained").get<std::vector<double>>();
  if (static_cast<std::size_t>(r.projection.cols()) != r.linear_channels.size() || r.offset.size() != r.projection.cols())
    throw Error("bundle: reducer projection does not match its channel list");
  if (r.synergies.rows() > 0 && static_cast<std::size_t>(r.synergies.cols()) != r.nmf_channels.size()) throw Error("bundle: synergy matrix does not match its channel list");
  if ((r.synergies.array() < 0).any()) throw Error("bundle: negative synergy entry");
  r.prepare();
  return r;
}

inline json direction_json(const mixture::DirectionModel& d) {
  json j;
  j["classes"] = d.classes;
  j["dim"] = d.dim;
  j["seed"] = d.seed;
  j["k_table"] = d.k_table;
  j["k_candidates"] = d.k_candidates;
  json bic = json::array();
  for (const auto& row : d.bic_table) {
    json r = json::array();
    for (double v : row) r.push_back(num(v));
    bic.push_back(r);
  }
  j["bic_table"] = bic;
  json mix = json::array();
  for (const auto& m : d.mixtures) {
    json comps = json::array();
    for (const auto& c : m.components()) {
      json cj;
      cj["prior"] = c.prior;
      cj["mean"] = vec(c.mean);
      cj["cov"] = mat(c.cov);
      comps.push_back(cj);
    }
    mix.push_back(comps);
  }
  j["mixtures"] = mix;
  return j;
}

inline mixture::DirectionModel direction_from(const json& j) {
  mixture::DirectionModel d;
  d.classes = j.at("classes").get<int>();
  d.dim = j.at("dim").get<int>();
  d.seed = j.at("seed").get<unsigned long>();
  d.k_table = j.at("k_table").get<std::vector<int>>();
  d.k_candidates = j.at("k_candidates").get<std::vector<int>>();
  for (const auto& row : j.at("bic_table")) {
    std::vector<double> r;
    for (const auto& v : row) r.push_back(from_num(v));
    d.bic_table.push_back(r);
  }
  for (const auto& comps : j.at("mixtures")) {
    std::vector<mixture::GaussianComponent> cs;
    for (const auto& cj : comps) cs.push_back({cj.at("prior").get<double>(), to_vec(cj.at("mean")), to_mat(cj.at("cov"))});
    d.mixtures.emplace_back(std::move(cs));
  }
  return d;
}

}  // namespace detail

inline json bundle_to_json(const ModelBundle& b) {
  json j;
  j["format_version"] = b.format_version;
  j["hmm"] = detail::hmm_json(b.hmm);
  j["reducer"] = detail::reducer_json(b.reducer);
  j["direction"] = detail::direction_json(b.direction);
  json s;
  s["th_r"] = b.stopping.th_r;
  s["th_s"] = b.stopping.th_s;
  s["timeout"] = b.stopping.timeout;
  s["target_accuracy"] = b.stopping.target_accuracy;
  s["sum_mode"] = b.stopping.sum_mode == accumulate::SumMode::normalized ? "normalized" : "raw_density";
  j["stopping"] = s;
  j["fsm"] = {{"debounce", b.fsm.debounce}, {"timeout", b.fsm.timeout}};
  j["command_space"] = b.command_space;
  json p;
  p["dataset_hash"] = b.provenance.dataset_hash;
  p["dataset_path"] = b.provenance.dataset_path;
  p["created"] = b.provenance.created;
  p["frontier_path"] = b.provenance.frontier_path;
  p["seeds"] = b.provenance.seeds;
  p["warnings"] = b.provenance.warnings;
  j["provenance"] = p;
  return j;
}

inline ModelBundle bundle_from_json(const json& j) {
  if (!j.is_object() || !j.contains("format_version") || !j["format_version"].is_number_integer()) throw Error("bundle: missing format_version");
  const int version = j["format_version"].get<int>();
  if (version > kFormatVersion) throw Error("bundle: format version " + std::to_string(version) + " is newer than supported version " + std::to_string(kFormatVersion));
  if (version < 1) throw Error("bundle: invalid format version " + std::to_string(version));
  try {
    ModelBundle b;
    b.format_version = version;
    b.hmm = detail::hmm_from(j.at("hmm"));
    b.reducer = detail::reducer_from(j.at("reducer"));
    b.direction = detail::direction_from(j.at("direction"));
    const auto& s = j.at("stopping");
    b.stopping.th_r = s.at("th_r").get<double>();
    b.stopping.th_s = s.at("th_s").get<double>();
    b.stopping.timeout = s.at("timeout").get<int>();
    b.stopping.target_accuracy = s.at("target_accuracy").get<double>();
    const auto mode = s.at("sum_mode").get<std::string>();
    if (mode != "normalized" && mode != "raw_density") throw Error("bundle: unknown sum_mode '" + mode + "'");
    b.stopping.sum_mode = mode == "normalized" ? accumulate::SumMode::normalized : accumulate::SumMode::raw_density;
    b.fsm.debounce = j.at("fsm").at("debounce").get<int>();
    b.fsm.timeout = j.at("fsm").at("timeout").get<int>();
    b.command_space = j.at("command_space").get<std::vector<std::string>>();
    const auto& p = j.at("provenance");
    b.provenance.dataset_hash = p.at("dataset_hash").get<std::string>();
    b.provenance.dataset_path = p.at("dataset_path").get<std::string>();
    b.provenance.created = p.at("created").get<std::string>();
    b.provenance.frontier_path = p.at("frontier_path").get<std::string>();
    b.provenance.seeds = p.at("seeds").get<std::map<std::string, long long>>();
    b.provenance.warnings = p.at("warnings").get<std::vector<std::string>>();
    b.validate();
    return b;
  } catch (const json::exception& e) {
    throw Error(std::string("bundle: ") + e.what());
  }
}

inline std::string format_bundle(const ModelBundle& b) {
  b.validate();
  return bundle_to_json(b).dump(1) + "\n";
}

inline void save_bundle(const ModelBundle& b, const fs::path& path) { write_atomic(path, format_bundle(b)); }

inline ModelBundle parse_bundle(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(std::string("bundle: not valid JSON: ") + e.what());
  }
  return bundle_from_json(j);
}

inline ModelBundle load_bundle(const fs::path& path) { return parse_bundle(read_file(path)); }

inline bool equal_models(const mixture::DirectionModel& a, const mixture::DirectionModel& b) {
  return a.classes == b.classes && a.dim == b.dim && a.mixtures == b.mixtures && a.seed == b.seed && a.k_table == b.k_table && a.k_candidates == b.k_candidates;
}

inline bool equal_bundles(const ModelBundle& a, const ModelBundle& b) {
  return a.format_version == b.format_version && a.hmm.initial == b.hmm.initial && a.hmm.transition == b.hmm.transition && a.hmm.mean == b.hmm.mean &&
         a.hmm.variance == b.hmm.variance && a.hmm.input_level == b.hmm.input_level && a.reducer == b.reducer && equal_models(a.direction, b.direction) && a.stopping == b.stopping && a.fsm == b.fsm &&
         a.command_space == b.command_space && a.provenance == b.provenance;
}

}  // namespace reachpred::store
