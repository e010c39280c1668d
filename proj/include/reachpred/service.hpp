#pragma once

#include "reachpred/core.hpp"
#include "reachpred/engine.hpp"
#include "reachpred/store.hpp"

#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

// Live sessions over HTTP. Clients POST newline-delimited JSON messages to
// /session/<id>/messages and get back the events those messages produced;
// any number of observers follow /session/<id>/events (server-sent events).
// Message and event schemas are listed in the README.
namespace reachpred::service {

using json = nlohmann::json;

// Bumped together with the bundle format.
inline constexpr int kProtocolVersion = store::kFormatVersion;

struct Options {
  int heartbeat_frames = 100;  // a state event every this many ingested frames; 0 disables
  std::chrono::milliseconds poll{200};
};

class BundleRegistry {
 public:
  void add(const std::string& name, store::ModelBundle b) {
    b.validate();
    if (bundles_.empty()) default_ = name;
    bundles_[name] = std::move(b);
  }
  const store::ModelBundle& get(const std::string& name) const {
    auto it = bundles_.find(name.empty() ? default_ : name);
    if (it == bundles_.end()) throw Error("unknown bundle '" + name + "'");
    return it->second;
  }
  std::string resolve(const std::string& name) const { return name.empty() ? default_ : name; }
  std::vector<std::string> names() const {
    std::vector<std::string> n;
    for (const auto& [k, v] : bundles_) n.push_back(k);
    return n;
  }
  bool empty() const { return bundles_.empty(); }

 private:
  std::map<std::string, store::ModelBundle> bundles_;
  std::string default_;
};

inline json error_event(const std::string& message, double t = 0.0) {
  return json{{"kind", "error"}, {"message", message}, {"t", t}, {"frame", -1}};
}

// Parses one frame of a "frames" message: {"t": s, "channels": [28 numbers]}
// with optional "trial_id" and "label".
inline SampleFrame frame_from_json(const json& j) {
  if (!j.is_object()) throw Error("frame must be an object");
  if (!j.contains("t") || !j["t"].is_number()) throw Error("frame needs numeric 't'");
  if (!j.contains("channels") || !j["channels"].is_array()) throw Error("frame needs a 'channels' array");
  const auto& c = j["channels"];
  if (c.size() != kChannels) throw Error("frame has " + std::to_string(c.size()) + " channels, expected " + std::to_string(kChannels));
  Eigen::VectorXd v(kChannels);
  for (std::size_t i = 0; i < kChannels; ++i) {
    if (!c[i].is_number()) throw Error("channel " + std::to_string(i) + " is not a number");
    v[static_cast<Eigen::Index>(i)] = c[i].get<double>();
  }
  SampleFrame f;
  f.t = j["t"].get<double>();
  f.set_channels(v);
  if (j.contains("trial_id") && j["trial_id"].is_number_integer()) f.trial_id = j["trial_id"].get<int>();
  if (j.contains("label") && j["label"].is_number_integer()) f.label = j["label"].get<int>();
  return f;
}

inline json frame_to_json(const SampleFrame& f) {
  json c = json::array();
  const auto v = f.channels();
  for (Eigen::Index i = 0; i < v.size(); ++i) c.push_back(v[i]);
  return json{{"t", f.t}, {"channels", std::move(c)}};
}

// One live session: an engine (once started) plus the ordered event log that
// observers read from. Messages are applied one at a time under the lock.
class LiveSession {
 public:
  LiveSession(std::string id, const BundleRegistry& reg, Options opt) : id_(std::move(id)), reg_(reg), opt_(opt) {}

  const std::string& id() const { return id_; }

  std::vector<json> handle_line(std::string_view line) {
    json msg;
    try {
      msg = json::parse(line);
    } catch (const json::exception& e) {
      std::lock_guard lk(mu_);
      return {publish(error_event(std::string("malformed message: ") + e.what(), last_t_))};
    }
    return handle(msg);
  }

  std::vector<json> handle(const json& msg) {
    std::lock_guard lk(mu_);
    std::vector<json> out;
    try {
      if (!msg.is_object() || !msg.contains("type") || !msg["type"].is_string()) throw Error("message needs a string 'type'");
      const std::string type = msg["type"];
      if (type == "hello") {
        if (msg.contains("protocol") && msg["protocol"] != kProtocolVersion)
          throw Error("protocol " + msg["protocol"].dump() + " not supported (server speaks " + std::to_string(kProtocolVersion) + ")");
        json h{{"kind", "hello"}, {"protocol", kProtocolVersion}, {"session", id_}, {"bundles", reg_.names()}, {"channels", channel_names()}, {"t", last_t_}, {"frame", -1}};
        h["running"] = running_;
        out.push_back(publish(std::move(h)));
      } else if (type == "control") {
        control(msg, out);
      } else if (type == "frames") {
        frames(msg, out);
      } else {
        throw Error("unknown message type '" + type + "'");
      }
    } catch (const std::exception& e) {
      out.push_back(publish(error_event(e.what(), last_t_)));
    }
    cv_.notify_all();
    return out;
  }

  // Events with seq >= from, waiting up to `wait` when there are none yet.
  std::vector<json> since(std::size_t from, std::chrono::milliseconds wait) {
    std::unique_lock lk(mu_);
    if (log_.size() <= from) cv_.wait_for(lk, wait, [&] { return log_.size() > from || closed_; });
    if (log_.size() <= from) return {};
    return {log_.begin() + static_cast<long>(from), log_.end()};
  }

  std::size_t size() const {
    std::lock_guard lk(mu_);
    return log_.size();
  }

  void close() {
    {
      std::lock_guard lk(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

 private:
  json publish(json e) {
    e["seq"] = log_.size();
    e["session"] = id_;
    log_.push_back(e);
    return e;
  }
  void publish_all(const std::vector<engine::EngineEvent>& evs, std::vector<json>& out) {
    for (const auto& e : evs) out.push_back(publish(e.to_json(true)));
  }

  void control(const json& msg, std::vector<json>& out) {
    if (!msg.contains("action") || !msg["action"].is_string()) throw Error("control needs a string 'action'");
    const std::string action = msg["action"];
    if (action == "start") {
      const std::string want = msg.contains("bundle") && msg["bundle"].is_string() ? msg["bundle"].get<std::string>() : "";
      const auto& b = reg_.get(want);
      engine_.emplace(b);
      bundle_name_ = reg_.resolve(want);
      running_ = true;
      frames_ = 0;
      last_t_ = 0.0;
      json s{{"kind", "started"}, {"bundle", bundle_name_}, {"classes", b.command_space}, {"t", last_t_}, {"frame", -1}};
      s["stopping"] = {{"th_r", b.stopping.th_r}, {"th_s", b.stopping.th_s}};
      out.push_back(publish(std::move(s)));
      publish_all(engine_->reset(last_t_), out);
    } else if (action == "stop") {
      if (!engine_) throw Error("session not started");
      running_ = false;
      out.push_back(publish(json{{"kind", "stopped"}, {"t", last_t_}, {"frame", engine_->frames_seen() - 1}}));
    } else if (action == "reset") {
      if (!engine_) throw Error("session not started");
      publish_all(engine_->reset(last_t_), out);
    } else {
      throw Error("unknown control action '" + action + "'");
    }
  }

  void frames(const json& msg, std::vector<json>& out) {
    if (!engine_ || !running_) throw Error("session not started; send {\"type\":\"control\",\"action\":\"start\"} first");
    if (!msg.contains("frames") || !msg["frames"].is_array()) throw Error("frames message needs a 'frames' array");
    for (const auto& fj : msg["frames"]) {
      SampleFrame f;
      try {
        f = frame_from_json(fj);
      } catch (const std::exception& e) {
        out.push_back(publish(error_event(std::string("bad frame: ") + e.what(), last_t_)));
        continue;
      }
      const auto evs = engine_->ingest(f);
      const bool rejected = evs.size() == 1 && evs.front().kind == "error";
      publish_all(evs, out);
      if (rejected) continue;
      last_t_ = f.t;
      ++frames_;
      if (opt_.heartbeat_frames > 0 && frames_ % opt_.heartbeat_frames == 0) {
        auto hb = engine_->state_event(f.t).to_json(true);
        hb["heartbeat"] = true;
        out.push_back(publish(std::move(hb)));
      }
    }
  }

  std::string id_;
  const BundleRegistry& reg_;
  Options opt_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::optional<engine::SessionEngine> engine_;
  std::string bundle_name_;
  bool running_ = false;
  bool closed_ = false;
  long frames_ = 0;
  double last_t_ = 0.0;
  std::vector<json> log_;
};

class Server {
 public:
  Server(BundleRegistry reg, Options opt = {}) : reg_(std::move(reg)), opt_(opt) {
    if (reg_.empty()) throw Error("serve: no model bundle loaded");
    routes();
  }
  ~Server() { stop(); }

  // port 0 picks a free port; returns the bound port.
  int bind(const std::string& host, int port) {
    const int p = port == 0 ? http_.bind_to_any_port(host) : (http_.bind_to_port(host, port) ? port : -1);
    if (p < 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
    return p;
  }
  void run() { http_.listen_after_bind(); }
  void start_background() {
    thread_ = std::thread([this] { run(); });
    http_.wait_until_ready();
  }
  void stop() {
    stopping_ = true;
    {
      std::lock_guard lk(mu_);
      for (auto& [k, s] : sessions_) s->close();
    }
    http_.stop();
    if (thread_.joinable()) thread_.join();
  }

  std::shared_ptr<LiveSession> session(const std::string& id) {
    std::lock_guard lk(mu_);
    auto& s = sessions_[id];
    if (!s) s = std::make_shared<LiveSession>(id, reg_, opt_);
    return s;
  }

 private:
  void routes() {
    http_.Get("/health", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(json{{"ok", true}, {"protocol", kProtocolVersion}}.dump(), "application/json");
    });
    http_.Get("/bundles", [this](const httplib::Request&, httplib::Response& res) { res.set_content(json(reg_.names()).dump(), "application/json"); });
    http_.Post(R"(/session/([A-Za-z0-9_.-]+)/messages)", [this](const httplib::Request& req, httplib::Response& res) {
      auto s = session(req.matches[1]);
      std::string out;
      std::size_t pos = 0;
      const std::string_view body = req.body;
      while (pos < body.size()) {
        std::size_t eol = body.find('\n', pos);
        if (eol == std::string_view::npos) eol = body.size();
        std::string_view line = body.substr(pos, eol - pos);
        pos = eol + 1;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
        for (const auto& e : s->handle_line(line)) out += e.dump() + "\n";
      }
      res.set_content(out, "application/x-ndjson");
    });
    http_.Get(R"(/session/([A-Za-z0-9_.-]+)/log)", [this](const httplib::Request& req, httplib::Response& res) {
      auto s = session(req.matches[1]);
      std::string out;
      for (const auto& e : s->since(0, std::chrono::milliseconds(0))) out += e.dump() + "\n";
      res.set_content(out, "application/x-ndjson");
    });
    http_.Get(R"(/session/([A-Za-z0-9_.-]+)/events)", [this](const httplib::Request& req, httplib::Response& res) {
      auto s = session(req.matches[1]);
      std::size_t from = 0;
      if (req.has_param("since")) from = static_cast<std::size_t>(std::stoul(req.get_param_value("since")));
      res.set_header("Cache-Control", "no-cache");
      res.set_chunked_content_provider("text/event-stream", [this, s, from](std::size_t, httplib::DataSink& sink) mutable {
        if (stopping_) {
          sink.done();
          return true;
        }
        const auto evs = s->since(from, opt_.poll);
        std::string chunk;
        for (const auto& e : evs) {
          chunk += "id: " + std::to_string(e["seq"].get<std::size_t>()) + "\ndata: " + e.dump() + "\n\n";
          ++from;
        }
        if (chunk.empty()) chunk = ": idle\n\n";
        return sink.write(chunk.data(), chunk.size());
      });
    });
  }

  BundleRegistry reg_;
  Options opt_;
  httplib::Server http_;
  std::thread thread_;
  std::atomic<bool> stopping_{false};
  std::mutex mu_;
  std::map<std::string, std::shared_ptr<LiveSession>> sessions_;
};

}  // namespace reachpred::service
