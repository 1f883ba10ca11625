#pragma once

// JSON-over-HTTP front end. Routes are served under /api/v1 and mirrored
// under /api.

#include <cstdint>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "mclr/counting.hpp"
#include "mclr/editing.hpp"
#include "mclr/persistence.hpp"

#include <httplib.h>

namespace mclr {

struct ApiError : std::runtime_error {
  int status;
  ApiError(int s, const std::string& what) : std::runtime_error(what), status(s) {}
};

struct StoredSession {
  std::string prompt;
  std::uint64_t seed = 0;
  int frames = 0;
  double cfg_weight = 0;
  GenerationResult result;                  // the sample a plain generate produced, or the edited one
  std::optional<GenerationResult> reference;  // set for edit sessions
};

// Recency-ordered store bounded at `capacity` sessions.
class SessionStore {
 public:
  explicit SessionStore(std::size_t capacity = 32) : capacity_(capacity) {}

  std::string put(StoredSession s) {
    std::lock_guard<std::mutex> lock(mutex_);
    const std::string id = "s" + std::to_string(++counter_);
    order_.push_front(id);
    items_[id] = {std::make_shared<const StoredSession>(std::move(s)), order_.begin()};
    while (items_.size() > capacity_) {
      items_.erase(order_.back());
      order_.pop_back();
    }
    return id;
  }

  std::shared_ptr<const StoredSession> get(const std::string& id) {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = items_.find(id);
    if (it == items_.end()) return nullptr;
    order_.splice(order_.begin(), order_, it->second.pos);
    return it->second.session;
  }

  std::size_t size() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return items_.size();
  }

 private:
  struct Entry {
    std::shared_ptr<const StoredSession> session;
    std::list<std::string>::iterator pos;
  };
  std::size_t capacity_;
  mutable std::mutex mutex_;
  std::list<std::string> order_;
  std::unordered_map<std::string, Entry> items_;
  std::uint64_t counter_ = 0;
};

inline constexpr int kMaxTransferSide = 256;

class Service {
 public:
  Service(Denoiser<float> model, NormStats stats, DiffusionConfig diffusion)
      : model_(std::move(model)), stats_(std::move(stats)), diffusion_(diffusion), hash_(checkpoint_hash(model_)) {}

  static Service from_checkpoint(const Checkpoint& ck) { return Service(instantiate(ck), ck.stats, ck.diffusion); }

  SessionStore& sessions() { return sessions_; }

  nlohmann::json health() const { return {{"status", "ok"}, {"checkpoint_hash", hash_}}; }

  nlohmann::json generate(const nlohmann::json& body) {
    const auto req = base_request(body);
    DiffusionConfig cfg = diffusion_;
    cfg.cfg_weight = req.cfg_weight;
    SampleOptions opt;
    opt.frames = req.frames;
    opt.seed = req.seed;
    auto results = ddim_sample(model_, stats_, {{req.prompt, tokenize(req.prompt)}}, cfg, opt);
    StoredSession s{req.prompt, req.seed, req.frames, req.cfg_weight, std::move(results[0]), std::nullopt};
    nlohmann::json tokens = word_tokens(s.result.tokens);
    nlohmann::json motion = export_motion(s.result.motion);
    const std::string id = sessions_.put(std::move(s));
    return {{"id", id}, {"motion", motion}, {"word_tokens", tokens}};
  }

  nlohmann::json edit(const nlohmann::json& body) {
    Request req;
    if (body.contains("base_id")) {
      const auto base = lookup(field<std::string>(body, "base_id"));
      req = {base->prompt, base->seed, base->frames, base->cfg_weight};
    } else if (body.contains("base")) {
      req = base_request(body.at("base"));
    } else {
      throw ApiError(400, "edit needs base_id or base");
    }
    if (body.contains("cfg_weight")) req.cfg_weight = field<double>(body, "cfg_weight");
    if (!body.contains("directive")) throw ApiError(400, "edit needs a directive");
    EditDirective directive;
    try {
      directive = directive_from_json(body.at("directive"));
    } catch (const RangeError& e) {
      throw ApiError(400, e.what());
    }
    DiffusionConfig cfg = diffusion_;
    cfg.cfg_weight = req.cfg_weight;
    EditSession session = run_edit(model_, stats_, EditBase{req.prompt, req.seed, req.frames}, directive, cfg);
    nlohmann::json out = {{"reference_motion", export_motion(session.reference.motion)},
                          {"edited_motion", export_motion(session.edited.motion)},
                          {"diff_summary", diff_report(session)},
                          {"word_tokens", word_tokens(session.edited.tokens)}};
    StoredSession s{session.edited.prompt, req.seed, req.frames, req.cfg_weight, std::move(session.edited),
                    std::move(session.reference)};
    out["id"] = sessions_.put(std::move(s));
    return out;
  }

  // Query keys: kind, layer, step, head, raw, sample (edited|reference).
  nlohmann::json attention(const std::string& id, const std::map<std::string, std::string>& query) {
    const auto s = lookup(id);
    auto get = [&](const std::string& key, const std::string& fallback) {
      auto it = query.find(key);
      return it == query.end() ? fallback : it->second;
    };
    const std::string which = get("sample", "edited");
    if (which != "edited" && which != "reference") throw ApiError(400, "sample must be edited or reference");
    if (which == "reference" && !s->reference) throw ApiError(404, "session has no reference sample");
    const GenerationResult& r = which == "reference" ? *s->reference : s->result;
    AttentionKind kind;
    try {
      kind = attention_kind_from_string(get("kind", "cross"));
    } catch (const RangeError& e) {
      throw ApiError(400, e.what());
    }
    const int layer = parse_int(get("layer", kind == AttentionKind::self_attention ? "1" : "2"), "layer");
    const int step = parse_int(get("step", std::to_string(diffusion_.sample_steps)), "step");
    const int head = parse_int(get("head", "0"), "head");
    const bool raw = get("raw", "0") == "1";
    const AttentionRecord* hit = nullptr;
    for (const auto& rec : r.records) {
      if (rec.kind == kind && rec.layer == layer && rec.step == step && rec.head == head && rec.conditional) hit = &rec;
    }
    if (hit == nullptr) throw ApiError(404, "no attention map for that kind/layer/step/head");
    MatD m = hit->effective().cast<double>();
    const Eigen::Index longest = std::max(m.rows(), m.cols());
    bool pooled = false;
    if (!raw && longest > kMaxTransferSide) {
      m = downsample(m, static_cast<int>((longest + kMaxTransferSide - 1) / kMaxTransferSide));
      pooled = true;
    }
    nlohmann::json values = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) values.push_back(std::vector<double>(m.row(i).data(), m.row(i).data() + m.cols()));
    nlohmann::json out = {{"dims", {m.rows(), m.cols()}}, {"values", values}, {"pooled", pooled}, {"edited", hit->edited.has_value()},
                          {"kind", to_string(kind)}, {"layer", layer}, {"step", step}, {"head", head}};
    if (kind == AttentionKind::cross_attention) out["columns"] = word_tokens(r.tokens);
    return out;
  }

  nlohmann::json count(const nlohmann::json& body) {
    CountingConfig cfg;
    if (body.contains("config")) {
      const auto& c = body.at("config");
      if (!c.is_object()) throw ApiError(400, "config must be an object");
      cfg.sigma = c.value("sigma", cfg.sigma);
      cfg.downsample_factor = c.value("downsample_factor", cfg.downsample_factor);
      cfg.height_multiplier = c.value("height_multiplier", cfg.height_multiplier);
      cfg.distance = c.value("distance", cfg.distance);
    }
    MatD map;
    if (body.contains("id")) {
      const auto s = lookup(field<std::string>(body, "id"));
      const int layer = body.value("layer", 1);
      const int step = body.value("step", diffusion_.sample_steps);
      try {
        map = self_attention_map(s->result.records, layer, step, s->frames);
      } catch (const RangeError& e) {
        throw ApiError(404, e.what());
      }
    } else if (body.contains("attention")) {
      try {
        const auto rows = body.at("attention").get<std::vector<std::vector<double>>>();
        if (rows.empty()) throw ApiError(400, "attention payload is empty");
        map.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
        for (std::size_t i = 0; i < rows.size(); ++i) {
          if (rows[i].size() != rows[0].size()) throw ApiError(400, "attention payload is ragged");
          for (std::size_t j = 0; j < rows[i].size(); ++j) map(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
        }
      } catch (const nlohmann::json::exception&) {
        throw ApiError(400, "attention must be a 2-D number array");
      }
    } else {
      throw ApiError(400, "count needs id or attention");
    }
    const auto res = count_actions_detailed(map, cfg);
    return {{"count", res.count}, {"per_row_peaks", res.per_row_peaks}, {"config", cfg.to_json()}};
  }

  // Registers every route (plus CORS and optional static files) on `server`.
  void mount(httplib::Server& server, const std::string& static_dir = "") {
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Allow-Headers", "Content-Type"},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    for (const std::string prefix : {"/api/v1", "/api"}) {
      server.Get(prefix + "/health", wrap([this](const httplib::Request&) { return health(); }));
      server.Post(prefix + "/generate", wrap([this](const httplib::Request& r) { return generate(parse(r.body)); }));
      server.Post(prefix + "/edit", wrap([this](const httplib::Request& r) { return edit(parse(r.body)); }));
      server.Post(prefix + "/count", wrap([this](const httplib::Request& r) { return count(parse(r.body)); }));
      server.Get(prefix + R"(/attention/([A-Za-z0-9_-]+))", wrap([this](const httplib::Request& r) {
                   std::map<std::string, std::string> q;
                   for (const auto& [k, v] : r.params) q[k] = v;
                   return attention(r.matches[1], q);
                 }));
    }
    if (!static_dir.empty() && !server.set_mount_point("/", static_dir)) {
      throw DataError("static directory " + static_dir + " not found");
    }
  }

 private:
  struct Request {
    std::string prompt;
    std::uint64_t seed = 0;
    int frames = kDefaultFrames;
    double cfg_weight = 2.5;
  };

  template <class T>
  static T field(const nlohmann::json& j, const char* key) {
    if (!j.contains(key)) throw ApiError(400, std::string("missing field '") + key + "'");
    try {
      return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ApiError(400, std::string("field '") + key + "' has the wrong type");
    }
  }

  template <class T>
  static T field_or(const nlohmann::json& j, const char* key, T fallback) {
    return j.contains(key) ? field<T>(j, key) : fallback;
  }

  Request base_request(const nlohmann::json& j) const {
    if (!j.is_object()) throw ApiError(400, "request body must be a JSON object");
    Request r;
    r.prompt = field<std::string>(j, "prompt");
    r.seed = field_or<std::uint64_t>(j, "seed", 0);
    r.frames = field_or<int>(j, "frames", kDefaultFrames);
    r.cfg_weight = field_or<double>(j, "cfg_weight", diffusion_.cfg_weight);
    return r;
  }

  std::shared_ptr<const StoredSession> lookup(const std::string& id) {
    auto s = sessions_.get(id);
    if (!s) throw ApiError(404, "unknown session id '" + id + "'");
    return s;
  }

  static nlohmann::json word_tokens(const PromptTokens& t) {
    nlohmann::json out = nlohmann::json::array({"<bos>"});
    for (const auto& w : t.words) out.push_back(w);
    return out;
  }

  static int parse_int(const std::string& s, const char* what) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ApiError(400, std::string(what) + " must be an integer");
    }
  }

  static nlohmann::json parse(const std::string& body) {
    try {
      return nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception&) {
      throw ApiError(400, "request body is not valid JSON");
    }
  }

  template <class F>
  static httplib::Server::Handler wrap(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
      int status = 200;
      nlohmann::json body;
      try {
        body = f(req);
      } catch (const ApiError& e) {
        status = e.status;
        body = {{"error", e.what()}};
      } catch (const RangeError& e) {
        status = 422;
        body = {{"error", e.what()}};
      } catch (const DataError& e) {
        status = 400;
        body = {{"error", e.what()}};
      } catch (const NumericError& e) {
        status = 500;
        body = {{"error", "numeric failure"}, {"diagnostic", e.what()}};
      } catch (const std::exception& e) {
        status = 500;
        body = {{"error", "internal error"}, {"diagnostic", e.what()}};
      }
      res.status = status;
      res.set_content(body.dump(), "application/json");
    };
  }

  Denoiser<float> model_;
  NormStats stats_;
  DiffusionConfig diffusion_;
  std::string hash_;
  SessionStore sessions_;
};

}  // namespace mclr
