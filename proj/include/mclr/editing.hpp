#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "mclr/diffusion.hpp"

namespace mclr {

enum class EmphasisMode { additive, multiplicative };

struct Emphasize {
  int word_index = 0;
  double weight = 0.0;
  EmphasisMode mode = EmphasisMode::additive;
};

struct Erase {
  int word_index = 0;
  double factor = 0.1;
};

// Edited sample is sampled from `prompt` (empty: the base prompt) while its
// cross-attention maps are copied from the reference.
struct Replace {
  std::string prompt;
  int steps_end = 5;
  int layer_begin = 1;
  int layer_end = 12;
};

struct Shift {
  double ratio = 0.5;
  int steps_end = 5;
};

struct ExampleGen {
  int chunk_size = 20;
  std::uint64_t seed = 0;
  std::uint64_t seed_bar = 1;
  int trigger_step = 5;
  int samples = 1;
};

// Index 0 renders `style_prompt` (empty: the base prompt), index 1 the base
// prompt as content.
struct StyleTransfer {
  std::string style_prompt;
  int steps_end = 5;
};

// Additive per-frame weights, frames x tokens (BOS column included).
struct Ground {
  MatF mask;
};

using EditDirective = std::variant<Emphasize, Erase, Replace, Shift, ExampleGen, StyleTransfer, Ground>;

inline std::string op_name(const EditDirective& d) {
  static const char* names[] = {"emphasize", "erase", "replace", "shift", "example", "style", "ground"};
  return names[d.index()];
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const EditDirective& d) {
  nlohmann::json j;
  j["op"] = op_name(d);
  std::visit(
      [&j](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Emphasize>) {
          j["word_index"] = v.word_index;
          j["weight"] = v.weight;
          j["mode"] = v.mode == EmphasisMode::additive ? "additive" : "multiplicative";
        } else if constexpr (std::is_same_v<T, Erase>) {
          j["word_index"] = v.word_index;
          j["factor"] = v.factor;
        } else if constexpr (std::is_same_v<T, Replace>) {
          j["prompt"] = v.prompt;
          j["steps_end"] = v.steps_end;
          j["layer_begin"] = v.layer_begin;
          j["layer_end"] = v.layer_end;
        } else if constexpr (std::is_same_v<T, Shift>) {
          j["ratio"] = v.ratio;
          j["steps_end"] = v.steps_end;
        } else if constexpr (std::is_same_v<T, ExampleGen>) {
          j["chunk_size"] = v.chunk_size;
          j["seed"] = v.seed;
          j["seed_bar"] = v.seed_bar;
          j["trigger_step"] = v.trigger_step;
          j["samples"] = v.samples;
        } else if constexpr (std::is_same_v<T, StyleTransfer>) {
          j["style_prompt"] = v.style_prompt;
          j["steps_end"] = v.steps_end;
        } else {
          nlohmann::json rows = nlohmann::json::array();
          for (Eigen::Index r = 0; r < v.mask.rows(); ++r) {
            std::vector<float> row(v.mask.row(r).data(), v.mask.row(r).data() + v.mask.cols());
            rows.push_back(row);
          }
          j["mask"] = rows;
        }
      },
      d);
  return j;
}

namespace detail {

template <class T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw RangeError(std::string("directive field '") + key + "' has the wrong type");
  }
}

}  // namespace detail

inline EditDirective directive_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("op") || !j.at("op").is_string()) throw RangeError("directive needs a string 'op'");
  const std::string op = j.at("op").get<std::string>();
  using detail::get_or;
  if (op == "emphasize") {
    Emphasize e;
    e.word_index = get_or(j, "word_index", e.word_index);
    e.weight = get_or(j, "weight", e.weight);
    const std::string mode = get_or<std::string>(j, "mode", "additive");
    if (mode == "additive") {
      e.mode = EmphasisMode::additive;
    } else if (mode == "multiplicative") {
      e.mode = EmphasisMode::multiplicative;
    } else {
      throw RangeError("emphasize: unknown mode '" + mode + "'");
    }
    return e;
  }
  if (op == "erase") {
    Erase e;
    e.word_index = get_or(j, "word_index", e.word_index);
    e.factor = get_or(j, "factor", e.factor);
    return e;
  }
  if (op == "replace") {
    Replace r;
    r.prompt = get_or(j, "prompt", r.prompt);
    r.steps_end = get_or(j, "steps_end", r.steps_end);
    r.layer_begin = get_or(j, "layer_begin", r.layer_begin);
    r.layer_end = get_or(j, "layer_end", r.layer_end);
    return r;
  }
  if (op == "shift") {
    Shift s;
    s.ratio = get_or(j, "ratio", s.ratio);
    s.steps_end = get_or(j, "steps_end", s.steps_end);
    return s;
  }
  if (op == "example") {
    ExampleGen e;
    e.chunk_size = get_or(j, "chunk_size", e.chunk_size);
    e.seed = get_or(j, "seed", e.seed);
    e.seed_bar = get_or(j, "seed_bar", e.seed_bar);
    e.trigger_step = get_or(j, "trigger_step", e.trigger_step);
    e.samples = get_or(j, "samples", e.samples);
    return e;
  }
  if (op == "style") {
    StyleTransfer s;
    s.style_prompt = get_or(j, "style_prompt", s.style_prompt);
    s.steps_end = get_or(j, "steps_end", s.steps_end);
    return s;
  }
  if (op == "ground") {
    if (!j.contains("mask") || !j.at("mask").is_array() || j.at("mask").empty()) throw RangeError("ground: mask required");
    const auto& rows = j.at("mask");
    const auto cols = rows.at(0).size();
    Ground g;
    g.mask.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (!rows[r].is_array() || rows[r].size() != cols) throw RangeError("ground: ragged mask");
      for (std::size_t c = 0; c < cols; ++c) {
        g.mask(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c].get<float>();
      }
    }
    return g;
  }
  throw RangeError("unknown directive op '" + op + "'");
}

// ---------------------------------------------------------------------------
// Map and feature edits
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
Eigen::Index word_column(const Mat<S>& map, int word_index) {
  const Eigen::Index col = PromptTokens::column_of(word_index);
  if (word_index < 0 || col >= map.cols()) {
    throw RangeError("word index " + std::to_string(word_index) + " has no attention column (map has " +
                     std::to_string(map.cols()) + " columns)");
  }
  return col;
}

}  // namespace detail

// Post-softmax edit of the column for word `word_index`; rows are not
// renormalized.
template <class S>
Mat<S> reweight_cross(const Mat<S>& map, int word_index, double weight, EmphasisMode mode) {
  const Eigen::Index col = detail::word_column(map, word_index);
  Mat<S> out = map;
  if (mode == EmphasisMode::additive) {
    out.col(col).array() += static_cast<S>(weight);
  } else {
    out.col(col) *= static_cast<S>(weight);
  }
  return out;
}

template <class S>
Mat<S> erase(const Mat<S>& map, int word_index, double factor = 0.1) {
  return reweight_cross(map, word_index, factor, EmphasisMode::multiplicative);
}

template <class S>
Mat<S> ground(const Mat<S>& map, const Mat<S>& mask) {
  if (map.rows() != mask.rows() || map.cols() != mask.cols()) {
    throw RangeError("ground: mask is " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                     ", map is " + std::to_string(map.rows()) + "x" + std::to_string(map.cols()));
  }
  if ((mask.array() < S(0)).any()) throw RangeError("ground: mask must be non-negative");
  return map + mask;
}

// Copies the reference sample's maps (index 0) over the edited sample's.
template <class S>
void replace_cross_map(std::vector<HeadMaps<S>>& maps) {
  if (maps.size() != 2) throw RangeError("replace needs a batch of 2");
  maps[1] = maps[0];
}

// Length of the trailing segment that moves to the front: floor(rows * (1 -
// ratio)), evaluated as rows - ceil(rows * ratio) with a small tolerance so
// splits that are integral in exact arithmetic stay integral.
inline Eigen::Index shift_back_length(Eigen::Index rows, double ratio) {
  const auto front = static_cast<Eigen::Index>(std::ceil(static_cast<double>(rows) * ratio - 1e-9));
  return rows - std::clamp<Eigen::Index>(front, 0, rows);
}

// concat(back segment, front segment): a circular rotation of the rows.
template <class S>
Mat<S> shift_rows(const Mat<S>& m, double ratio) {
  if (ratio < 0.0 || ratio > 1.0) throw RangeError("shift: ratio must lie in [0, 1]");
  const Eigen::Index back = shift_back_length(m.rows(), ratio);
  const Eigen::Index front = m.rows() - back;
  Mat<S> out(m.rows(), m.cols());
  out.topRows(back) = m.bottomRows(back);
  out.bottomRows(front) = m.topRows(front);
  return out;
}

template <class S>
struct Qkv {
  Mat<S> q, k, v;
};

template <class S>
Qkv<S> shift_qkv(const Mat<S>& q, const Mat<S>& k, const Mat<S>& v, double ratio) {
  return {shift_rows(q, ratio), shift_rows(k, ratio), shift_rows(v, ratio)};
}

// Chunk order used for generated sample `sample` (0-based).
inline std::vector<int> chunk_permutation(int chunks, std::uint64_t seed, std::uint64_t seed_bar, int sample) {
  Rng rng(seed + static_cast<std::uint64_t>(sample) * seed_bar);
  return rng.permutation(chunks);
}

// Splits rows into consecutive chunks of `chunk_rows` (the last may be
// shorter) and concatenates them in `order`.
template <class S>
Mat<S> shuffle_query_chunks(const Mat<S>& q, Eigen::Index chunk_rows, const std::vector<int>& order) {
  if (chunk_rows < 1) throw RangeError("example: chunk size must be >= 1");
  if (chunk_rows > q.rows()) throw RangeError("example: chunk size exceeds sequence length");
  const auto chunks = static_cast<std::size_t>((q.rows() + chunk_rows - 1) / chunk_rows);
  if (order.size() != chunks) throw RangeError("example: permutation size mismatch");
  Mat<S> out(q.rows(), q.cols());
  Eigen::Index r = 0;
  for (int c : order) {
    const Eigen::Index begin = static_cast<Eigen::Index>(c) * chunk_rows;
    const Eigen::Index len = std::min(chunk_rows, q.rows() - begin);
    out.middleRows(r, len) = q.middleRows(begin, len);
    r += len;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hooks
// ---------------------------------------------------------------------------

// Cross-attention column edit on the edited sample (index `target`).
template <class S>
class ReweightHook : public AttentionHook<S> {
 public:
  ReweightHook(int word_index, double weight, EmphasisMode mode, int target = 1)
      : word_(word_index), weight_(weight), mode_(mode), target_(target) {}

  void after_softmax(const AttentionSite& site, std::vector<HeadMaps<S>>& maps) override {
    if (site.kind != AttentionKind::cross_attention || !site.conditional) return;
    if (static_cast<std::size_t>(target_) >= maps.size()) return;
    for (auto& m : maps[static_cast<std::size_t>(target_)]) m = reweight_cross(m, word_, weight_, mode_);
  }

 private:
  int word_;
  double weight_;
  EmphasisMode mode_;
  int target_;
};

template <class S>
class ReplaceHook : public AttentionHook<S> {
 public:
  explicit ReplaceHook(const Replace& r) : r_(r) {}

  void after_softmax(const AttentionSite& site, std::vector<HeadMaps<S>>& maps) override {
    if (site.kind != AttentionKind::cross_attention || !site.conditional) return;
    if (site.step > r_.steps_end || site.layer < r_.layer_begin || site.layer > r_.layer_end) return;
    replace_cross_map(maps);
  }

 private:
  Replace r_;
};

template <class S>
class ShiftHook : public AttentionHook<S> {
 public:
  explicit ShiftHook(const Shift& s) : s_(s) {}

  void before_similarity(const AttentionSite& site, Batch<S>& q, Batch<S>& k, Batch<S>& v) override {
    if (site.kind != AttentionKind::self_attention || site.step > s_.steps_end || q.size() < 2) return;
    q[1] = shift_rows(q[0], s_.ratio);
    k[1] = shift_rows(k[0], s_.ratio);
    v[1] = shift_rows(v[0], s_.ratio);
  }

 private:
  Shift s_;
};

// Fires once, at `trigger_step`. Chunk length scales with the layer's
// temporal resolution so a chunk covers the same span of the motion.
template <class S>
class ExampleHook : public AttentionHook<S> {
 public:
  ExampleHook(const ExampleGen& e, int frames) : e_(e), frames_(frames) {}

  void before_similarity(const AttentionSite& site, Batch<S>& q, Batch<S>&, Batch<S>&) override {
    if (site.kind != AttentionKind::self_attention || site.step != e_.trigger_step) return;
    const Eigen::Index rows = q[0].rows();
    const Eigen::Index chunk = chunk_rows(rows);
    const auto chunks = static_cast<int>((rows + chunk - 1) / chunk);
    for (std::size_t i = 1; i < q.size(); ++i) {
      q[i] = shuffle_query_chunks(q[0], chunk, chunk_permutation(chunks, e_.seed, e_.seed_bar, static_cast<int>(i) - 1));
    }
  }

  Eigen::Index chunk_rows(Eigen::Index layer_rows) const {
    const auto scaled = (static_cast<long long>(e_.chunk_size) * layer_rows + frames_ - 1) / frames_;
    return std::clamp<Eigen::Index>(static_cast<Eigen::Index>(scaled), 1, layer_rows);
  }

 private:
  ExampleGen e_;
  int frames_;
};

template <class S>
class StyleHook : public AttentionHook<S> {
 public:
  explicit StyleHook(const StyleTransfer& s) : s_(s) {}

  void before_similarity(const AttentionSite& site, Batch<S>& q, Batch<S>&, Batch<S>&) override {
    if (site.kind != AttentionKind::self_attention || site.step > s_.steps_end) return;
    if (q.size() != 2) throw RangeError("style transfer needs a batch of 2");
    q[1] = q[0];
  }

 private:
  StyleTransfer s_;
};

// Adds the frame mask, resampled to the layer's resolution, to every head of
// the edited sample. Rows past the motion's end repeat its last mask row.
template <class S>
class GroundHook : public AttentionHook<S> {
 public:
  explicit GroundHook(const MatF& mask) : mask_(mask.template cast<S>()) {}

  void after_softmax(const AttentionSite& site, std::vector<HeadMaps<S>>& maps) override {
    if (site.kind != AttentionKind::cross_attention || !site.conditional || maps.size() < 2) return;
    const Mat<S> m = resample(maps[1].front().rows());
    for (auto& h : maps[1]) h = ground(h, m);
  }

  Mat<S> resample(Eigen::Index rows) const {
    const Eigen::Index padded = (mask_.rows() + 3) / 4 * 4;
    const Eigen::Index stride = std::max<Eigen::Index>(1, padded / rows);
    Mat<S> out = Mat<S>::Zero(rows, mask_.cols());
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index s = 0; s < stride; ++s) out.row(r) += mask_.row(std::min(r * stride + s, mask_.rows() - 1));
      if (stride > 1) out.row(r) /= static_cast<S>(stride);
    }
    return out;
  }

 private:
  Mat<S> mask_;
};

// ---------------------------------------------------------------------------
// Sessions
// ---------------------------------------------------------------------------

struct EditBase {
  std::string prompt;
  std::uint64_t seed = 0;
  int frames = kDefaultFrames;
};

struct EditSession {
  GenerationResult reference;
  GenerationResult edited;
  std::vector<GenerationResult> generated;  // every non-reference sample
  EditDirective directive;
};

namespace detail {

inline void require_steps(const char* what, int steps_end, int sample_steps) {
  if (steps_end < 0 || steps_end > sample_steps) {
    throw RangeError(std::string(what) + ": steps_end must lie in [0, " + std::to_string(sample_steps) + "]");
  }
}

}  // namespace detail

// Rejects malformed directives before any sampling happens. `edited` is the
// token sequence the edited sample is conditioned on.
inline void validate(const EditDirective& d, const PromptTokens& edited, int frames, int sample_steps,
                     int attention_layers) {
  auto check_word = [&](int w) {
    if (w < 0 || w >= static_cast<int>(edited.words.size())) {
      throw RangeError("word_index " + std::to_string(w) + " out of range for a " +
                       std::to_string(edited.words.size()) + "-word prompt");
    }
  };
  std::visit(
      [&](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Emphasize>) {
          check_word(v.word_index);
          if (!(v.weight >= -1.0 && v.weight <= 1.0)) throw RangeError("emphasize: weight must lie in [-1, 1]");
        } else if constexpr (std::is_same_v<T, Erase>) {
          check_word(v.word_index);
          if (!std::isfinite(v.factor)) throw RangeError("erase: factor must be finite");
        } else if constexpr (std::is_same_v<T, Replace>) {
          detail::require_steps("replace", v.steps_end, sample_steps);
          if (v.layer_begin < 1 || v.layer_begin > attention_layers || v.layer_end < 0 ||
              v.layer_end > attention_layers) {
            throw RangeError("replace: layers must lie in [1, " + std::to_string(attention_layers) + "]");
          }
        } else if constexpr (std::is_same_v<T, Shift>) {
          detail::require_steps("shift", v.steps_end, sample_steps);
          if (!(v.ratio >= 0.0 && v.ratio <= 1.0)) throw RangeError("shift: ratio must lie in [0, 1]");
        } else if constexpr (std::is_same_v<T, ExampleGen>) {
          if (v.chunk_size < 1) throw RangeError("example: chunk_size must be >= 1");
          if (v.chunk_size > frames) throw RangeError("example: chunk_size exceeds the frame count");
          if (v.trigger_step < 1 || v.trigger_step > sample_steps) {
            throw RangeError("example: trigger_step must lie in [1, " + std::to_string(sample_steps) + "]");
          }
          if (v.samples < 1 || v.samples > 16) throw RangeError("example: samples must lie in [1, 16]");
        } else if constexpr (std::is_same_v<T, StyleTransfer>) {
          detail::require_steps("style", v.steps_end, sample_steps);
        } else {
          if (v.mask.rows() != frames || v.mask.cols() != edited.length()) {
            throw RangeError("ground: mask must be " + std::to_string(frames) + "x" + std::to_string(edited.length()));
          }
          if (!all_finite(v.mask) || (v.mask.array() < 0.0f).any()) {
            throw RangeError("ground: mask must be finite and non-negative");
          }
        }
      },
      d);
}

// Prompts for every batch index: reference first, then the edited sample(s).
inline std::vector<std::pair<std::string, PromptTokens>> edit_prompts(const EditBase& base, const EditDirective& d) {
  const auto entry = [](const std::string& p) { return std::make_pair(p, tokenize(p)); };
  if (const auto* r = std::get_if<Replace>(&d)) {
    auto ref = entry(base.prompt);
    auto edited = entry(r->prompt.empty() ? base.prompt : r->prompt);
    if (ref.second.length() != edited.second.length()) {
      throw RangeError("replace: prompts must have the same number of words (" +
                       std::to_string(ref.second.words.size()) + " vs " + std::to_string(edited.second.words.size()) + ")");
    }
    return {ref, edited};
  }
  if (const auto* s = std::get_if<StyleTransfer>(&d)) {
    return {entry(s->style_prompt.empty() ? base.prompt : s->style_prompt), entry(base.prompt)};
  }
  if (const auto* e = std::get_if<ExampleGen>(&d)) {
    return std::vector<std::pair<std::string, PromptTokens>>(static_cast<std::size_t>(e->samples) + 1, entry(base.prompt));
  }
  return {entry(base.prompt), entry(base.prompt)};
}

template <class S>
std::unique_ptr<AttentionHook<S>> make_hook(const EditDirective& d, int frames) {
  return std::visit(
      [frames](const auto& v) -> std::unique_ptr<AttentionHook<S>> {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Emphasize>) {
          return std::make_unique<ReweightHook<S>>(v.word_index, v.weight, v.mode);
        } else if constexpr (std::is_same_v<T, Erase>) {
          return std::make_unique<ReweightHook<S>>(v.word_index, v.factor, EmphasisMode::multiplicative);
        } else if constexpr (std::is_same_v<T, Replace>) {
          return std::make_unique<ReplaceHook<S>>(v);
        } else if constexpr (std::is_same_v<T, Shift>) {
          return std::make_unique<ShiftHook<S>>(v);
        } else if constexpr (std::is_same_v<T, ExampleGen>) {
          return std::make_unique<ExampleHook<S>>(v, frames);
        } else if constexpr (std::is_same_v<T, StyleTransfer>) {
          return std::make_unique<StyleHook<S>>(v);
        } else {
          return std::make_unique<GroundHook<S>>(v.mask);
        }
      },
      d);
}

// Samples the reference and edited motions together from one noise draw with
// the directive's hook installed.
template <class S>
EditSession run_edit(const Denoiser<S>& model, const NormStats& stats, const EditBase& base,
                     const EditDirective& directive, const DiffusionConfig& cfg, bool record_attention = true) {
  cfg.validate();
  const auto prompts = edit_prompts(base, directive);
  validate(directive, prompts[1].second, base.frames, cfg.sample_steps, model.config().attention_layers());
  auto hook = make_hook<S>(directive, base.frames);
  SampleOptions opt;
  opt.frames = base.frames;
  opt.seed = base.seed;
  opt.record_attention = record_attention;
  auto results = ddim_sample(model, stats, prompts, cfg, opt, {hook.get()});
  EditSession s;
  s.directive = directive;
  const nlohmann::json dj = nlohmann::json::array({to_json(directive)});
  for (std::size_t i = 1; i < results.size(); ++i) results[i].directives = dj;
  s.reference = std::move(results[0]);
  s.generated.assign(std::make_move_iterator(results.begin() + 1), std::make_move_iterator(results.end()));
  s.edited = s.generated.front();
  return s;
}

// Mean cross-attention mass per prompt column over every conditional-pass
// record (all layers, steps and heads); post-edit maps where edited.
inline std::vector<double> cross_column_mass(const std::vector<AttentionRecord>& records, int columns) {
  std::vector<double> mass(static_cast<std::size_t>(columns), 0.0);
  int n = 0;
  for (const auto& r : records) {
    if (r.kind != AttentionKind::cross_attention || !r.conditional) continue;
    const MatF& m = r.effective();
    for (int c = 0; c < columns && c < m.cols(); ++c) mass[static_cast<std::size_t>(c)] += m.col(c).cast<double>().mean();
    ++n;
  }
  if (n > 0) {
    for (double& v : mass) v /= n;
  }
  return mass;
}

// Per-frame feature deltas (L2 over features) and per-column attention mass
// deltas between the edited and reference samples.
inline nlohmann::json diff_report(const EditSession& s) {
  const MatF& a = s.reference.motion.features;
  const MatF& b = s.edited.motion.features;
  std::vector<double> frame_delta(static_cast<std::size_t>(a.rows()), 0.0);
  double max_delta = 0.0;
  for (Eigen::Index f = 0; f < a.rows(); ++f) {
    const double d = (b.row(f) - a.row(f)).cast<double>().norm();
    frame_delta[static_cast<std::size_t>(f)] = d;
    max_delta = std::max(max_delta, d);
  }
  const int cols = std::max(s.reference.tokens.length(), s.edited.tokens.length());
  const auto ref_mass = cross_column_mass(s.reference.records, cols);
  const auto edit_mass = cross_column_mass(s.edited.records, cols);
  std::vector<double> mass_delta(static_cast<std::size_t>(cols));
  for (std::size_t c = 0; c < mass_delta.size(); ++c) mass_delta[c] = edit_mass[c] - ref_mass[c];
  std::vector<std::string> columns{"<bos>"};
  for (const auto& w : s.edited.tokens.words) columns.push_back(w);
  return {{"frame_feature_delta", frame_delta},
          {"max_frame_feature_delta", max_delta},
          {"columns", columns},
          {"column_mass_reference", ref_mass},
          {"column_mass_edited", edit_mass},
          {"column_mass_delta", mass_delta}};
}

}  // namespace mclr
