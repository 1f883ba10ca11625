#pragma once

// CLR blocks and the three-level U-Net denoiser.
//
// A CLR block is four pre-norm residual sublayers:
//   conv      depthwise temporal convolution + projected timestep embedding
//   self      multi-head self-attention over frames
//   cross     multi-head cross-attention from frames to prompt tokens
//   ffn       width -> ffn_mult*width -> width with SiLU
//
// The U-Net runs two CLR blocks at full resolution, average-pools frames by
// two into a wider bottleneck of two more blocks, then upsamples, merges the
// skip connection and finishes with two decoder blocks. Attention layers are
// numbered 1..12 in forward order (self, cross, self, cross, ...).

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mclr/attention.hpp"
#include "mclr/autograd.hpp"
#include "mclr/corpus.hpp"
#include "mclr/rng.hpp"
#include "mclr/text.hpp"

namespace mclr {

struct ModelConfig {
  int feature_dim = kFeatureDim;
  int width = 64;
  int bottleneck_width = 128;
  int text_width = 64;
  int time_width = 128;
  int heads = 4;
  int ffn_mult = 2;
  int blocks_per_level = 2;
  int max_tokens = kMaxTokens;
  int vocab_size = 0;
  bool zero_output = true;

  int attention_layers() const { return 3 * blocks_per_level * 2; }

  nlohmann::json to_json() const {
    return {{"feature_dim", feature_dim}, {"width", width},         {"bottleneck_width", bottleneck_width},
            {"text_width", text_width},   {"time_width", time_width}, {"heads", heads},
            {"ffn_mult", ffn_mult},       {"blocks_per_level", blocks_per_level},
            {"max_tokens", max_tokens},   {"vocab_size", vocab_size}, {"zero_output", zero_output}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.feature_dim = j.at("feature_dim").get<int>();
    c.width = j.at("width").get<int>();
    c.bottleneck_width = j.at("bottleneck_width").get<int>();
    c.text_width = j.at("text_width").get<int>();
    c.time_width = j.at("time_width").get<int>();
    c.heads = j.at("heads").get<int>();
    c.ffn_mult = j.at("ffn_mult").get<int>();
    c.blocks_per_level = j.at("blocks_per_level").get<int>();
    c.max_tokens = j.at("max_tokens").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.zero_output = j.value("zero_output", true);
    return c;
  }

  void validate() const {
    if (width % heads != 0 || bottleneck_width % heads != 0) throw RangeError("model widths must divide by head count");
    if (vocab_size < 2) throw RangeError("model vocabulary too small");
    if (blocks_per_level < 1) throw RangeError("blocks_per_level must be >= 1");
  }
};

template <class S>
struct Parameter {
  std::string name;
  Mat<S> value;
  Mat<S> grad;
};

template <class S>
class ParameterSet {
 public:
  int add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (index_.count(name) != 0) throw RangeError("duplicate parameter " + name);
    params_.push_back({name, Mat<S>::Zero(rows, cols), Mat<S>::Zero(rows, cols)});
    index_[name] = static_cast<int>(params_.size()) - 1;
    return static_cast<int>(params_.size()) - 1;
  }

  Parameter<S>& operator[](int i) { return params_[static_cast<std::size_t>(i)]; }
  const Parameter<S>& operator[](int i) const { return params_[static_cast<std::size_t>(i)]; }

  Parameter<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[static_cast<std::size_t>(it->second)];
  }

  int size() const { return static_cast<int>(params_.size()); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero();
  }

 private:
  std::vector<Parameter<S>> params_;
  std::map<std::string, int> index_;
};

// Hook state for one forward pass of the sampler.
template <class S>
struct ForwardHooks {
  int step = 0;
  bool conditional = true;
  std::vector<AttentionHook<S>*> hooks;
  AttentionObserver<S>* observer = nullptr;
};

struct AttentionRecord {
  AttentionKind kind = AttentionKind::self_attention;
  int layer = 0;
  int step = 0;
  int head = 0;
  bool conditional = true;
  MatF map;                   // post-softmax, pre-edit
  std::optional<MatF> edited;  // set when a hook changed the map
  const MatF& effective() const { return edited ? *edited : map; }
};

// Keeps the maps of every sample, per head; unconditional-pass maps only
// when asked to.
template <class S>
class AttentionRecorder : public AttentionObserver<S> {
 public:
  explicit AttentionRecorder(int samples, bool keep_unconditional = false)
      : records_(static_cast<std::size_t>(samples)), keep_unconditional_(keep_unconditional) {}

  void observe(const AttentionSite& site, int sample, const HeadMaps<S>& pre, const HeadMaps<S>* edited) override {
    if (!site.conditional && !keep_unconditional_) return;
    auto& out = records_[static_cast<std::size_t>(sample)];
    for (std::size_t h = 0; h < pre.size(); ++h) {
      AttentionRecord r;
      r.kind = site.kind;
      r.layer = site.layer;
      r.step = site.step;
      r.head = static_cast<int>(h);
      r.conditional = site.conditional;
      r.map = pre[h].template cast<float>();
      if (edited != nullptr) r.edited = (*edited)[h].template cast<float>();
      out.push_back(std::move(r));
    }
  }

  std::vector<AttentionRecord>& sample(int i) { return records_[static_cast<std::size_t>(i)]; }
  std::vector<std::vector<AttentionRecord>> take() { return std::move(records_); }

 private:
  std::vector<std::vector<AttentionRecord>> records_;
  bool keep_unconditional_;
};

// Sinusoidal features of a scalar position, `dim` wide (sin half, cos half).
template <class S>
Mat<S> sinusoid_row(double position, int dim) {
  Mat<S> row(1, dim);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half));
    row(0, i) = static_cast<S>(std::sin(position * freq));
    row(0, half + i) = static_cast<S>(std::cos(position * freq));
  }
  if (dim % 2 == 1) row(0, dim - 1) = S(0);
  return row;
}

template <class S>
Mat<S> frame_encoding(int frames, int dim) {
  Mat<S> pe(frames, dim);
  for (int f = 0; f < frames; ++f) pe.row(f) = sinusoid_row<S>(f, dim);
  return pe;
}

struct ClrBlockIndex {
  int width = 0;
  int ln_conv_g, ln_conv_b, conv_w, conv_b, time_w, time_b;
  int ln_self_g, ln_self_b, self_q, self_k, self_v, self_out, self_out_b;
  int ln_cross_g, ln_cross_b, text_ln_g, text_ln_b, cross_q, cross_k, cross_v, cross_out, cross_out_b;
  int ln_ffn_g, ln_ffn_b, ffn_in, ffn_in_b, ffn_out, ffn_out_b;
};

template <class S>
class Denoiser {
 public:
  Denoiser() = default;

  Denoiser(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    build();
    initialize(seed);
  }

  const ModelConfig& config() const { return config_; }
  ParameterSet<S>& params() { return params_; }
  const ParameterSet<S>& params() const { return params_; }
  int attention_layers() const { return static_cast<int>(blocks_.size()) * 2; }
  const std::vector<ClrBlockIndex>& blocks() const { return blocks_; }

  // Width of the motion features at attention layer `layer` (1-based).
  int layer_width(int layer) const { return blocks_.at(static_cast<std::size_t>((layer - 1) / 2)).width; }
  // Frame downsampling factor at attention layer `layer`.
  int layer_stride(int layer) const {
    const int block = (layer - 1) / 2;
    const int level = block / config_.blocks_per_level;
    return level == 1 ? 2 : 1;
  }

  // Frames after padding to a multiple of four.
  static int padded_frames(int frames) { return (frames + 3) / 4 * 4; }

  ag::Var param(ag::Tape<S>& t, int idx, bool track) const {
    auto& p = const_cast<Parameter<S>&>(params_[idx]);
    return t.parameter(p.value, track ? &p.grad : nullptr);
  }

  // Timestep injection: depthwise temporal conv of x plus the projected
  // timestep embedding broadcast over frames.
  ag::Var timestep_inject(ag::Tape<S>& t, const ClrBlockIndex& b, ag::Var x, ag::Var temb, bool track) const {
    ag::Var y = ag::depthwise_conv3(t, x, param(t, b.conv_w, track), param(t, b.conv_b, track));
    ag::Var proj = ag::linear(t, temb, param(t, b.time_w, track), param(t, b.time_b, track));
    return ag::add_row(t, y, proj);
  }

  ag::Var self_attention(ag::Tape<S>& t, const ClrBlockIndex& b, ag::Var x, int layer, const ForwardHooks<S>* hooks,
                         bool track) const {
    ag::Var a = ag::layer_norm(t, x, param(t, b.ln_self_g, track), param(t, b.ln_self_b, track));
    ag::Var q = ag::linear(t, a, param(t, b.self_q, track));
    ag::Var k = ag::linear(t, a, param(t, b.self_k, track));
    ag::Var v = ag::linear(t, a, param(t, b.self_v, track));
    ag::Var o = attend(t, q, k, v, AttentionKind::self_attention, layer, hooks);
    o = ag::linear(t, o, param(t, b.self_out, track), param(t, b.self_out_b, track));
    return ag::add(t, x, o);
  }

  ag::Var cross_attention(ag::Tape<S>& t, const ClrBlockIndex& b, ag::Var x, ag::Var c, int layer,
                          const ForwardHooks<S>* hooks, bool track) const {
    ag::Var a = ag::layer_norm(t, x, param(t, b.ln_cross_g, track), param(t, b.ln_cross_b, track));
    ag::Var ct = ag::layer_norm(t, c, param(t, b.text_ln_g, track), param(t, b.text_ln_b, track));
    ag::Var q = ag::linear(t, a, param(t, b.cross_q, track));
    ag::Var k = ag::linear(t, ct, param(t, b.cross_k, track));
    ag::Var v = ag::linear(t, ct, param(t, b.cross_v, track));
    ag::Var o = attend(t, q, k, v, AttentionKind::cross_attention, layer, hooks);
    o = ag::linear(t, o, param(t, b.cross_out, track), param(t, b.cross_out_b, track));
    return ag::add(t, x, o);
  }

  // One CLR block; `layer` is the 1-based index of its self-attention layer
  // (its cross-attention is layer + 1).
  ag::Var clr_block(ag::Tape<S>& t, const ClrBlockIndex& b, ag::Var x, ag::Var c, ag::Var temb, int layer,
                    const ForwardHooks<S>* hooks, bool track) const {
    ag::Var a = ag::layer_norm(t, x, param(t, b.ln_conv_g, track), param(t, b.ln_conv_b, track));
    x = ag::add(t, x, timestep_inject(t, b, a, temb, track));
    x = self_attention(t, b, x, layer, hooks, track);
    x = cross_attention(t, b, x, c, layer + 1, hooks, track);
    a = ag::layer_norm(t, x, param(t, b.ln_ffn_g, track), param(t, b.ln_ffn_b, track));
    a = ag::linear(t, a, param(t, b.ffn_in, track), param(t, b.ffn_in_b, track));
    a = ag::silu(t, a);
    a = ag::linear(t, a, param(t, b.ffn_out, track), param(t, b.ffn_out_b, track));
    return ag::add(t, x, a);
  }

  ag::Var time_embedding(ag::Tape<S>& t, const std::vector<int>& timesteps, bool track) const {
    Batch<S> rows;
    rows.reserve(timesteps.size());
    for (int ts : timesteps) rows.push_back(sinusoid_row<S>(ts, config_.time_width));
    ag::Var e = t.constant(std::move(rows));
    e = ag::linear(t, e, param(t, time_mlp1_, track), param(t, time_mlp1_b_, track));
    e = ag::silu(t, e);
    return ag::linear(t, e, param(t, time_mlp2_, track), param(t, time_mlp2_b_, track));
  }

  ag::Var text_embedding(ag::Tape<S>& t, const std::vector<std::vector<int>>& ids, bool track) const {
    for (const auto& seq : ids) {
      if (seq.empty() || static_cast<int>(seq.size()) > config_.max_tokens) throw RangeError("token sequence length out of range");
      for (int id : seq) {
        if (id < 0 || id >= config_.vocab_size) throw RangeError("token id out of range");
      }
    }
    return ag::embed_tokens(t, param(t, token_table_, track), param(t, token_pos_, track), ids);
  }

  // Predicts the noise for a batch of noisy motions x (frames x feature_dim
  // each, equal frame counts) at per-sample timesteps conditioned on token ids.
  ag::Var forward(ag::Tape<S>& t, const Batch<S>& x, const std::vector<int>& timesteps,
                  const std::vector<std::vector<int>>& ids, const ForwardHooks<S>* hooks = nullptr,
                  bool track = false) const {
    if (x.empty() || x.size() != timesteps.size() || x.size() != ids.size()) throw RangeError("forward: batch size mismatch");
    const auto frames = static_cast<int>(x.front().rows());
    if (frames < kMinFrames) throw RangeError("forward: at least " + std::to_string(kMinFrames) + " frames required");
    for (const auto& m : x) {
      if (m.rows() != frames || m.cols() != config_.feature_dim) throw RangeError("forward: inconsistent motion shapes");
    }
    const int padded = padded_frames(frames);
    Batch<S> input(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      input[i] = Mat<S>::Zero(padded, config_.feature_dim);
      input[i].topRows(frames) = x[i];
    }

    ag::Var h = ag::linear(t, t.constant(std::move(input)), param(t, in_w_, track), param(t, in_b_, track));
    h = ag::add(t, h, t.constant(Batch<S>{frame_encoding<S>(padded, config_.width)}));
    const ag::Var temb = time_embedding(t, timesteps, track);
    const ag::Var c = text_embedding(t, ids, track);

    int layer = 1;
    const int per_level = config_.blocks_per_level;
    for (int i = 0; i < per_level; ++i, layer += 2) h = clr_block(t, blocks_[static_cast<std::size_t>(i)], h, c, temb, layer, hooks, track);
    const ag::Var skip = h;
    h = ag::avg_pool2(t, h);
    h = ag::linear(t, h, param(t, down_w_, track), param(t, down_b_, track));
    for (int i = per_level; i < 2 * per_level; ++i, layer += 2) h = clr_block(t, blocks_[static_cast<std::size_t>(i)], h, c, temb, layer, hooks, track);
    h = ag::upsample2(t, h);
    h = ag::linear(t, h, param(t, up_w_, track), param(t, up_b_, track));
    h = ag::concat_cols(t, h, skip);
    h = ag::linear(t, h, param(t, merge_w_, track), param(t, merge_b_, track));
    for (int i = 2 * per_level; i < 3 * per_level; ++i, layer += 2) h = clr_block(t, blocks_[static_cast<std::size_t>(i)], h, c, temb, layer, hooks, track);
    h = ag::layer_norm(t, h, param(t, out_ln_g_, track), param(t, out_ln_b_, track));
    h = ag::linear(t, h, param(t, out_w_, track), param(t, out_b_, track));
    return ag::take_rows(t, h, frames);
  }

  // Inference convenience: forward without gradient recording.
  Batch<S> predict(const Batch<S>& x, const std::vector<int>& timesteps, const std::vector<std::vector<int>>& ids,
                   const ForwardHooks<S>* hooks = nullptr) const {
    ag::Tape<S> tape(false);
    ag::Var out = forward(tape, x, timesteps, ids, hooks, false);
    return tape.value(out);
  }

  const Mat<S>& token_table() const { return params_[token_table_].value; }
  const Mat<S>& token_positions() const { return params_[token_pos_].value; }

 private:
  ag::Var attend(ag::Tape<S>& t, ag::Var q, ag::Var k, ag::Var v, AttentionKind kind, int layer,
                 const ForwardHooks<S>* hooks) const {
    if (hooks == nullptr) return ag::multihead_attention(t, q, k, v, config_.heads);
    AttentionCallbacks<S> cb;
    cb.site = AttentionSite{kind, layer, hooks->step, hooks->conditional};
    cb.hooks = hooks->hooks;
    cb.observer = hooks->observer;
    return ag::multihead_attention(t, q, k, v, config_.heads, &cb);
  }

  ClrBlockIndex add_block(const std::string& prefix, int d) {
    const int ff = d * config_.ffn_mult;
    const int dt = config_.text_width;
    ClrBlockIndex b;
    b.width = d;
    b.ln_conv_g = params_.add(prefix + ".conv.ln.gain", 1, d);
    b.ln_conv_b = params_.add(prefix + ".conv.ln.bias", 1, d);
    b.conv_w = params_.add(prefix + ".conv.kernel", 3, d);
    b.conv_b = params_.add(prefix + ".conv.bias", 1, d);
    b.time_w = params_.add(prefix + ".conv.time_proj", config_.time_width, d);
    b.time_b = params_.add(prefix + ".conv.time_bias", 1, d);
    b.ln_self_g = params_.add(prefix + ".self.ln.gain", 1, d);
    b.ln_self_b = params_.add(prefix + ".self.ln.bias", 1, d);
    b.self_q = params_.add(prefix + ".self.query", d, d);
    b.self_k = params_.add(prefix + ".self.key", d, d);
    b.self_v = params_.add(prefix + ".self.value", d, d);
    b.self_out = params_.add(prefix + ".self.out", d, d);
    b.self_out_b = params_.add(prefix + ".self.out_bias", 1, d);
    b.ln_cross_g = params_.add(prefix + ".cross.ln.gain", 1, d);
    b.ln_cross_b = params_.add(prefix + ".cross.ln.bias", 1, d);
    b.text_ln_g = params_.add(prefix + ".cross.text_ln.gain", 1, dt);
    b.text_ln_b = params_.add(prefix + ".cross.text_ln.bias", 1, dt);
    b.cross_q = params_.add(prefix + ".cross.query", d, d);
    b.cross_k = params_.add(prefix + ".cross.key", dt, d);
    b.cross_v = params_.add(prefix + ".cross.value", dt, d);
    b.cross_out = params_.add(prefix + ".cross.out", d, d);
    b.cross_out_b = params_.add(prefix + ".cross.out_bias", 1, d);
    b.ln_ffn_g = params_.add(prefix + ".ffn.ln.gain", 1, d);
    b.ln_ffn_b = params_.add(prefix + ".ffn.ln.bias", 1, d);
    b.ffn_in = params_.add(prefix + ".ffn.in", d, ff);
    b.ffn_in_b = params_.add(prefix + ".ffn.in_bias", 1, ff);
    b.ffn_out = params_.add(prefix + ".ffn.out", ff, d);
    b.ffn_out_b = params_.add(prefix + ".ffn.out_bias", 1, d);
    return b;
  }

  void build() {
    const int d = config_.width;
    const int db = config_.bottleneck_width;
    const int tw = config_.time_width;
    token_table_ = params_.add("text.token_table", config_.vocab_size, config_.text_width);
    token_pos_ = params_.add("text.positions", config_.max_tokens, config_.text_width);
    time_mlp1_ = params_.add("time.mlp1", tw, tw);
    time_mlp1_b_ = params_.add("time.mlp1_bias", 1, tw);
    time_mlp2_ = params_.add("time.mlp2", tw, tw);
    time_mlp2_b_ = params_.add("time.mlp2_bias", 1, tw);
    in_w_ = params_.add("input.proj", config_.feature_dim, d);
    in_b_ = params_.add("input.bias", 1, d);
    const char* levels[] = {"enc", "mid", "dec"};
    for (int level = 0; level < 3; ++level) {
      for (int i = 0; i < config_.blocks_per_level; ++i) {
        blocks_.push_back(add_block(std::string(levels[level]) + "." + std::to_string(i), level == 1 ? db : d));
      }
    }
    down_w_ = params_.add("down.proj", d, db);
    down_b_ = params_.add("down.bias", 1, db);
    up_w_ = params_.add("up.proj", db, d);
    up_b_ = params_.add("up.bias", 1, d);
    merge_w_ = params_.add("merge.proj", 2 * d, d);
    merge_b_ = params_.add("merge.bias", 1, d);
    out_ln_g_ = params_.add("output.ln.gain", 1, d);
    out_ln_b_ = params_.add("output.ln.bias", 1, d);
    out_w_ = params_.add("output.proj", d, config_.feature_dim);
    out_b_ = params_.add("output.bias", 1, config_.feature_dim);
  }

  void initialize(std::uint64_t seed) {
    Rng rng(seed);
    auto ends_with = [](const std::string& s, const std::string& suffix) {
      return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    for (auto& p : params_) {
      const std::string& n = p.name;
      if (ends_with(n, ".gain")) {
        p.value.setOnes();
      } else if (ends_with(n, "bias")) {
        p.value.setZero();
      } else {
        double std = 1.0 / std::sqrt(static_cast<double>(p.value.rows()));
        if (n == "text.token_table") std = 1.0;
        if (n == "text.positions") std = 0.1;
        if (ends_with(n, ".conv.kernel")) std = 0.3;
        for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<S>(std * rng.normal());
      }
    }
    if (config_.zero_output) params_[out_w_].value.setZero();
  }

  ModelConfig config_;
  ParameterSet<S> params_;
  std::vector<ClrBlockIndex> blocks_;
  int token_table_ = -1, token_pos_ = -1;
  int time_mlp1_ = -1, time_mlp1_b_ = -1, time_mlp2_ = -1, time_mlp2_b_ = -1;
  int in_w_ = -1, in_b_ = -1;
  int down_w_ = -1, down_b_ = -1, up_w_ = -1, up_b_ = -1, merge_w_ = -1, merge_b_ = -1;
  int out_ln_g_ = -1, out_ln_b_ = -1, out_w_ = -1, out_b_ = -1;
};

inline ModelConfig default_model_config(const Vocabulary& vocab = Vocabulary::standard()) {
  ModelConfig c;
  c.vocab_size = vocab.size();
  return c;
}

}  // namespace mclr
