#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mclr/tensor.hpp"

namespace mclr {

template <class S>
struct AttentionResult {
  Mat<S> output;  // N1 x d
  Mat<S> map;     // N1 x N2, row-stochastic
};

// softmax(Q K^T / sqrt(d)) V for a single head.
template <class S>
AttentionResult<S> attention(const Mat<S>& q, const Mat<S>& k, const Mat<S>& v) {
  if (q.cols() != k.cols()) throw RangeError("attention: query/key widths differ");
  if (k.rows() != v.rows()) throw RangeError("attention: key/value lengths differ");
  if (k.rows() == 0) throw RangeError("attention: no keys");
  require_finite(q, "attention query");
  require_finite(k, "attention key");
  require_finite(v, "attention value");
  const S scale = S(1) / std::sqrt(static_cast<S>(q.cols()));
  AttentionResult<S> r;
  r.map.noalias() = (q * k.transpose()) * scale;
  softmax_rows(r.map);
  r.output.noalias() = r.map * v;
  return r;
}

// Per-head maps of a d-wide query/key pair split into `heads` column groups.
template <class S>
std::vector<Mat<S>> multihead_maps(const Mat<S>& q, const Mat<S>& k, int heads) {
  const Eigen::Index dh = q.cols() / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  std::vector<Mat<S>> maps(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    auto& m = maps[static_cast<std::size_t>(h)];
    m.noalias() = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * scale;
    softmax_rows(m);
  }
  return maps;
}

template <class S>
Mat<S> multihead_output(const std::vector<Mat<S>>& maps, const Mat<S>& v) {
  const int heads = static_cast<int>(maps.size());
  const Eigen::Index dh = v.cols() / heads;
  Mat<S> out(maps.front().rows(), v.cols());
  for (int h = 0; h < heads; ++h) {
    out.middleCols(h * dh, dh).noalias() = maps[static_cast<std::size_t>(h)] * v.middleCols(h * dh, dh);
  }
  return out;
}

enum class AttentionKind { self_attention, cross_attention };

inline const char* to_string(AttentionKind k) {
  return k == AttentionKind::self_attention ? "self" : "cross";
}

inline AttentionKind attention_kind_from_string(const std::string& s) {
  if (s == "self") return AttentionKind::self_attention;
  if (s == "cross") return AttentionKind::cross_attention;
  throw RangeError("unknown attention kind '" + s + "'");
}

// Where an attention evaluation happens. Layers and denoising steps are
// 1-based; step 1 is the noisiest sampling step.
struct AttentionSite {
  AttentionKind kind = AttentionKind::self_attention;
  int layer = 0;
  int step = 0;
  bool conditional = true;
};

template <class S>
using HeadMaps = std::vector<Mat<S>>;

// Mutation points inside one attention layer. q/k/v hold one full-width
// matrix per batch sample (heads are column groups); maps is [sample][head].
template <class S>
class AttentionHook {
 public:
  virtual ~AttentionHook() = default;
  virtual void before_similarity(const AttentionSite&, Batch<S>& /*q*/, Batch<S>& /*k*/,
                                 Batch<S>& /*v*/) {}
  virtual void after_softmax(const AttentionSite&, std::vector<HeadMaps<S>>& /*maps*/) {}
};

// Read-only tap. `edited` is null when no hook changed the sample's maps.
template <class S>
class AttentionObserver {
 public:
  virtual ~AttentionObserver() = default;
  virtual void observe(const AttentionSite& site, int sample, const HeadMaps<S>& pre_edit,
                       const HeadMaps<S>* edited) = 0;
};

template <class S>
struct AttentionCallbacks {
  AttentionSite site;
  std::vector<AttentionHook<S>*> hooks;
  AttentionObserver<S>* observer = nullptr;
};

}  // namespace mclr
