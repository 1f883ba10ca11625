#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <nlohmann/json.hpp>

#include "mclr/error.hpp"
#include "mclr/network.hpp"
#include "mclr/tensor.hpp"

namespace mclr {

struct CountingConfig {
  double sigma = 0.8;
  int downsample_factor = 4;
  double height_multiplier = 3.0;
  int distance = 1;

  void validate() const {
    if (!(sigma >= 0.0)) throw RangeError("counting: sigma must be >= 0");
    if (downsample_factor < 1) throw RangeError("counting: downsample factor must be >= 1");
    if (distance < 1) throw RangeError("counting: distance must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"sigma", sigma}, {"downsample_factor", downsample_factor}, {"height_multiplier", height_multiplier},
            {"distance", distance}};
  }
};

// Normalized 1-D Gaussian taps over [-r, r] with r = ceil(4 sigma).
inline std::vector<double> gaussian_kernel(double sigma) {
  if (sigma <= 0.0) return {1.0};
  const int r = static_cast<int>(4.0 * sigma + 0.5);
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  for (int i = -r; i <= r; ++i) k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  const double sum = std::accumulate(k.begin(), k.end(), 0.0);
  for (double& v : k) v /= sum;
  return k;
}

// Index into [0, n) with half-sample symmetric reflection (d c b a | a b c d).
inline Eigen::Index reflect_index(Eigen::Index i, Eigen::Index n) {
  if (n == 1) return 0;
  const Eigen::Index period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

inline std::vector<double> gaussian_filter1d(const std::vector<double>& x, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const auto r = static_cast<Eigen::Index>(k.size() / 2);
  const auto n = static_cast<Eigen::Index>(x.size());
  std::vector<double> out(x.size(), 0.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    double acc = 0.0;
    for (Eigen::Index j = -r; j <= r; ++j) acc += k[static_cast<std::size_t>(j + r)] * x[static_cast<std::size_t>(reflect_index(i + j, n))];
    out[static_cast<std::size_t>(i)] = acc;
  }
  return out;
}

// Separable smoothing along rows then columns.
inline MatD gaussian_filter2d(const MatD& m, double sigma) {
  if (sigma <= 0.0 || m.size() == 0) return m;
  MatD tmp(m.rows(), m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(m.row(r).data(), m.row(r).data() + m.cols());
    const auto s = gaussian_filter1d(row, sigma);
    for (Eigen::Index c = 0; c < m.cols(); ++c) tmp(r, c) = s[static_cast<std::size_t>(c)];
  }
  MatD out(m.rows(), m.cols());
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    std::vector<double> col(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) col[static_cast<std::size_t>(r)] = tmp(r, c);
    const auto s = gaussian_filter1d(col, sigma);
    for (Eigen::Index r = 0; r < m.rows(); ++r) out(r, c) = s[static_cast<std::size_t>(r)];
  }
  return out;
}

// factor x factor mean pooling; partial blocks at the edges average what they
// cover.
inline MatD downsample(const MatD& m, int factor) {
  if (factor < 1) throw RangeError("downsample: factor must be >= 1");
  if (factor == 1) return m;
  const Eigen::Index rows = (m.rows() + factor - 1) / factor;
  const Eigen::Index cols = (m.cols() + factor - 1) / factor;
  MatD out(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      const Eigen::Index h = std::min<Eigen::Index>(factor, m.rows() - r * factor);
      const Eigen::Index w = std::min<Eigen::Index>(factor, m.cols() - c * factor);
      out(r, c) = m.block(r * factor, c * factor, h, w).mean();
    }
  }
  return out;
}

inline MatD normalize01(const MatD& m) {
  if (m.size() == 0) return m;
  const double lo = m.minCoeff();
  const double hi = m.maxCoeff();
  if (!(hi > lo)) return MatD::Zero(m.rows(), m.cols());
  return (m.array() - lo) / (hi - lo);
}

// Local maxima of `x` at or above `height`, thinned so accepted peaks are at
// least `distance` apart (taller peaks win, the later one on ties). A plateau
// reports its left edge.
inline std::vector<int> detect_peaks(const std::vector<double>& x, double height, int distance) {
  std::vector<int> candidates;
  const int n = static_cast<int>(x.size());
  for (int i = 1; i + 1 < n;) {
    if (x[static_cast<std::size_t>(i - 1)] < x[static_cast<std::size_t>(i)]) {
      int j = i;
      while (j + 1 < n && x[static_cast<std::size_t>(j + 1)] == x[static_cast<std::size_t>(i)]) ++j;
      if (j + 1 < n && x[static_cast<std::size_t>(j + 1)] < x[static_cast<std::size_t>(i)]) {
        if (x[static_cast<std::size_t>(i)] >= height) candidates.push_back(i);
        i = j + 1;
        continue;
      }
      i = j + 1;
      continue;
    }
    ++i;
  }
  if (distance <= 1 || candidates.size() < 2) return candidates;
  std::vector<int> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return x[static_cast<std::size_t>(candidates[static_cast<std::size_t>(a)])] <
           x[static_cast<std::size_t>(candidates[static_cast<std::size_t>(b)])];
  });
  std::vector<int> kept;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const int o = *it;
    const int p = candidates[static_cast<std::size_t>(o)];
    const bool close = std::any_of(kept.begin(), kept.end(), [&](int q) { return std::abs(p - q) < distance; });
    if (!close) kept.push_back(p);
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

struct CountResult {
  double count = 0.0;
  std::vector<std::vector<int>> per_row_peaks;

  nlohmann::json to_json(const CountingConfig& cfg) const {
    return {{"count", count}, {"per_row_peaks", per_row_peaks}, {"config", cfg.to_json()}};
  }
};

// Peaks per row of a processed self-attention map, averaged over the rows
// that have any.
inline CountResult count_actions_detailed(const MatD& map, const CountingConfig& cfg = {}) {
  cfg.validate();
  if (map.size() == 0) throw RangeError("count_actions: empty map");
  if (map.rows() != map.cols()) throw RangeError("count_actions: map must be square");
  if (!all_finite(map)) throw NumericError("count_actions: map has non-finite entries");
  const MatD m = normalize01(downsample(gaussian_filter2d(map, cfg.sigma), cfg.downsample_factor));
  const double height = m.mean() * cfg.height_multiplier;
  CountResult res;
  int total = 0;
  int rows_with_peaks = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(m.row(r).data(), m.row(r).data() + m.cols());
    res.per_row_peaks.push_back(detect_peaks(row, height, cfg.distance));
    const auto k = static_cast<int>(res.per_row_peaks.back().size());
    total += k;
    if (k > 0) ++rows_with_peaks;
  }
  res.count = rows_with_peaks == 0 ? 0.0 : static_cast<double>(total) / rows_with_peaks;
  return res;
}

inline double count_actions(const MatD& map, const CountingConfig& cfg = {}) {
  return count_actions_detailed(map, cfg).count;
}

// Baseline counter over the vertical root trajectory.
inline double count_from_trajectory(const std::vector<double>& root_height, double sigma, double height_multiplier = 3.0) {
  if (root_height.empty()) return 0.0;
  const auto smooth = gaussian_filter1d(root_height, sigma);
  const auto [lo_it, hi_it] = std::minmax_element(smooth.begin(), smooth.end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  if (!(hi > lo)) return 0.0;
  std::vector<double> norm(smooth.size());
  for (std::size_t i = 0; i < smooth.size(); ++i) norm[i] = (smooth[i] - lo) / (hi - lo);
  const double mean = std::accumulate(norm.begin(), norm.end(), 0.0) / static_cast<double>(norm.size());
  return static_cast<double>(detect_peaks(norm, mean * height_multiplier, 1).size());
}

inline std::vector<double> root_height(const MatF& features) {
  std::vector<double> h(static_cast<std::size_t>(features.rows()));
  for (Eigen::Index f = 0; f < features.rows(); ++f) h[static_cast<std::size_t>(f)] = features(f, 0);
  return h;
}

// Head-averaged self-attention map of one (layer, step), cropped to the
// motion's frames when recorded at full temporal resolution.
inline MatD self_attention_map(const std::vector<AttentionRecord>& records, int layer, int step, int frames = 0) {
  MatD sum;
  int heads = 0;
  for (const auto& r : records) {
    if (r.kind != AttentionKind::self_attention || r.layer != layer || r.step != step) continue;
    const MatD m = r.map.cast<double>();
    if (heads == 0) {
      sum = m;
    } else {
      sum += m;
    }
    ++heads;
  }
  if (heads == 0) throw RangeError("no self-attention record for layer " + std::to_string(layer) + ", step " + std::to_string(step));
  sum /= heads;
  if (frames > 0 && frames < sum.rows()) return sum.topLeftCorner(frames, frames);
  return sum;
}

struct LabeledCount {
  double truth = 0.0;
  double predicted = 0.0;
  double atomic_unit = 1.0;  // 0.5 for walking
};

struct CountingScore {
  double mae = 0.0;
  double exact_rate = 0.0;
};

// Mean absolute error, and the share of predictions that equal the label
// after rounding to the atomic unit.
inline CountingScore score_counts(const std::vector<LabeledCount>& set) {
  if (set.empty()) return {};
  CountingScore s;
  int exact = 0;
  for (const auto& l : set) {
    s.mae += std::abs(l.predicted - l.truth);
    const double snapped = std::round(l.predicted / l.atomic_unit) * l.atomic_unit;
    if (std::abs(snapped - l.truth) < 1e-9) ++exact;
  }
  s.mae /= static_cast<double>(set.size());
  s.exact_rate = static_cast<double>(exact) / static_cast<double>(set.size());
  return s;
}

struct CountingCase {
  MatD self_attention;           // square map
  std::vector<double> root_height;
  double truth = 0.0;
  double atomic_unit = 1.0;
};

struct CountingRow {
  double sigma = 0.0;
  CountingScore attention;
  CountingScore trajectory;
};

// Error-rate table comparing the attention counter with the trajectory
// baseline for each smoothing sigma.
inline std::vector<CountingRow> eval_counting(const std::vector<CountingCase>& cases, const std::vector<double>& sigmas,
                                              CountingConfig base = {}) {
  std::vector<CountingRow> table;
  for (double sigma : sigmas) {
    CountingConfig cfg = base;
    cfg.sigma = sigma;
    std::vector<LabeledCount> att, traj;
    for (const auto& c : cases) {
      att.push_back({c.truth, count_actions(c.self_attention, cfg), c.atomic_unit});
      traj.push_back({c.truth, count_from_trajectory(c.root_height, sigma, base.height_multiplier), c.atomic_unit});
    }
    table.push_back({sigma, score_counts(att), score_counts(traj)});
  }
  return table;
}

}  // namespace mclr
