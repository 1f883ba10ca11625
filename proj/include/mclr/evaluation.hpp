#pragma once

// Evaluation suites run against a trained model: the emphasis sweep
// (weight against attention mass and jump height) and action counting
// (attention counter against the root-trajectory baseline).

#include <algorithm>
#include <ostream>
#include <string>
#include <vector>

#include "mclr/counting.hpp"
#include "mclr/editing.hpp"

namespace mclr {

inline constexpr double kTrajectorySigma = 2.0;

// Highest root height; rest height is 0.
inline double jump_peak_height(const MatF& features) {
  const auto h = root_height(features);
  if (h.empty()) return 0.0;
  return *std::max_element(h.begin(), h.end());
}

inline double root_range(const MatF& features) {
  const auto h = root_height(features);
  if (h.empty()) return 0.0;
  const auto [lo, hi] = std::minmax_element(h.begin(), h.end());
  return *hi - *lo;
}

inline double trajectory_jumps(const MatF& features, double sigma = kTrajectorySigma) {
  return count_from_trajectory(root_height(features), sigma);
}

struct EmphasisRow {
  double weight = 0.0;
  std::uint64_t seed = 0;
  double column_mass = 0.0;  // mean edited cross-attention mass of the target word
  double peak_height = 0.0;
  double jumps = 0.0;
};

inline std::vector<EmphasisRow> emphasis_sweep(const Denoiser<float>& model, const NormStats& stats,
                                               const DiffusionConfig& cfg, const std::string& prompt, int word_index,
                                               const std::vector<double>& weights, const std::vector<std::uint64_t>& seeds,
                                               int frames = kDefaultFrames) {
  const int column = PromptTokens::column_of(word_index);
  std::vector<EmphasisRow> rows;
  for (std::uint64_t seed : seeds) {
    for (double w : weights) {
      const auto s = run_edit(model, stats, EditBase{prompt, seed, frames}, Emphasize{word_index, w}, cfg);
      const auto mass = cross_column_mass(s.edited.records, s.edited.tokens.length());
      const MatF& f = s.edited.motion.features;
      rows.push_back({w, seed, mass[static_cast<std::size_t>(column)], jump_peak_height(f), trajectory_jumps(f)});
    }
  }
  return rows;
}

inline void write_csv(std::ostream& out, const std::vector<EmphasisRow>& rows) {
  out << "weight,seed,column_mass,peak_height,trajectory_jumps\n";
  for (const auto& r : rows) out << r.weight << ',' << r.seed << ',' << r.column_mass << ',' << r.peak_height << ',' << r.jumps << '\n';
}

struct CountingProbe {
  std::string prompt;
  double truth = 0.0;
  double atomic_unit = 1.0;
};

inline std::vector<CountingProbe> default_counting_probes() {
  return {{"a man jumps once.", 1},         {"a man jumps twice.", 2},         {"a man jumps three times.", 3},
          {"a man jumps four times.", 4},   {"a person squats once.", 1},      {"a person squats twice.", 2},
          {"a person squats three times.", 3}, {"a woman waves twice.", 2}};
}

// Samples every probe under every seed and collects the self-attention map
// at (`layer`, `step`) plus the root trajectory, labeled with the requested
// count.
inline std::vector<CountingCase> counting_cases(const Denoiser<float>& model, const NormStats& stats,
                                                const DiffusionConfig& cfg, const std::vector<CountingProbe>& probes,
                                                const std::vector<std::uint64_t>& seeds, int layer, int step,
                                                int frames = kDefaultFrames) {
  if (model.layer_stride(layer) != 1) throw RangeError("counting layer must run at full temporal resolution");
  std::vector<CountingCase> cases;
  for (const auto& p : probes) {
    for (std::uint64_t seed : seeds) {
      SampleOptions opt;
      opt.frames = frames;
      opt.seed = seed;
      const auto r = ddim_sample(model, stats, {{p.prompt, tokenize(p.prompt)}}, cfg, opt);
      cases.push_back({self_attention_map(r[0].records, layer, step, frames), root_height(r[0].motion.features), p.truth,
                       p.atomic_unit});
    }
  }
  return cases;
}

inline void write_csv(std::ostream& out, const std::vector<CountingRow>& rows) {
  out << "sigma,attention_mae,attention_exact,trajectory_mae,trajectory_exact\n";
  for (const auto& r : rows) {
    out << r.sigma << ',' << r.attention.mae << ',' << r.attention.exact_rate << ',' << r.trajectory.mae << ','
        << r.trajectory.exact_rate << '\n';
  }
}

}  // namespace mclr
