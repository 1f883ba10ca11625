#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mclr/network.hpp"
#include "mclr/rng.hpp"

namespace mclr::fixtures {

inline MatD random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  MatD m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

inline MatF random_matrix_f(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  return random_matrix(rng, rows, cols, scale).cast<float>();
}

// Builds a scalar loss from leaf variables; leaves[i] wraps inputs[i].
using LossBuilder = std::function<ag::Var(ag::Tape<double>&, const std::vector<ag::Var>&)>;

struct GradCheck {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

// Central differences on every entry of every input against the tape's
// reverse pass. Relative error is |a - n| / max(1, |a|, |n|).
inline GradCheck check_gradients(std::vector<MatD> inputs, const LossBuilder& build, double h = 1e-4) {
  std::vector<MatD> grads;
  for (const auto& m : inputs) grads.push_back(MatD::Zero(m.rows(), m.cols()));
  {
    ag::Tape<double> t(true);
    std::vector<ag::Var> leaves;
    for (std::size_t i = 0; i < inputs.size(); ++i) leaves.push_back(t.parameter(inputs[i], &grads[i]));
    t.backward(build(t, leaves));
  }
  auto eval = [&] {
    ag::Tape<double> t(false);
    std::vector<ag::Var> leaves;
    for (auto& m : inputs) leaves.push_back(t.parameter(m, nullptr));
    return t.value(build(t, leaves))[0](0, 0);
  };
  GradCheck r;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (Eigen::Index j = 0; j < inputs[i].size(); ++j) {
      double& x = inputs[i].data()[j];
      const double keep = x;
      x = keep + h;
      const double up = eval();
      x = keep - h;
      const double down = eval();
      x = keep;
      const double numeric = (up - down) / (2 * h);
      const double analytic = grads[i].data()[j];
      const double abs_err = std::abs(analytic - numeric);
      r.max_abs_error = std::max(r.max_abs_error, abs_err);
      r.max_rel_error = std::max(r.max_rel_error, abs_err / std::max({1.0, std::abs(analytic), std::abs(numeric)}));
      ++r.checked;
    }
  }
  return r;
}

// A CLR U-Net small enough for exhaustive finite differences.
inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.width = 8;
  c.bottleneck_width = 8;
  c.text_width = 8;
  c.time_width = 8;
  c.heads = 2;
  c.ffn_mult = 2;
  c.blocks_per_level = 1;
  c.max_tokens = 6;
  c.vocab_size = 12;
  c.zero_output = false;
  return c;
}

// Square map whose rows all carry k Gaussian bumps in the same jittered,
// evenly spread columns, with per-row amplitude and a faint non-negative floor.
inline MatD bump_map(Rng& rng, int k, Eigen::Index n = 160) {
  MatD m(n, n);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = 0.01 * rng.uniform();
  const double spacing = static_cast<double>(n) / k;
  std::vector<double> centres, widths;
  for (int b = 0; b < k; ++b) {
    centres.push_back((b + 0.5) * spacing + rng.uniform(-0.15, 0.15) * spacing);
    widths.push_back(rng.uniform(1.5, 2.5));
  }
  for (Eigen::Index r = 0; r < n; ++r) {
    for (int b = 0; b < k; ++b) {
      const double centre = centres[static_cast<std::size_t>(b)] + rng.uniform(-0.5, 0.5);
      const double amp = rng.uniform(0.6, 1.0);
      for (Eigen::Index c = 0; c < n; ++c) {
        const double d = (static_cast<double>(c) - centre) / widths[static_cast<std::size_t>(b)];
        m(r, c) += amp * std::exp(-0.5 * d * d);
      }
    }
  }
  return m;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("mclr_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace mclr::fixtures
