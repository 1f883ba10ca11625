#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mclr/corpus.hpp"
#include "mclr/rng.hpp"
#include "mclr/text.hpp"

namespace mclr {

inline constexpr int kDefaultFrames = 40;

struct Sample {
  std::string prompt;
  std::vector<int> verb_indices;
  std::vector<ActionSpec> specs;
  MotionSequence motion;
};

namespace detail {

inline const char* verb_of(Action a) {
  switch (a) {
    case Action::walk: return "walks";
    case Action::run: return "runs";
    case Action::jump: return "jumps";
    case Action::wave: return "waves";
    case Action::squat: return "squats";
    case Action::sit: return "sits";
    case Action::stand: return "stands";
  }
  return "";
}

inline bool is_repetitive(Action a) { return a == Action::jump || a == Action::wave || a == Action::squat; }

inline std::string count_phrase(int count, Rng& rng) {
  switch (count) {
    case 1: return rng.bernoulli(0.5) ? "" : " once";
    case 2: return rng.bernoulli(0.5) ? " twice" : " two times";
    case 3: return " three times";
    case 4: return " four times";
    case 5: return " five times";
    default: return " six times";
  }
}

// Verb phrase for one action; fills in the spec's count where the phrase
// leaves it implicit.
inline std::string phrase_for(ActionSpec& spec, Rng& rng, bool allow_count, int max_count) {
  std::string p = verb_of(spec.action);
  switch (spec.action) {
    case Action::jump:
    case Action::wave:
    case Action::squat:
      if (allow_count) {
        spec.count = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::min(4, max_count))));
        p += count_phrase(spec.count, rng);
      } else {
        spec.count = 1;
      }
      break;
    case Action::walk:
    case Action::run:
      spec.count = std::min(max_count, 2 + static_cast<int>(rng.below(allow_count ? 3 : 2)));
      if (rng.bernoulli(0.5)) p += " forward";
      break;
    case Action::sit:
      p += " down";
      break;
    case Action::stand:
      p += " still";
      break;
  }
  return p;
}

}  // namespace detail

// Samples templated prompts over the closed vocabulary and renders each
// prompt's actions. Single-action prompts may state a repetition count
// ("a man jumps three times."); two-action prompts join verbs with "then".
inline std::vector<Sample> make_corpus(int size, std::uint64_t seed, int frames = kDefaultFrames) {
  if (size < 1) throw RangeError("make_corpus: size must be >= 1");
  static const char* subjects[] = {"man", "person", "woman"};
  constexpr Action actions[] = {Action::walk, Action::run, Action::jump, Action::wave,
                                Action::squat, Action::sit, Action::stand};
  Rng rng(seed);
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) {
    Sample s;
    const std::string subject = subjects[rng.below(3)];
    const bool pair = rng.bernoulli(0.3);
    const int n_actions = pair ? 2 : 1;
    std::vector<std::string> phrases;
    for (int k = 0; k < n_actions; ++k) {
      ActionSpec spec;
      do {
        spec.action = actions[rng.below(7)];
      } while (k == 1 && spec.action == s.specs.front().action);
      spec.amplitude = rng.uniform(0.8, 1.2);
      const int max_count = std::max(1, frames / n_actions / 8);
      phrases.push_back(detail::phrase_for(spec, rng, !pair, max_count));
      s.specs.push_back(spec);
    }
    s.prompt = "a " + subject + " " + phrases[0];
    if (pair) s.prompt += " then " + phrases[1];
    s.prompt += ".";
    s.verb_indices = tokenize(s.prompt).verb_indices;
    s.motion = synth_motion(std::span<const ActionSpec>(s.specs), frames, rng.next_u64());
    out.push_back(std::move(s));
  }
  return out;
}

struct NormStats {
  Eigen::VectorXf mean;
  Eigen::VectorXf std;
};

inline constexpr float kStdFloor = 1e-6f;

inline NormStats compute_stats(const std::vector<Sample>& corpus) {
  if (corpus.empty()) throw RangeError("normalize: empty corpus");
  const Eigen::Index d = corpus.front().motion.features.cols();
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd sq = Eigen::VectorXd::Zero(d);
  Eigen::VectorXf lo = Eigen::VectorXf::Constant(d, INFINITY);
  Eigen::VectorXf hi = Eigen::VectorXf::Constant(d, -INFINITY);
  double n = 0;
  for (const auto& s : corpus) {
    const MatD f = s.motion.features.cast<double>();
    sum += f.colwise().sum().transpose();
    n += static_cast<double>(f.rows());
    lo = lo.cwiseMin(s.motion.features.colwise().minCoeff().transpose());
    hi = hi.cwiseMax(s.motion.features.colwise().maxCoeff().transpose());
  }
  const Eigen::VectorXd mean = sum / n;
  for (const auto& s : corpus) {
    const MatD f = s.motion.features.cast<double>();
    sq += (f.rowwise() - mean.transpose()).array().square().colwise().sum().matrix().transpose();
  }
  NormStats st;
  st.mean = mean.cast<float>();
  st.std = (sq / n).cwiseSqrt().cast<float>().cwiseMax(kStdFloor);
  // Constant columns get their exact value as mean so they normalize to 0.
  for (Eigen::Index c = 0; c < d; ++c) {
    if (lo(c) == hi(c)) st.mean(c) = lo(c);
  }
  return st;
}

inline MatF normalize(const MatF& features, const NormStats& st) {
  return ((features.rowwise() - st.mean.transpose()).array().rowwise() / st.std.transpose().array()).matrix();
}

inline MatF denormalize(const MatF& features, const NormStats& st) {
  return ((features.array().rowwise() * st.std.transpose().array()).rowwise() + st.mean.transpose().array()).matrix();
}

// Normalizes every motion in place and returns the statistics used.
inline NormStats normalize(std::vector<Sample>& corpus) {
  NormStats st = compute_stats(corpus);
  for (auto& s : corpus) s.motion.features = normalize(s.motion.features, st);
  return st;
}

}  // namespace mclr
