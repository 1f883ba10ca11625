#include <gtest/gtest.h>

#include <set>

#include "mclr/counting.hpp"
#include "mclr/dataset.hpp"

using namespace mclr;

namespace {

// Maximal runs of frames whose root height clears `level`.
int airborne_runs(const MatF& features, double level) {
  int runs = 0;
  bool up = false;
  for (Eigen::Index f = 0; f < features.rows(); ++f) {
    const bool now = features(f, 0) > level;
    if (now && !up) ++runs;
    up = now;
  }
  return runs;
}

}  // namespace

TEST(Corpus, JumpCountMatchesAirborneRuns) {
  for (int k = 1; k <= 5; ++k) {
    const auto m = synth_motion({{Action::jump, k, 1.0}}, 60, 4);
    EXPECT_EQ(airborne_runs(m.features, 0.05), k) << "k=" << k;
    EXPECT_NEAR(m.features.col(0).maxCoeff(), kJumpHeight, 0.02);
  }
}

TEST(Corpus, TrajectoryCounterRecoversJumpCount) {
  for (int k = 1; k <= 5; ++k) {
    const auto m = synth_motion({{Action::jump, k, 1.0}}, 60, 9);
    EXPECT_EQ(count_from_trajectory(root_height(m.features), 0.0), k) << "k=" << k;
  }
}

TEST(Corpus, StandIsStatic) {
  const auto m = synth_motion({{Action::stand, 1, 1.0}}, 32, 0);
  const MatF pos = forward_kinematics(m.features);
  EXPECT_LT((pos.rowwise() - pos.row(0)).cwiseAbs().maxCoeff(), 1e-6f);
}

TEST(Corpus, WalkTravels) {
  const auto m = synth_motion({{Action::walk, 2, 1.0}}, 40, 1);
  const MatF pos = forward_kinematics(m.features);
  const double dx = pos(39, 0) - pos(0, 0), dz = pos(39, 2) - pos(0, 2);
  EXPECT_NEAR(std::hypot(dx, dz), 39 * 0.05, 1e-4);
}

TEST(Corpus, ForwardKinematicsAddsOffsetsToRoot) {
  MatF f = MatF::Zero(2, kFeatureDim);
  f(0, 0) = 0.1f;
  f(1, 1) = 0.5f;
  f(1, offset_column(kHead, 1)) = 0.6f;
  const MatF pos = forward_kinematics(f);
  EXPECT_FLOAT_EQ(pos(0, 1), static_cast<float>(kPelvisHeight + 0.1));
  EXPECT_FLOAT_EQ(pos(1, 0), 0.5f);
  EXPECT_FLOAT_EQ(pos(1, 3 * kHead + 1), static_cast<float>(kPelvisHeight + 0.6));
}

TEST(Corpus, SegmentsSplitFramesAndBlend) {
  const auto m = synth_motion({{Action::stand, 1, 1.0}, {Action::jump, 1, 1.0}}, 40, 2);
  EXPECT_EQ(m.frames(), 40);
  for (int f = 0; f < 20; ++f) EXPECT_FLOAT_EQ(m.features(f, 0), 0.0f);
  EXPECT_GT(m.features.col(0).maxCoeff(), 0.25f);
}

TEST(Corpus, RejectsBadSpecs) {
  EXPECT_THROW(synth_motion({{Action::jump, 0, 1.0}}, 40, 0), RangeError);
  EXPECT_THROW(synth_motion({{Action::jump, 1, 3.0}}, 40, 0), RangeError);
  EXPECT_THROW(synth_motion({{Action::jump, 6, 1.0}}, 40, 0), RangeError);
  EXPECT_THROW(synth_motion({{Action::stand, 1, 1.0}}, 8, 0), RangeError);
  EXPECT_THROW(synth_motion(std::span<const ActionSpec>{}, 40, 0), RangeError);
  EXPECT_THROW(action_from_string("fly"), RangeError);
}

TEST(Corpus, ValidateMotion) {
  MotionSequence m;
  m.features = MatF::Zero(20, kFeatureDim);
  EXPECT_NO_THROW(validate(m));
  m.features(3, 3) = NAN;
  EXPECT_THROW(validate(m), DataError);
  m.features = MatF::Zero(20, 5);
  EXPECT_THROW(validate(m), DataError);
}

TEST(Corpus, MakeCorpusIsDeterministicAndConsistent) {
  const auto a = make_corpus(60, 5, 40);
  const auto b = make_corpus(60, 5, 40);
  ASSERT_EQ(a.size(), 60u);
  std::set<Action> seen;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].prompt, b[i].prompt);
    EXPECT_EQ(a[i].motion.features, b[i].motion.features);
    EXPECT_EQ(a[i].motion.frames(), 40);
    EXPECT_EQ(a[i].verb_indices, tokenize(a[i].prompt).verb_indices);
    EXPECT_EQ(a[i].verb_indices.size(), a[i].specs.size());
    for (const auto& s : a[i].specs) seen.insert(s.action);
    const auto t = tokenize(a[i].prompt);
    for (int id : t.ids) EXPECT_NE(id, Vocabulary::kUnk) << a[i].prompt;
  }
  EXPECT_EQ(seen.size(), 7u);
}

TEST(Corpus, CountedJumpPromptsMatchTheirMotion) {
  for (const auto& s : make_corpus(200, 8, 40)) {
    if (s.specs.size() != 1 || s.specs[0].action != Action::jump) continue;
    EXPECT_EQ(airborne_runs(s.motion.features, 0.05), s.specs[0].count) << s.prompt;
  }
}

TEST(Corpus, NormalizationRoundTrips) {
  auto corpus = make_corpus(30, 2, 40);
  const MatF raw = corpus[0].motion.features;
  const NormStats st = normalize(corpus);
  double sum = 0;
  Eigen::Index n = 0;
  for (const auto& s : corpus) {
    sum += s.motion.features.col(0).cast<double>().sum();
    n += s.motion.features.rows();
  }
  EXPECT_NEAR(sum / static_cast<double>(n), 0.0, 1e-4);
  EXPECT_LT((denormalize(corpus[0].motion.features, st) - raw).cwiseAbs().maxCoeff(), 1e-5f);
  for (Eigen::Index c = 0; c < st.std.size(); ++c) EXPECT_GE(st.std(c), kStdFloor);
}
