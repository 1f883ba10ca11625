#include <gtest/gtest.h>

#include "mclr/editing.hpp"
#include "support.hpp"

using namespace mclr;
using fixtures::random_matrix;

namespace {

struct TinyModel {
  std::vector<Sample> corpus = make_corpus(20, 4, 24);
  NormStats stats = normalize(corpus);
  Denoiser<float> model{[] {
                          ModelConfig c = fixtures::tiny_model_config();
                          c.vocab_size = Vocabulary::standard().size();
                          c.max_tokens = kMaxTokens;
                          return c;
                        }(),
                        6};
  DiffusionConfig cfg;
};

MatD row_stochastic(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  MatD m = random_matrix(rng, rows, cols).array().exp();
  for (Eigen::Index r = 0; r < rows; ++r) m.row(r) /= m.row(r).sum();
  return m;
}

std::vector<EditDirective> noop_directives(const std::string& prompt, int frames, int tokens) {
  return {Emphasize{1, 0.0},
          Erase{1, 1.0},
          Replace{prompt, 5, 1, 6},
          Shift{0.0},
          ExampleGen{frames},
          StyleTransfer{prompt},
          Ground{MatF::Zero(frames, tokens)}};
}

}  // namespace

TEST(Editing, AdditiveReweightTouchesOneColumn) {
  Rng rng(1);
  const MatF m = row_stochastic(rng, 6, 5).cast<float>();
  for (float w : {-0.5f, -0.3f, 0.3f, 0.5f}) {
    const MatF e = reweight_cross(m, 1, w, EmphasisMode::additive);
    for (Eigen::Index r = 0; r < 6; ++r) {
      for (Eigen::Index c = 0; c < 5; ++c) {
        EXPECT_EQ(e(r, c), c == 2 ? m(r, c) + w : m(r, c));
      }
    }
  }
}

TEST(Editing, MultiplicativeAndErase) {
  Rng rng(2);
  const MatD m = row_stochastic(rng, 4, 4);
  const MatD e = erase(m, 0);
  EXPECT_NEAR(e(2, 1), 0.1 * m(2, 1), 1e-15);
  EXPECT_EQ(e.col(3), m.col(3));
  EXPECT_THROW(reweight_cross(m, 3, 1.0, EmphasisMode::additive), RangeError);
  EXPECT_THROW(reweight_cross(m, -1, 1.0, EmphasisMode::additive), RangeError);
}

TEST(Editing, GroundAddsMask) {
  MatD m = MatD::Constant(2, 3, 0.25), mask = MatD::Zero(2, 3);
  mask(1, 2) = 0.5;
  EXPECT_DOUBLE_EQ(ground(m, mask)(1, 2), 0.75);
  EXPECT_THROW(ground(m, MatD(MatD::Zero(3, 3))), RangeError);
  mask(0, 0) = -1;
  EXPECT_THROW(ground(m, mask), RangeError);
}

TEST(Editing, ShiftRowsIsRotation) {
  MatD m(5, 1);
  m << 0, 1, 2, 3, 4;
  // back = floor(5 * 0.4) = 2 trailing rows move to the front.
  MatD expect(5, 1);
  expect << 3, 4, 0, 1, 2;
  EXPECT_EQ(shift_rows(m, 0.6), expect);
  EXPECT_EQ(shift_rows(m, 0.0), m);
  EXPECT_EQ(shift_rows(m, 1.0), m);
  EXPECT_THROW(shift_rows(m, 1.5), RangeError);
}

TEST(Editing, ShiftComposesToIdentityOnIntegralSplits) {
  Rng rng(3);
  const MatD m = random_matrix(rng, 20, 3);
  for (double r : {0.25, 0.5, 0.75, 0.1}) EXPECT_EQ(shift_rows(shift_rows(m, r), 1.0 - r), m) << r;
  const auto s = shift_qkv<double>(m, m, m, 0.5);
  EXPECT_EQ(s.q, s.k);
  EXPECT_EQ(s.k, s.v);
}

TEST(Editing, ShiftIsSelfAttentionEquivariant) {
  Rng rng(4);
  const MatD x = random_matrix(rng, 16, 4);
  const auto base = attention<double>(x, x, x);
  const MatD xs = shift_rows(x, 0.25);
  const auto moved = attention<double>(xs, xs, xs);
  EXPECT_LT((moved.output - shift_rows(base.output, 0.25)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Editing, ChunkShuffle) {
  MatD q(5, 1);
  q << 0, 1, 2, 3, 4;
  MatD expect(5, 1);
  expect << 4, 2, 3, 0, 1;
  EXPECT_EQ(shuffle_query_chunks(q, 2, {2, 1, 0}), expect);
  EXPECT_EQ(shuffle_query_chunks(q, 5, {0}), q);
  EXPECT_THROW(shuffle_query_chunks(q, 2, {0, 1}), RangeError);
  EXPECT_THROW(shuffle_query_chunks(q, 6, {0}), RangeError);
}

TEST(Editing, ChunkPermutationSeeding) {
  const auto a = chunk_permutation(8, 3, 7, 2);
  Rng rng(3 + 2 * 7);
  EXPECT_EQ(a, rng.permutation(8));
  EXPECT_EQ(a, chunk_permutation(8, 3, 7, 2));
  EXPECT_NE(chunk_permutation(8, 3, 7, 0), chunk_permutation(8, 3, 7, 1));
  std::vector<int> sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 8; ++i) EXPECT_EQ(sorted[static_cast<std::size_t>(i)], i);
}

TEST(Editing, ExampleChunksScaleWithLayerResolution) {
  const ExampleHook<float> hook(ExampleGen{10}, 40);
  EXPECT_EQ(hook.chunk_rows(40), 10);
  EXPECT_EQ(hook.chunk_rows(20), 5);
  const ExampleHook<float> whole(ExampleGen{40}, 40);
  EXPECT_EQ(whole.chunk_rows(20), 20);
}

TEST(Editing, GroundResamplesToLayerRows) {
  MatF mask = MatF::Zero(6, 2);
  for (int r = 0; r < 6; ++r) mask(r, 1) = static_cast<float>(r);
  const GroundHook<float> hook(mask);
  const MatF full = hook.resample(8);
  EXPECT_FLOAT_EQ(full(5, 1), 5.0f);
  EXPECT_FLOAT_EQ(full(7, 1), 5.0f);
  const MatF half = hook.resample(4);
  EXPECT_FLOAT_EQ(half(0, 1), 0.5f);
  EXPECT_FLOAT_EQ(half(3, 1), 5.0f);
}

TEST(Editing, HooksRespectSiteFilters) {
  Rng rng(5);
  std::vector<HeadMaps<float>> maps(2, HeadMaps<float>{row_stochastic(rng, 4, 3).cast<float>()});
  maps[1][0] = row_stochastic(rng, 4, 3).cast<float>();
  const auto original = maps;

  ReweightHook<float> emph(0, 0.5, EmphasisMode::additive);
  emph.after_softmax({AttentionKind::cross_attention, 2, 1, false}, maps);
  EXPECT_EQ(maps, original);
  emph.after_softmax({AttentionKind::self_attention, 1, 1, true}, maps);
  EXPECT_EQ(maps, original);
  emph.after_softmax({AttentionKind::cross_attention, 2, 1, true}, maps);
  EXPECT_EQ(maps[0], original[0]);
  EXPECT_NE(maps[1], original[1]);

  maps = original;
  ReplaceHook<float> rep(Replace{"", 3, 2, 4});
  rep.after_softmax({AttentionKind::cross_attention, 2, 4, true}, maps);
  EXPECT_EQ(maps, original);
  rep.after_softmax({AttentionKind::cross_attention, 6, 1, true}, maps);
  EXPECT_EQ(maps, original);
  rep.after_softmax({AttentionKind::cross_attention, 4, 3, true}, maps);
  EXPECT_EQ(maps[1], original[0]);
}

TEST(Editing, SelfHooksEditOnlyTheEditedSample) {
  Rng rng(6);
  Batch<float> q{random_matrix(rng, 8, 2).cast<float>(), random_matrix(rng, 8, 2).cast<float>()};
  Batch<float> k = q, v = q;
  const Batch<float> q0 = q;
  ShiftHook<float> shift(Shift{0.5, 2});
  shift.before_similarity({AttentionKind::self_attention, 1, 3, true}, q, k, v);
  EXPECT_EQ(q, q0);
  shift.before_similarity({AttentionKind::self_attention, 1, 2, false}, q, k, v);
  EXPECT_EQ(q[0], q0[0]);
  EXPECT_EQ(q[1], shift_rows(q0[0], 0.5));

  q = q0;
  StyleHook<float> style(StyleTransfer{"", 1});
  style.before_similarity({AttentionKind::self_attention, 3, 1, true}, q, k, v);
  EXPECT_EQ(q[1], q0[0]);
}

TEST(Editing, DirectiveJsonRoundTrip) {
  MatF mask = MatF::Zero(3, 2);
  mask(1, 1) = 0.5f;
  const std::vector<EditDirective> all{Emphasize{2, -0.3, EmphasisMode::multiplicative},
                                       Erase{1, 0.2},
                                       Replace{"a man walks.", 4, 2, 9},
                                       Shift{0.3, 6},
                                       ExampleGen{12, 4, 9, 3, 2},
                                       StyleTransfer{"a man runs.", 7},
                                       Ground{mask}};
  for (const auto& d : all) {
    const auto j = to_json(d);
    EXPECT_EQ(to_json(directive_from_json(j)), j) << j.dump();
    EXPECT_EQ(directive_from_json(nlohmann::json::parse(j.dump())).index(), d.index());
  }
  EXPECT_THROW(directive_from_json({{"op", "teleport"}}), RangeError);
  EXPECT_THROW(directive_from_json({{"weight", 1}}), RangeError);
  EXPECT_THROW(directive_from_json({{"op", "emphasize"}, {"weight", "lots"}}), RangeError);
  EXPECT_THROW(directive_from_json({{"op", "ground"}, {"mask", {{1, 2}, {3}}}}), RangeError);
}

TEST(Editing, ValidationRejectsOutOfRange) {
  const auto t = tokenize("a man jumps.");
  EXPECT_THROW(validate(Emphasize{3, 0.1}, t, 40, 10, 12), RangeError);
  EXPECT_THROW(validate(Emphasize{1, 1.5}, t, 40, 10, 12), RangeError);
  EXPECT_THROW(validate(Replace{"", 11}, t, 40, 10, 12), RangeError);
  EXPECT_THROW(validate(Replace{"", 5, 0}, t, 40, 10, 12), RangeError);
  EXPECT_THROW(validate(Shift{1.2}, t, 40, 10, 12), RangeError);
  EXPECT_THROW(validate(ExampleGen{41}, t, 40, 10, 12), RangeError);
  EXPECT_THROW(validate(ExampleGen{10, 0, 1, 11}, t, 40, 10, 12), RangeError);
  EXPECT_THROW(validate(Ground{MatF::Zero(40, 3)}, t, 40, 10, 12), RangeError);
  EXPECT_NO_THROW(validate(Ground{MatF::Zero(40, 4)}, t, 40, 10, 12));
}

TEST(Editing, EditPrompts) {
  const EditBase base{"a man jumps.", 0, 24};
  const auto style = edit_prompts(base, StyleTransfer{"a man runs."});
  EXPECT_EQ(style[0].first, "a man runs.");
  EXPECT_EQ(style[1].first, "a man jumps.");
  EXPECT_EQ(edit_prompts(base, ExampleGen{8, 0, 1, 5, 3}).size(), 4u);
  EXPECT_EQ(edit_prompts(base, Replace{"a man walks."})[1].first, "a man walks.");
  EXPECT_THROW(edit_prompts(base, Replace{"a man walks forward."}), RangeError);
}

TEST(Editing, NoopDirectivesReproduceUndirectedSampling) {
  TinyModel t;
  const std::string prompt = "a man jumps.";
  SampleOptions opt;
  opt.frames = 24;
  opt.seed = 3;
  const auto plain = ddim_sample(t.model, t.stats, {{prompt, tokenize(prompt)}}, t.cfg, opt);
  for (const auto& d : noop_directives(prompt, 24, 4)) {
    const auto s = run_edit(t.model, t.stats, EditBase{prompt, 3, 24}, d, t.cfg);
    EXPECT_EQ(s.edited.motion.features, plain[0].motion.features) << op_name(d);
    EXPECT_EQ(s.reference.motion.features, plain[0].motion.features) << op_name(d);
    EXPECT_EQ(diff_report(s)["max_frame_feature_delta"].get<double>(), 0.0) << op_name(d);
  }
}

TEST(Editing, EmphasisRecordsExactColumnShift) {
  TinyModel t;
  const auto s = run_edit(t.model, t.stats, EditBase{"a man jumps.", 1, 24}, Emphasize{2, 0.3}, t.cfg);
  int edited = 0;
  for (const auto& r : s.edited.records) {
    if (r.kind != AttentionKind::cross_attention) {
      EXPECT_FALSE(r.edited.has_value());
      continue;
    }
    ASSERT_TRUE(r.edited.has_value());
    ++edited;
    for (Eigen::Index i = 0; i < r.map.rows(); ++i) {
      for (Eigen::Index c = 0; c < r.map.cols(); ++c) {
        EXPECT_EQ((*r.edited)(i, c), c == 3 ? r.map(i, c) + 0.3f : r.map(i, c));
      }
    }
  }
  EXPECT_EQ(edited, t.cfg.sample_steps * 3 * 2);
  for (const auto& r : s.reference.records) EXPECT_FALSE(r.edited.has_value());
  const auto diff = diff_report(s);
  EXPECT_GT(diff["column_mass_delta"][3].get<double>(), 0.29);
  EXPECT_EQ(diff["column_mass_delta"].size(), 4u);
  EXPECT_EQ(diff["columns"][3], "jumps");
}

TEST(Editing, ReplaceCopiesReferenceMapsWithinWindow) {
  TinyModel t;
  const auto s = run_edit(t.model, t.stats, EditBase{"a man jumps.", 2, 24}, Replace{"a man walks.", 4, 1, 6}, t.cfg);
  ASSERT_EQ(s.reference.records.size(), s.edited.records.size());
  for (std::size_t i = 0; i < s.edited.records.size(); ++i) {
    const auto& e = s.edited.records[i];
    if (e.kind != AttentionKind::cross_attention) continue;
    if (e.step <= 4) {
      EXPECT_EQ(e.effective(), s.reference.records[i].map);
    } else {
      EXPECT_FALSE(e.edited.has_value());
    }
  }
  EXPECT_EQ(s.edited.prompt, "a man walks.");
}

TEST(Editing, ExampleGenerationIsSeededAndDiverse) {
  TinyModel t;
  const ExampleGen e{6, 5, 3, 2, 2};
  const auto a = run_edit(t.model, t.stats, EditBase{"a man jumps.", 4, 24}, e, t.cfg, false);
  const auto b = run_edit(t.model, t.stats, EditBase{"a man jumps.", 4, 24}, e, t.cfg, false);
  ASSERT_EQ(a.generated.size(), 2u);
  EXPECT_EQ(a.generated[1].motion.features, b.generated[1].motion.features);
  EXPECT_NE(a.generated[0].motion.features, a.reference.motion.features);
  EXPECT_NE(a.generated[0].motion.features, a.generated[1].motion.features);
}

TEST(Editing, InvalidDirectiveFailsBeforeSampling) {
  TinyModel t;
  EXPECT_THROW(run_edit(t.model, t.stats, EditBase{"a man jumps.", 0, 24}, Emphasize{9, 0.1}, t.cfg), RangeError);
}
