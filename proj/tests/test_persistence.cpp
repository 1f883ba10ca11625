#include <gtest/gtest.h>

#include "mclr/persistence.hpp"
#include "support.hpp"

using namespace mclr;
namespace fs = std::filesystem;

namespace {

const fs::path kData = MCLR_TEST_DATA;

struct SmallCheckpoint {
  std::vector<Sample> corpus = make_corpus(12, 2, 24);
  NormStats stats = normalize(corpus);
  ModelConfig cfg = [] {
    ModelConfig c = fixtures::tiny_model_config();
    c.vocab_size = Vocabulary::standard().size();
    c.max_tokens = kMaxTokens;
    return c;
  }();
};

}  // namespace

TEST(Persistence, ReadsGoldenTensorFiles) {
  const Tensor t = read_tensor(kData / "golden_2x3.mclr");
  EXPECT_EQ(t.dims, (std::vector<std::uint32_t>{2, 3}));
  const MatF m = to_matrix(t);
  EXPECT_EQ(m(0, 1), -2.5f);
  EXPECT_EQ(m(1, 0), 0.125f);
  EXPECT_EQ(m(1, 1), 1e-3f);
  EXPECT_TRUE(std::signbit(m(1, 2)));
  EXPECT_EQ(encode_tensor(t), read_file(kData / "golden_2x3.mclr"));

  const Tensor s = read_tensor(kData / "golden_scalar.mclr");
  EXPECT_TRUE(s.dims.empty());
  ASSERT_EQ(s.data.size(), 1u);
  EXPECT_EQ(s.data[0], 7.0f);
  EXPECT_EQ(encode_tensor(s).size(), 16u);
}

TEST(Persistence, TensorRoundTripIsExact) {
  Tensor t;
  t.dims = {2, 2, 2};
  t.data = {0.0f, -0.0f, std::numeric_limits<float>::denorm_min(), std::numeric_limits<float>::max(),
            -1.0f / 3.0f, 1e-30f, 123456.789f, -7.0f};
  const auto dir = fixtures::scratch_dir("tensor");
  write_tensor(dir / "t.mclr", t);
  const Tensor back = read_tensor(dir / "t.mclr");
  EXPECT_EQ(back.dims, t.dims);
  EXPECT_EQ(std::memcmp(back.data.data(), t.data.data(), 4 * t.data.size()), 0);
}

TEST(Persistence, RejectsCorruptTensors) {
  std::string bytes = read_file(kData / "golden_2x3.mclr");
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_tensor(bad), DataError);
  EXPECT_THROW(decode_tensor(bytes.substr(0, bytes.size() - 1)), DataError);
  bad = bytes;
  bad[4] = 2;
  EXPECT_THROW(decode_tensor(bad), DataError);
  Tensor t;
  t.dims = {3};
  t.data = {1, 2};
  EXPECT_THROW(encode_tensor(t), DataError);
  EXPECT_THROW(to_matrix(read_tensor(kData / "golden_scalar.mclr")), DataError);
  EXPECT_THROW(read_tensor(kData / "absent.mclr"), DataError);
}

TEST(Persistence, Base64Vectors) {
  const std::vector<std::pair<std::string, std::string>> cases{
      {"", ""}, {"f", "Zg=="}, {"fo", "Zm8="}, {"foo", "Zm9v"}, {"foob", "Zm9vYg=="}, {"foobar", "Zm9vYmFy"}};
  for (const auto& [plain, coded] : cases) {
    EXPECT_EQ(base64_encode(plain), coded);
    EXPECT_EQ(base64_decode(coded), plain);
  }
  EXPECT_THROW(base64_decode("Zm9"), DataError);
  EXPECT_THROW(base64_decode("Zm=v"), DataError);
  EXPECT_THROW(base64_decode("Z!9v"), DataError);
}

TEST(Persistence, CorpusJsonLinesRoundTrip) {
  const auto corpus = make_corpus(6, 3, 24);
  const auto dir = fixtures::scratch_dir("corpus");
  save_corpus(dir / "c.jsonl", corpus);
  const auto back = load_corpus(dir / "c.jsonl");
  ASSERT_EQ(back.size(), corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    EXPECT_EQ(back[i].prompt, corpus[i].prompt);
    EXPECT_EQ(back[i].verb_indices, corpus[i].verb_indices);
    EXPECT_EQ(back[i].motion.features, corpus[i].motion.features);
  }
  std::ofstream(dir / "bad.jsonl") << "{\"prompt\": \n";
  EXPECT_THROW(load_corpus(dir / "bad.jsonl"), DataError);
  std::ofstream(dir / "empty.jsonl") << "\n";
  EXPECT_THROW(load_corpus(dir / "empty.jsonl"), DataError);
}

TEST(Persistence, CheckpointRoundTripIsBitwise) {
  SmallCheckpoint s;
  Denoiser<float> model(s.cfg, 4);
  TrainConfig tc;
  tc.batch = 4;
  Trainer<float> trainer(model, DiffusionConfig{}, tc);
  trainer.run(s.corpus, 3);
  const auto dir = fixtures::scratch_dir("ckpt");
  save_checkpoint(dir, model, s.stats, DiffusionConfig{}, tc, trainer.step(), &trainer.optimizer());

  const Checkpoint ck = load_checkpoint(dir);
  EXPECT_EQ(ck.step, 3);
  EXPECT_EQ(ck.adam_step, 3);
  EXPECT_EQ(ck.stats.mean, s.stats.mean);
  EXPECT_EQ(ck.train.to_json(), tc.to_json());
  const Denoiser<float> loaded = instantiate(ck);
  EXPECT_EQ(checkpoint_hash(loaded), checkpoint_hash(model));

  Rng rng(2);
  const MatF x = fixtures::random_matrix_f(rng, 24, kFeatureDim);
  EXPECT_EQ(loaded.predict({x}, {400}, {{0, 3, 9}})[0], model.predict({x}, {400}, {{0, 3, 9}})[0]);

  AdamW<float> opt(instantiate(ck).params());
  restore_optimizer(ck, opt);
  EXPECT_EQ(opt.steps(), 3);
  EXPECT_EQ(opt.first_moments()[2], trainer.optimizer().first_moments()[2]);
}

TEST(Persistence, ManifestDescribesArchitecture) {
  SmallCheckpoint s;
  ModelConfig full = default_model_config();
  const Denoiser<float> model(full, 0);
  const auto dir = fixtures::scratch_dir("manifest");
  save_checkpoint(dir, model, s.stats, DiffusionConfig{}, TrainConfig{}, 0);
  const auto m = nlohmann::json::parse(read_file(dir / "manifest.json"));
  EXPECT_EQ(m["attention_layers"], 12);
  EXPECT_EQ(m["vocab_hash"], hex64(Vocabulary::standard().hash()));
  EXPECT_TRUE(m["optimizer"].is_null());
  EXPECT_EQ(m["parameters"].size(), static_cast<std::size_t>(model.params().size()));
  EXPECT_TRUE(load_checkpoint(dir).adam_m.empty());
}

TEST(Persistence, CheckpointLoadRejectsDamage) {
  SmallCheckpoint s;
  const Denoiser<float> model(s.cfg, 1);
  const auto dir = fixtures::scratch_dir("damaged");
  auto fresh = [&] {
    fs::remove_all(dir);
    save_checkpoint(dir, model, s.stats, DiffusionConfig{}, TrainConfig{}, 0);
  };

  fresh();
  fs::remove(dir / "params" / blob_name(model.params()[0].name));
  EXPECT_THROW(load_checkpoint(dir), DataError);

  fresh();
  std::ofstream(dir / "vocab.json") << R"(["<bos>", "<unk>", "a"])";
  EXPECT_THROW(load_checkpoint(dir), DataError);

  fresh();
  auto m = nlohmann::json::parse(read_file(dir / "manifest.json"));
  m["parameters"][1]["shape"] = {1, 1};
  std::ofstream(dir / "manifest.json") << m.dump();
  EXPECT_THROW(load_checkpoint(dir), DataError);

  fresh();
  std::ofstream(dir / "manifest.json") << "{";
  EXPECT_THROW(load_checkpoint(dir), DataError);

  EXPECT_THROW(load_checkpoint(dir / "nowhere"), DataError);
}

TEST(Persistence, MotionExportRoundTrip) {
  const auto m = synth_motion({{Action::walk, 2}}, 30, 5);
  const nlohmann::json j = nlohmann::json::parse(export_motion(m).dump());
  EXPECT_EQ(j["frames"], 30);
  EXPECT_EQ(j["joint_names"].size(), static_cast<std::size_t>(kJoints));
  const auto back = import_motion(j);
  EXPECT_LE((back.motion.features - m.features).cwiseAbs().maxCoeff(), 1e-5f);
  EXPECT_LE((back.positions - forward_kinematics(m.features)).cwiseAbs().maxCoeff(), 1e-5f);
  nlohmann::json broken = j;
  broken["frames"] = 31;
  EXPECT_THROW(import_motion(broken), DataError);
  broken = j;
  broken["features"][0] = {1, 2};
  EXPECT_THROW(import_motion(broken), DataError);
}

TEST(Persistence, AttentionDumpNamesAndShapes) {
  EXPECT_EQ(attention_file_name(AttentionKind::cross_attention, 2, 10, true), "attn_l02_s10_cross_cond.mclr");
  EXPECT_EQ(attention_file_name(AttentionKind::self_attention, 11, 3, false), "attn_l11_s03_self_null.mclr");
  std::vector<AttentionRecord> recs;
  for (int h = 1; h >= 0; --h) {
    AttentionRecord r;
    r.layer = 1;
    r.step = 4;
    r.head = h;
    r.map = MatF::Constant(3, 3, static_cast<float>(h));
    recs.push_back(r);
  }
  const auto dir = fixtures::scratch_dir("dump");
  const auto files = dump_attention(dir, recs);
  ASSERT_EQ(files.size(), 1u);
  const Tensor t = read_tensor(files[0]);
  EXPECT_EQ(t.dims, (std::vector<std::uint32_t>{2, 3, 3}));
  EXPECT_EQ(t.data.front(), 0.0f);
  EXPECT_EQ(t.data.back(), 1.0f);
}
