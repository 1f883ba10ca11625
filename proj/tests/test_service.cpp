#include <gtest/gtest.h>

#include <thread>

#include "mclr/service.hpp"
#include "support.hpp"

using namespace mclr;
using nlohmann::json;

namespace {

Service tiny_service() {
  auto corpus = make_corpus(10, 2, 24);
  ModelConfig c = fixtures::tiny_model_config();
  c.vocab_size = Vocabulary::standard().size();
  c.max_tokens = kMaxTokens;
  return Service(Denoiser<float>(c, 2), normalize(corpus), DiffusionConfig{});
}

StoredSession stub(const std::string& prompt) { return StoredSession{prompt, 0, 20, 2.5, {}, std::nullopt}; }

class Http : public ::testing::Test {
 protected:
  void SetUp() override {
    service_.mount(server_);
    port_ = server_.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port_, 0);
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  void TearDown() override {
    server_.stop();
    thread_.join();
  }
  httplib::Client client() const { return httplib::Client("127.0.0.1", port_); }

  Service service_ = tiny_service();
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace

TEST(Service, HealthReportsCheckpointHash) {
  Service s = tiny_service();
  const auto h = s.health();
  EXPECT_EQ(h["status"], "ok");
  EXPECT_EQ(h["checkpoint_hash"].get<std::string>().size(), 16u);
}

TEST(Service, GenerateStoresSession) {
  Service s = tiny_service();
  const auto r = s.generate({{"prompt", "a man jumps."}, {"seed", 3}, {"frames", 20}});
  EXPECT_EQ(r["id"], "s1");
  EXPECT_EQ(r["word_tokens"], (json{"<bos>", "a", "man", "jumps"}));
  EXPECT_EQ(r["motion"]["frames"], 20);
  EXPECT_EQ(s.sessions().size(), 1u);
  EXPECT_THROW(s.generate({{"seed", 3}}), ApiError);
  EXPECT_THROW(s.generate({{"prompt", 7}}), ApiError);
  EXPECT_THROW(s.generate({{"prompt", "a man jumps."}, {"frames", 4}}), RangeError);
}

TEST(Service, NoopEditMatchesGeneration) {
  Service s = tiny_service();
  const auto g = s.generate({{"prompt", "a man jumps."}, {"seed", 1}, {"frames", 20}});
  const auto e = s.edit({{"base_id", g["id"]}, {"directive", {{"op", "emphasize"}, {"word_index", 2}, {"weight", 0.0}}}});
  EXPECT_EQ(e["reference_motion"], g["motion"]);
  EXPECT_EQ(e["edited_motion"], g["motion"]);
  EXPECT_EQ(e["diff_summary"]["max_frame_feature_delta"], 0.0);
  EXPECT_EQ(e["id"], "s2");
  EXPECT_THROW(s.edit({{"base_id", "s99"}, {"directive", {{"op", "erase"}}}}), ApiError);
  EXPECT_THROW(s.edit({{"base_id", g["id"]}, {"directive", {{"op", "nope"}}}}), ApiError);
  EXPECT_THROW(s.edit({{"base_id", g["id"]}}), ApiError);
  EXPECT_THROW(s.edit({{"directive", {{"op", "erase"}}}}), ApiError);
}

TEST(Service, AttentionPayloads) {
  Service s = tiny_service();
  const auto g = s.generate({{"prompt", "a man jumps twice."}, {"frames", 20}});
  const std::string id = g["id"];
  const auto cross = s.attention(id, {{"kind", "cross"}});
  EXPECT_EQ(cross["columns"], (json{"<bos>", "a", "man", "jumps", "twice"}));
  EXPECT_EQ(cross["dims"], (json{20, 5}));
  EXPECT_EQ(cross["layer"], 2);
  EXPECT_EQ(cross["step"], 10);
  for (const auto& row : cross["values"]) {
    double sum = 0;
    for (double v : row) sum += v;
    EXPECT_NEAR(sum, 1.0, 1e-5);
  }
  const auto self = s.attention(id, {{"kind", "self"}, {"layer", "3"}, {"step", "1"}, {"head", "1"}});
  EXPECT_EQ(self["dims"], (json{10, 10}));
  EXPECT_FALSE(self.contains("columns"));
  EXPECT_THROW(s.attention(id, {{"kind", "sideways"}}), ApiError);
  EXPECT_THROW(s.attention(id, {{"layer", "x"}}), ApiError);
  EXPECT_THROW(s.attention(id, {{"kind", "self"}, {"layer", "2"}}), ApiError);
  EXPECT_THROW(s.attention(id, {{"sample", "reference"}}), ApiError);
  EXPECT_THROW(s.attention("s42", {}), ApiError);
}

TEST(Service, EditedAttentionCarriesBothSamples) {
  Service s = tiny_service();
  const auto e = s.edit({{"base", {{"prompt", "a man jumps."}, {"frames", 20}}},
                         {"directive", {{"op", "emphasize"}, {"word_index", 2}, {"weight", 0.5}}}});
  const std::string id = e["id"];
  const auto edited = s.attention(id, {{"kind", "cross"}});
  const auto ref = s.attention(id, {{"kind", "cross"}, {"sample", "reference"}});
  EXPECT_TRUE(edited["edited"].get<bool>());
  EXPECT_FALSE(ref["edited"].get<bool>());
  EXPECT_NEAR(edited["values"][0][3].get<double>() - ref["values"][0][3].get<double>(), 0.5, 0.2);
}

TEST(Service, CountFromPayloadAndSession) {
  Service s = tiny_service();
  Rng rng(2);
  const MatD map = fixtures::bump_map(rng, 3, 64);
  json rows = json::array();
  for (Eigen::Index r = 0; r < map.rows(); ++r) rows.push_back(std::vector<double>(map.row(r).data(), map.row(r).data() + map.cols()));
  const auto c = s.count({{"attention", rows}});
  EXPECT_EQ(c["count"], count_actions(map));
  EXPECT_EQ(c["per_row_peaks"].size(), 16u);
  EXPECT_EQ(s.count({{"attention", rows}, {"config", {{"downsample_factor", 2}}}})["config"]["downsample_factor"], 2);
  EXPECT_THROW(s.count({{"attention", json::array({json::array({1, 2}), json::array({3})})}}), ApiError);
  EXPECT_THROW(s.count({}), ApiError);

  const auto g = s.generate({{"prompt", "a man jumps."}, {"frames", 20}});
  EXPECT_TRUE(s.count({{"id", g["id"]}, {"layer", 1}, {"step", 10}})["count"].is_number());
  EXPECT_THROW(s.count({{"id", g["id"]}, {"layer", 2}, {"step", 10}}), ApiError);
}

TEST(Service, SessionStoreEvictsLeastRecentlyUsed) {
  SessionStore store(2);
  const auto a = store.put(stub("a"));
  const auto b = store.put(stub("b"));
  ASSERT_NE(store.get(a), nullptr);
  const auto c = store.put(stub("c"));
  EXPECT_EQ(store.size(), 2u);
  EXPECT_NE(store.get(a), nullptr);
  EXPECT_EQ(store.get(b), nullptr);
  EXPECT_EQ(store.get(c)->prompt, "c");
}

TEST_F(Http, RoutesAndStatusCodes) {
  auto cli = client();
  auto health = cli.Get("/api/v1/health");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 200);
  EXPECT_EQ(health->get_header_value("Access-Control-Allow-Origin"), "*");
  EXPECT_EQ(json::parse(health->body)["status"], "ok");
  EXPECT_EQ(cli.Get("/api/health")->status, 200);

  auto gen = cli.Post("/api/v1/generate", R"({"prompt": "a man jumps.", "frames": 20})", "application/json");
  ASSERT_EQ(gen->status, 200);
  const std::string id = json::parse(gen->body)["id"];
  auto att = cli.Get("/api/v1/attention/" + id + "?kind=cross&layer=4&step=2");
  ASSERT_EQ(att->status, 200);
  EXPECT_EQ(json::parse(att->body)["columns"].size(), 4u);

  EXPECT_EQ(cli.Post("/api/v1/generate", "{not json", "application/json")->status, 400);
  EXPECT_EQ(cli.Post("/api/v1/generate", R"({"frames": 20})", "application/json")->status, 400);
  EXPECT_EQ(cli.Post("/api/v1/generate", R"({"prompt": "a man jumps.", "frames": 3})", "application/json")->status, 422);
  const auto bad_edit = cli.Post("/api/v1/edit", R"({"base_id": ")" + id + R"(", "directive": {"op": "emphasize", "word_index": 2, "weight": 4}})",
                                 "application/json");
  EXPECT_EQ(bad_edit->status, 422);
  EXPECT_TRUE(json::parse(bad_edit->body).contains("error"));
  EXPECT_EQ(cli.Get("/api/v1/attention/s77")->status, 404);
  EXPECT_EQ(cli.Get("/api/v1/nothing")->status, 404);
}

TEST_F(Http, CorsPreflight) {
  auto cli = client();
  auto res = cli.Options("/api/v1/edit");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 204);
  EXPECT_EQ(res->get_header_value("Access-Control-Allow-Origin"), "*");
  EXPECT_NE(res->get_header_value("Access-Control-Allow-Methods").find("POST"), std::string::npos);
}
