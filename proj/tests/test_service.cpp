#include <gtest/gtest.h>

#include <future>
#include <thread>

#include "cbllm/service.hpp"
#include "test_util.hpp"

using namespace cbllm;
using cbllm::testing::identity_model;
using cbllm::testing::numbered_concepts;
using cbllm::testing::random_matrix;
using cbllm::testing::random_rows;

namespace {

struct Service {
  cbllm::testing::FixtureModel f;
  std::unique_ptr<ModelService> svc;

  Service() {
    Rng rng(12);
    f = identity_model(numbered_concepts({3, 3}), random_rows(12, 6, rng),
                       random_matrix(2, 6, rng), {0.05, -0.05});
    DatasetSplit ds{"test", f.texts, std::vector<std::size_t>(12, 0), {"class0", "class1"}};
    for (std::size_t x = 0; x < 12; ++x) ds.labels[x] = x % 2;
    svc = std::make_unique<ModelService>(*f.model, ds, "fixture.ckpt");
  }

  ApiResponse get(const std::string& path, std::map<std::string, std::string> q = {}) {
    return std::as_const(*svc).handle({"GET", path, std::move(q), ""});
  }
  ApiResponse post(const std::string& path, const nlohmann::json& body) {
    return svc->handle({"POST", path, {}, body.dump()});
  }
};

}  // namespace

TEST(Service, SummaryAndClasses) {
  Service s;
  auto r = s.get("/model/summary");
  ASSERT_EQ(r.status, 200);
  EXPECT_EQ(r.body["k"], 6);
  EXPECT_EQ(r.body["n"], 2);
  EXPECT_EQ(r.body["version"], 0);
  EXPECT_EQ(r.body["checkpoint"], "fixture.ckpt");
  auto c = s.get("/classes");
  ASSERT_EQ(c.body["classes"].size(), 2u);
  EXPECT_EQ(c.body["classes"][1]["concepts"][0]["index"], 3);
  EXPECT_EQ(c.body["classes"][1]["concepts"][0]["text"], "c1_0");
}

TEST(Service, NeuronTopMatchesLibrary) {
  Service s;
  for (std::size_t j = 0; j < 6; ++j) {
    auto r = s.get("/neurons/" + std::to_string(j) + "/top", {{"k", "4"}});
    ASSERT_EQ(r.status, 200);
    auto lib = neuron_top_k(*s.f.model, s.f.texts, j, 4);
    ASSERT_EQ(r.body["top"].size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_EQ(r.body["top"][i]["sample"], lib.top[i].sample);
      EXPECT_EQ(r.body["top"][i]["activation"].get<double>(), lib.top[i].activation);
      EXPECT_EQ(r.body["top"][i]["text"], s.f.texts[lib.top[i].sample]);
    }
  }
  EXPECT_EQ(s.get("/neurons/2/top").body["top"].size(), kDefaultTopK);
}

TEST(Service, ExplanationMatchesLibrary) {
  Service s;
  for (std::size_t x = 0; x < 12; ++x) {
    auto r = s.get("/samples/" + std::to_string(x) + "/explanation", {{"r", "3"}});
    ASSERT_EQ(r.status, 200);
    auto lib = to_json(explain(*s.f.model, s.f.texts[x], 3, x));
    EXPECT_EQ(r.body["explanation"], lib["explanation"]);
    EXPECT_EQ(r.body["predicted"], lib["predicted"]);
    EXPECT_EQ(r.body["label"], x % 2);
  }
}

TEST(Service, PredictMatchesLibrary) {
  Service s;
  auto r = s.post("/predict", {{"text", "sample 3"}, {"r", 2}});
  ASSERT_EQ(r.status, 200);
  auto lib = to_json(explain(*s.f.model, "sample 3", 2));
  EXPECT_EQ(r.body["logits"], lib["logits"]);
  EXPECT_EQ(r.body["explanation"], lib["explanation"]);
}

TEST(Service, ErrorStatuses) {
  Service s;
  EXPECT_EQ(s.get("/neurons/6/top").status, 404);
  EXPECT_EQ(s.get("/neurons/abc/top").status, 400);
  EXPECT_EQ(s.get("/neurons/1/top", {{"k", "0"}}).status, 400);
  EXPECT_EQ(s.get("/samples/12/explanation").status, 404);
  EXPECT_EQ(s.get("/samples/-1/explanation").status, 400);
  EXPECT_EQ(s.get("/nothing").status, 404);
  EXPECT_EQ(s.post("/predict", {{"r", 2}}).status, 400);
  EXPECT_EQ(s.svc->handle({"POST", "/predict", {}, "{not json"}).status, 400);
  EXPECT_EQ(s.post("/unlearn", {{"concept_index", 99}}).status, 404);
  EXPECT_EQ(s.post("/unlearn", {{"concept_index", -1}}).status, 400);
  EXPECT_EQ(s.post("/unlearn", {{"concept_index", 1}, {"mode", "erase"}}).status, 400);
  EXPECT_EQ(s.post("/unlearn", nlohmann::json::object()).status, 400);
  EXPECT_EQ(s.svc->version(), 0u);
}

TEST(Service, UnlearnVersionsAndRestore) {
  Service s;
  auto before = s.get("/samples/0/explanation", {{"r", "6"}}).body;
  auto r = s.post("/unlearn", {{"concept_index", 1}, {"mode", "mask-neuron"}});
  ASSERT_EQ(r.status, 200);
  EXPECT_EQ(r.body["version"], 1);
  EXPECT_EQ(r.body["changed"], true);
  auto lib = unlearn(*s.f.model, 1, UnlearnMode::kMaskNeuron, s.f.texts);
  EXPECT_EQ(r.body["flipped"], to_json(lib.report)["flipped"]);
  EXPECT_EQ(s.get("/neurons/1/top").status, 409);
  EXPECT_EQ(s.get("/model/summary").body["unlearned"][0]["concept_index"], 1);

  // Explanations after unlearning match the library on the unlearned model.
  for (std::size_t x = 0; x < 12; ++x) {
    auto e = s.get("/samples/" + std::to_string(x) + "/explanation", {{"r", "6"}}).body;
    EXPECT_EQ(e["logits"], to_json(explain(lib.model, s.f.texts[x], 6))["logits"]);
  }

  auto again = s.post("/unlearn", {{"concept_index", 1}, {"mode", "mask-neuron"}});
  EXPECT_EQ(again.body["changed"], false);
  EXPECT_EQ(again.body["version"], 1);

  EXPECT_EQ(s.post("/restore", {{"expected_version", 0}}).status, 409);
  auto rs = s.post("/restore", {{"expected_version", 1}});
  ASSERT_EQ(rs.status, 200);
  EXPECT_EQ(rs.body["version"], 2);
  auto after = s.get("/samples/0/explanation", {{"r", "6"}}).body;
  EXPECT_EQ(after["logits"], before["logits"]);
  EXPECT_EQ(s.post("/restore", nlohmann::json::object()).body["changed"], false);
  EXPECT_EQ(s.svc->version(), 2u);

  auto audit = s.get("/audit").body["log"];
  ASSERT_EQ(audit.size(), 2u);
  EXPECT_EQ(audit[0]["op"], "unlearn");
  EXPECT_EQ(audit[1]["op"], "restore");
}

TEST(Service, ConcurrentMutationsOneWins) {
  Service s;
  s.svc->set_mutation_delay(std::chrono::milliseconds(300));
  auto a = std::async(std::launch::async, [&] {
    return s.post("/unlearn", {{"concept_index", 0}, {"expected_version", 0}});
  });
  std::this_thread::sleep_for(std::chrono::milliseconds(50));
  // A reader during the mutation sees version 0.
  EXPECT_EQ(s.get("/model/summary").body["version"], 0);
  auto b = s.post("/unlearn", {{"concept_index", 2}, {"expected_version", 0}});
  auto ra = a.get();
  std::multiset<int> statuses{ra.status, b.status};
  EXPECT_EQ(statuses, (std::multiset<int>{200, 409}));
  EXPECT_EQ(s.svc->version(), 1u);
  // Replaying the loser against the old version is still a conflict.
  EXPECT_EQ(s.post("/unlearn", {{"concept_index", 2}, {"expected_version", 0}}).status, 409);
}

TEST(Service, HttpRoundTrip) {
  Service s;
  httplib::Server svr;
  s.svc->bind(svr);
  const int port = svr.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread th([&] { svr.listen_after_bind(); });
  svr.wait_until_ready();

  httplib::Client cli("127.0.0.1", port);
  auto res = cli.Get("/neurons/0/top?k=2");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(res->get_header_value("Access-Control-Allow-Origin"), "*");
  auto body = nlohmann::json::parse(res->body);
  EXPECT_EQ(body["top"].size(), 2u);

  auto un = cli.Post("/unlearn", R"({"concept_index": 3})", "application/json");
  ASSERT_TRUE(un);
  EXPECT_EQ(un->status, 200);
  EXPECT_EQ(nlohmann::json::parse(un->body)["version"], 1);
  auto missing = cli.Get("/samples/100/explanation");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);
  auto pre = cli.Options("/unlearn");
  ASSERT_TRUE(pre);
  EXPECT_EQ(pre->status, 204);

  svr.stop();
  th.join();
}
