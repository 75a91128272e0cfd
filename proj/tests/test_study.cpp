#include <sys/stat.h>

#include <fstream>
#include <set>
#include <thread>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "semisr/study.hpp"
#include "semisr/study_server.hpp"
#include "test_util.hpp"

using namespace semisr;
using semisr::testing::TempDir;

namespace {

std::vector<StudyMethod> mock_methods(int n) {
  std::vector<StudyMethod> out;
  for (int i = 0; i < n; ++i)
    out.push_back({"method-label-" + std::to_string(i), [i](const ImageTensor& lr) {
                     auto up = upsample_naive(lr, 4);
                     return ImageTensor::from((up.data * (0.5 + 0.1 * i)).clamp(0, 1));
                   }});
  return out;
}

std::vector<PairedEntry> test_pairs(const TempDir& dir, int n) {
  semisr::testing::write_shapes(dir / "hr", n, 16, 9);
  SplitOptions opt;
  opt.n_paired = 0;
  opt.n_test = static_cast<size_t>(n);
  opt.hr_size = 16;
  opt.cache_dir = dir / "lr";
  return build_split(dir.path(), opt).test;
}

StudyExportOptions small_export(size_t n_images = 10) {
  StudyExportOptions o;
  o.seed = 42;
  o.n_images = n_images;
  o.hr_size = 16;
  return o;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Export, FiveMethodsTenImagesGiveFiftyItems) {
  TempDir dir;
  auto bundle = export_study(mock_methods(5), test_pairs(dir, 10), dir / "study", small_export());
  EXPECT_EQ(bundle.items.size(), 50u);
  EXPECT_EQ(bundle.images.size(), 10u);
  std::set<std::string> methods, items;
  for (const auto& it : bundle.items) {
    methods.insert(it.method_id);
    items.insert(it.item_id);
    EXPECT_TRUE(std::filesystem::exists(dir / "study" / it.candidate));
  }
  EXPECT_EQ(methods.size(), 5u);
  EXPECT_EQ(items.size(), 50u);
  for (const auto& im : bundle.images) EXPECT_TRUE(std::filesystem::exists(dir / "study" / im.reference));

  // Method labels only live in the restricted key file.
  const auto manifest = slurp(dir / "study" / "study.json");
  EXPECT_EQ(manifest.find("method-label"), std::string::npos);
  const auto key = dir / "study" / kMethodKeyFile;
  ASSERT_TRUE(std::filesystem::exists(key));
  EXPECT_NE(slurp(key).find("method-label-3"), std::string::npos);
  struct stat st {};
  ASSERT_EQ(::stat(key.c_str(), &st), 0);
  EXPECT_EQ(st.st_mode & 0777, 0600u);
}

TEST(Export, PresentationOrderShuffledPerImageAndReproducible) {
  TempDir dir;
  auto pairs = test_pairs(dir, 6);
  auto a = export_study(mock_methods(5), pairs, dir / "a", small_export());
  auto b = export_study(mock_methods(5), pairs, dir / "b", small_export());
  EXPECT_EQ(slurp(dir / "a" / "study.json"), slurp(dir / "b" / "study.json"));
  std::set<std::vector<std::string>> orders;
  for (size_t k = 0; k < 6; ++k) {
    std::vector<std::string> order;
    for (size_t m = 0; m < 5; ++m) order.push_back(a.items[k * 5 + m].method_id);
    orders.insert(order);
  }
  EXPECT_GT(orders.size(), 1u);
  auto other = small_export();
  other.seed = 43;
  auto c = export_study(mock_methods(5), pairs, dir / "c", other);
  EXPECT_NE(c.items[0].method_id, a.items[0].method_id);
}

TEST(Export, MinimalBundleAndErrors) {
  TempDir dir;
  auto pairs = test_pairs(dir, 1);
  auto b = export_study(mock_methods(1), pairs, dir / "one", small_export());
  EXPECT_EQ(b.items.size(), 1u);
  EXPECT_EQ(StudyBundle::load(dir / "one").items.size(), 1u);
  EXPECT_THROW(export_study({}, pairs, dir / "x", small_export()), ConfigError);
  EXPECT_THROW(export_study(mock_methods(1), {}, dir / "x", small_export()), EmptySetError);
  std::vector<StudyMethod> wrong{{"small", [](const ImageTensor& lr) { return lr; }}};
  EXPECT_THROW(export_study(wrong, pairs, dir / "x", small_export()), ShapeError);
  EXPECT_THROW(StudyBundle::load(dir / "missing"), IoError);
}

class SessionTest : public ::testing::Test {
 protected:
  void SetUp() override { bundle_ = export_study(mock_methods(5), test_pairs(dir_, 10), dir_ / "study", small_export()); }
  TempDir dir_;
  StudyBundle bundle_;
};

TEST_F(SessionTest, FreshSessionServesEveryItemOnce) {
  StudyService svc(bundle_, dir_ / "ratings.jsonl");
  auto open = svc.open_session("rater01");
  ASSERT_EQ(open.status, 200);
  EXPECT_EQ(open.body["total"], 50);
  EXPECT_EQ(open.body["done"], 0);
  const auto sid = open.body["session_id"].get<std::string>();
  std::set<std::string> seen;
  for (int i = 0; i < 50; ++i) {
    auto next = svc.next_item(sid);
    ASSERT_EQ(next.status, 200);
    ASSERT_FALSE(next.body["complete"].get<bool>());
    const auto item = next.body["item_id"].get<std::string>();
    EXPECT_TRUE(seen.insert(item).second) << "repeat " << item;
    EXPECT_EQ(next.body["reference"].get<std::string>().rfind("data:image/png;base64,", 0), 0u);
    auto ack = svc.submit(sid, {{"item_id", item}, {"score", 1 + i % 5}});
    ASSERT_EQ(ack.status, 200) << ack.body.dump();
    EXPECT_EQ(ack.body["done"], i + 1);
  }
  auto done = svc.next_item(sid);
  EXPECT_TRUE(done.body["complete"].get<bool>());
  EXPECT_FALSE(done.body.contains("candidate"));
  EXPECT_FALSE(done.body.contains("reference"));

  // exactly one record per item
  auto records = svc.records();
  ASSERT_EQ(records.size(), 50u);
  std::set<std::string> rated;
  for (const auto& r : records) rated.insert(r.item_id);
  EXPECT_EQ(rated, seen);
}

TEST_F(SessionTest, RaterIdSaltsThePermutation) {
  StudyService svc(bundle_, dir_ / "ratings.jsonl");
  EXPECT_NE(svc.item_order("alice"), svc.item_order("bob"));
  EXPECT_EQ(svc.item_order("alice"), svc.item_order("alice"));
  EXPECT_NE(svc.session_id_for("alice"), svc.session_id_for("bob"));
  EXPECT_EQ(svc.open_session("alice").body["session_id"], svc.open_session("alice").body["session_id"]);
  EXPECT_EQ(svc.open_session("bad id!").status, 422);
}

TEST_F(SessionTest, SubmissionRules) {
  StudyService svc(bundle_, dir_ / "ratings.jsonl");
  const auto sid = svc.open_session("r1").body["session_id"].get<std::string>();
  const auto item = svc.next_item(sid).body["item_id"].get<std::string>();

  auto six = svc.submit(sid, {{"item_id", item}, {"score", 6}});
  EXPECT_EQ(six.status, 422);
  EXPECT_EQ(svc.submit(sid, {{"item_id", item}, {"score", 0}}).status, 422);
  EXPECT_EQ(svc.submit(sid, {{"item_id", item}, {"score", 4.5}}).status, 422);
  EXPECT_EQ(svc.submit(sid, {{"item_id", item}}).status, 400);
  EXPECT_EQ(svc.open_session("r1").body["done"], 0);

  EXPECT_EQ(svc.submit(sid, {{"item_id", item}, {"score", 5}}).status, 200);
  EXPECT_EQ(svc.open_session("r1").body["done"], 1);
  const auto log_before = slurp(dir_ / "ratings.jsonl");
  auto replay = svc.submit(sid, {{"item_id", item}, {"score", 2}});
  EXPECT_EQ(replay.status, 409);
  EXPECT_EQ(slurp(dir_ / "ratings.jsonl"), log_before);
  EXPECT_EQ(svc.records().front().score, 5);  // first write wins

  // an item that is not the current one
  const auto order = svc.item_order("r1");
  const auto& later = bundle_.items[order[10]].item_id;
  EXPECT_EQ(svc.submit(sid, {{"item_id", later}, {"score", 3}}).status, 409);
  EXPECT_EQ(svc.submit(sid, {{"item_id", "it-nope"}, {"score", 3}}).status, 404);
  EXPECT_EQ(svc.submit("s-unknown", {{"item_id", item}, {"score", 3}}).status, 404);
  EXPECT_EQ(svc.next_item("s-unknown").status, 404);
}

TEST_F(SessionTest, CrashReplayKeepsAcknowledgedRatings) {
  std::string sid;
  std::vector<std::string> acked;
  {
    StudyService svc(bundle_, dir_ / "ratings.jsonl");
    sid = svc.open_session("r9").body["session_id"];
    for (int i = 0; i < 3; ++i) {
      const auto item = svc.next_item(sid).body["item_id"].get<std::string>();
      ASSERT_EQ(svc.submit(sid, {{"item_id", item}, {"score", 4}}).status, 200);
      acked.push_back(item);
    }
    svc.next_item(sid);  // served, never rated
  }
  // crash in the middle of a fourth append
  std::ofstream(dir_ / "ratings.jsonl", std::ios::app) << R"({"rater_id":"r9","image_id":"img-0)";

  StudyService svc(bundle_, dir_ / "ratings.jsonl");
  auto resumed = svc.open_session("r9");
  EXPECT_EQ(resumed.body["session_id"], sid);
  EXPECT_EQ(resumed.body["done"], 3);
  auto records = svc.records();
  ASSERT_EQ(records.size(), 3u);
  for (size_t i = 0; i < 3; ++i) EXPECT_EQ(records[i].item_id, acked[i]);
  const auto next = svc.next_item(sid).body["item_id"].get<std::string>();
  EXPECT_EQ(next, bundle_.items[svc.item_order("r9")[3]].item_id);
  EXPECT_EQ(svc.submit(sid, {{"item_id", next}, {"score", 2}}).status, 200);
  EXPECT_EQ(read_ratings(dir_ / "ratings.jsonl").size(), 4u);
}

TEST_F(SessionTest, ForeignLogIsRejected) {
  std::ofstream(dir_ / "foreign.jsonl")
      << R"({"rater_id":"x","image_id":"img-000","method_id":"m-00000000","score":3,"item_id":"it-zzz","session_id":"s-1","order":0})"
      << "\n";
  EXPECT_THROW(StudyService(bundle_, dir_ / "foreign.jsonl"), FormatError);
}

TEST_F(SessionTest, MosFromCollectedRatingsMatchesHandMeans) {
  StudyService svc(bundle_, dir_ / "ratings.jsonl");
  std::map<std::string, std::vector<int>> by_method;
  for (const std::string rater : {"a", "b"}) {
    const auto sid = svc.open_session(rater).body["session_id"].get<std::string>();
    for (int i = 0; i < 50; ++i) {
      const auto item = svc.next_item(sid).body["item_id"].get<std::string>();
      const int score = 1 + static_cast<int>(semisr::detail::fnv1a(rater + item) % 5);
      ASSERT_EQ(svc.submit(sid, {{"item_id", item}, {"score", score}}).status, 200);
      for (const auto& it : bundle_.items)
        if (it.item_id == item) by_method[it.method_id].push_back(score);
    }
  }
  auto table = mos_table(read_ratings(dir_ / "ratings.jsonl"));
  ASSERT_EQ(table.size(), 5u);
  for (const auto& row : table) {
    const auto& scores = by_method.at(row.method_id);
    double sum = 0;
    for (int s : scores) sum += s;
    EXPECT_DOUBLE_EQ(row.mean, sum / scores.size());
    EXPECT_EQ(row.count, scores.size());
  }
}

TEST_F(SessionTest, HttpRoundTripIsBlinded) {
  StudyService svc(bundle_, dir_ / "ratings.jsonl");
  std::filesystem::create_directories(dir_ / "ui");
  std::ofstream(dir_ / "ui" / "index.html") << "<html>rating</html>";
  StudyServer server(svc, dir_ / "ui");
  const int port = server.bind();
  server.start();

  httplib::Client cli("127.0.0.1", port);
  std::vector<std::string> payloads;
  auto get = [&](const std::string& path) {
    auto res = cli.Get(path);
    EXPECT_TRUE(res);
    payloads.push_back(res->body);
    return res;
  };

  auto health = get("/health");
  EXPECT_EQ(health->status, 200);
  EXPECT_EQ(nlohmann::json::parse(health->body)["status"], "ok");
  EXPECT_EQ(get("/index.html")->body, "<html>rating</html>");

  auto open = get("/session/http-rater");
  const auto sid = nlohmann::json::parse(open->body)["session_id"].get<std::string>();
  for (int i = 0; i < 50; ++i) {
    auto next = nlohmann::json::parse(get("/session/" + sid + "/next")->body);
    ASSERT_FALSE(next["complete"].get<bool>());
    nlohmann::json body = {{"item_id", next["item_id"]}, {"score", 3}};
    auto res = cli.Post("/session/" + sid + "/rating", body.dump(), "application/json");
    ASSERT_TRUE(res);
    ASSERT_EQ(res->status, 200) << res->body;
    payloads.push_back(res->body);
    if (i == 0) {
      auto dup = cli.Post("/session/" + sid + "/rating", body.dump(), "application/json");
      EXPECT_EQ(dup->status, 409);
      payloads.push_back(dup->body);
      auto bad = cli.Post("/session/" + sid + "/rating", R"({"item_id": "x", "score": 9})", "application/json");
      EXPECT_EQ(bad->status, 422);
      auto junk = cli.Post("/session/" + sid + "/rating", "{not json", "application/json");
      EXPECT_EQ(junk->status, 400);
    }
  }
  auto done = nlohmann::json::parse(get("/session/" + sid + "/next")->body);
  EXPECT_TRUE(done["complete"].get<bool>());
  EXPECT_EQ(get("/session/nope/next")->status, 404);
  server.stop();

  // No served payload names a method, by opaque id or by label.
  std::set<std::string> secrets;
  for (const auto& it : bundle_.items) secrets.insert(it.method_id);
  for (const auto& m : mock_methods(5)) secrets.insert(m.label);
  secrets.insert("method_id");
  for (const auto& p : payloads)
    for (const auto& s : secrets) EXPECT_EQ(p.find(s), std::string::npos) << s;
  EXPECT_EQ(svc.records().size(), 50u);
}

TEST_F(SessionTest, ConcurrentRatersAllPersist) {
  StudyService svc(bundle_, dir_ / "ratings.jsonl");
  StudyServer server(svc);
  const int port = server.bind();
  server.start();
  std::vector<std::thread> raters;
  for (int r = 0; r < 4; ++r)
    raters.emplace_back([port, r] {
      httplib::Client cli("127.0.0.1", port);
      auto sid = nlohmann::json::parse(cli.Get("/session/rater" + std::to_string(r))->body)["session_id"]
                     .get<std::string>();
      for (int i = 0; i < 10; ++i) {
        auto next = nlohmann::json::parse(cli.Get("/session/" + sid + "/next")->body);
        cli.Post("/session/" + sid + "/rating", nlohmann::json{{"item_id", next["item_id"]}, {"score", 1 + r}}.dump(),
                 "application/json");
      }
    });
  for (auto& t : raters) t.join();
  server.stop();
  EXPECT_EQ(read_ratings(dir_ / "ratings.jsonl").size(), 40u);
}
