#include <gtest/gtest.h>

#include <random>

#include "recap/vecstore.hpp"
#include "support/oracles.hpp"
#include "support/temp_dir.hpp"

namespace {

using recap::CaptionRecord;
using recap::Datastore;
using recap::Provenance;
using recap::Vector;

CaptionRecord human(std::string id, Vector v, std::string text = "a caption") {
  return {std::move(id), std::move(text), std::move(v), Provenance::human, 0, std::nullopt};
}

CaptionRecord synthetic(std::string id, Vector v, std::uint32_t iteration = 1) {
  return {std::move(id), "synthetic caption", std::move(v), Provenance::synthetic, iteration, "img-0"};
}

Vector axis(Eigen::Index d, Eigen::Index i) { return Vector::Unit(d, i); }

std::vector<CaptionRecord> random_records(std::mt19937_64& rng, std::size_t n, Eigen::Index d) {
  const Eigen::MatrixXd m = oracle::gaussian(rng, static_cast<Eigen::Index>(n), d);
  std::vector<CaptionRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(human("c" + std::to_string(i), m.row(static_cast<Eigen::Index>(i)).transpose()));
  }
  return out;
}

Datastore axes_store() {
  std::vector<CaptionRecord> recs;
  for (int i = 0; i < 3; ++i) recs.push_back(human("axis" + std::to_string(i + 1), axis(3, i)));
  return Datastore::build(std::move(recs), "axes");
}

std::vector<std::size_t> indices(const std::vector<recap::Neighbor>& ns) {
  std::vector<std::size_t> out;
  for (const auto& n : ns) out.push_back(n.index);
  return out;
}

std::vector<std::vector<double>> rows_of(const Datastore& s) {
  std::vector<std::vector<double>> rows;
  for (const auto& r : s.records()) rows.emplace_back(r.embedding.data(), r.embedding.data() + r.embedding.size());
  return rows;
}

std::vector<std::string> ids_of(const Datastore& s) {
  std::vector<std::string> ids;
  for (const auto& r : s.records()) ids.push_back(r.caption_id);
  return ids;
}

TEST(Build, AxesManifest) {
  const auto s = axes_store();
  EXPECT_EQ(s.manifest().human_count, 3u);
  EXPECT_EQ(s.manifest().synthetic_count, 0u);
  EXPECT_EQ(s.dim(), 3u);
  EXPECT_EQ(s.manifest().dataset_tag, "axes");
}

TEST(Build, DuplicateIdIsNamed) {
  std::vector<CaptionRecord> recs{human("dup", axis(2, 0)), human("dup", axis(2, 1))};
  try {
    Datastore::build(std::move(recs));
    FAIL();
  } catch (const recap::ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("'dup'"), std::string::npos);
  }
}

TEST(Build, RejectsInvalidRecords) {
  EXPECT_THROW(Datastore::build({}), recap::ValidationError);
  EXPECT_THROW(Datastore::build({human("a", axis(2, 0)), human("b", axis(3, 0))}), recap::ValidationError);
  EXPECT_THROW(Datastore::build({human("a", Vector::Zero(2))}), recap::ValidationError);
  EXPECT_THROW(Datastore::build({human("a", axis(2, 0), "")}), recap::ValidationError);
  EXPECT_THROW(Datastore::build({human("", axis(2, 0))}), recap::ValidationError);
  auto bad_iter = human("a", axis(2, 0));
  bad_iter.dal_iteration = 2;
  EXPECT_THROW(Datastore::build({bad_iter}), recap::ValidationError);
  Vector nan = axis(2, 0);
  nan(1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(Datastore::build({human("a", nan)}), recap::ValidationError);
}

TEST(Build, DuplicateTextsAreKept) {
  const auto s = Datastore::build({human("a", axis(2, 0), "same"), human("b", axis(2, 1), "same")});
  EXPECT_EQ(s.size(), 2u);
}

TEST(Build, EmbeddingsAreUnitNorm) {
  std::mt19937_64 rng(1);
  const auto s = Datastore::build(random_records(rng, 50, 7));
  for (const auto& r : s.records()) EXPECT_NEAR(r.embedding.norm(), 1.0, 1e-6);
}

TEST(Build, LargeStoreAtFullDimension) {
  std::mt19937_64 rng(2);
  const std::size_t n = 145000;
  std::vector<CaptionRecord> recs;
  recs.reserve(n);
  std::normal_distribution<double> g;
  for (std::size_t i = 0; i < n; ++i) {
    Vector v(1024);
    for (auto& x : v) x = g(rng);
    recs.push_back(human("c" + std::to_string(i), std::move(v)));
  }
  const auto s = Datastore::build(std::move(recs));
  EXPECT_EQ(s.size(), n);
  EXPECT_EQ(s.manifest().human_count, n);
}

TEST(TopK, AxisQuery) {
  const auto s = axes_store();
  const auto r = s.topk(axis(3, 0), 1);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(s.at(r[0].index).caption_id, "axis1");
  EXPECT_DOUBLE_EQ(r[0].score, 1.0);
}

TEST(TopK, KLargerThanStoreReturnsEverythingSorted) {
  const auto s = axes_store();
  Vector q(3);
  q << 0.1, 0.5, 0.3;
  const auto r = s.topk(q, 10);
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(s.at(r[0].index).caption_id, "axis2");
  EXPECT_EQ(s.at(r[1].index).caption_id, "axis3");
  EXPECT_EQ(s.at(r[2].index).caption_id, "axis1");
}

TEST(TopK, TiesBreakByCaptionId) {
  const auto s = Datastore::build({human("zeta", axis(2, 0)), human("alpha", axis(2, 0)), human("mid", axis(2, 1))});
  const auto r = s.topk(axis(2, 0), 2);
  EXPECT_EQ(s.at(r[0].index).caption_id, "alpha");
  EXPECT_EQ(s.at(r[1].index).caption_id, "zeta");
}

TEST(TopK, Errors) {
  const auto s = axes_store();
  EXPECT_THROW(s.topk(axis(3, 0), 0), recap::ValidationError);
  EXPECT_THROW(s.topk(axis(4, 0), 1), recap::ValidationError);
  Vector nan = axis(3, 0);
  nan(2) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(s.topk(nan, 1), recap::ValidationError);
}

TEST(TopK, ZeroQueryScoresZero) {
  const auto s = axes_store();
  for (const auto& n : s.topk(Vector::Zero(3), 3)) EXPECT_EQ(n.score, 0.0);
}

TEST(TopK, MatchesBruteForceScan) {
  std::mt19937_64 rng(3);
  const auto s = Datastore::build(random_records(rng, 10000, 16));
  const auto rows = rows_of(s);
  const auto ids = ids_of(s);
  for (int q = 0; q < 100; ++q) {
    const Vector query = oracle::gaussian(rng, 16, 1).col(0);
    const std::vector<double> qv(query.data(), query.data() + 16);
    for (std::size_t k : {1u, 5u, 13u, 50u}) {
      const auto got = s.topk(query, k);
      ASSERT_EQ(indices(got), oracle::brute_topk(rows, ids, qv, k)) << "query " << q << " k " << k;
      for (std::size_t i = 1; i < got.size(); ++i) EXPECT_GE(got[i - 1].score, got[i].score);
      for (const auto& n : got) {
        EXPECT_GE(n.score, -1.0);
        EXPECT_LE(n.score, 1.0);
      }
    }
  }
}

TEST(TopK, InsertionKeepsRelativeOrder) {
  std::mt19937_64 rng(4);
  auto s = Datastore::build(random_records(rng, 300, 8));
  for (int t = 0; t < 30; ++t) {
    const Vector q = oracle::gaussian(rng, 8, 1).col(0);
    const auto before = indices(s.topk(q, 20));
    s = s.add_synthetic(synthetic("syn" + std::to_string(t), oracle::gaussian(rng, 8, 1).col(0)));
    const std::size_t added = s.size() - 1;
    auto after = indices(s.topk(q, 21));
    std::erase(after, added);
    after.resize(std::min<std::size_t>(after.size(), 20));
    EXPECT_EQ(after, before);
  }
}

TEST(AddSynthetic, CountsAndErrors) {
  const auto s = axes_store();
  const auto s1 = s.add_synthetic(synthetic("syn-1", axis(3, 1)), recap::AuditEntry{0.8, 0.5, "aclip"});
  EXPECT_EQ(s.manifest().synthetic_count, 0u);  // original version untouched
  EXPECT_EQ(s1.manifest().synthetic_count, 1u);
  EXPECT_EQ(s1.manifest().human_count, 3u);
  EXPECT_EQ(s1.audit().at("syn-1").score, 0.8);
  EXPECT_THROW(s1.add_synthetic(synthetic("syn-1", axis(3, 2))), recap::ValidationError);
  EXPECT_THROW(s1.add_synthetic(synthetic("axis1", axis(3, 2))), recap::ValidationError);
  EXPECT_THROW(s.add_synthetic(human("h", axis(3, 0))), recap::ValidationError);
  EXPECT_THROW(s.add_synthetic(synthetic("z", axis(3, 0), 0)), recap::ValidationError);
}

TEST(AddSynthetic, BatchIsAllOrNothing) {
  const auto s = axes_store();
  std::vector<Datastore::Addition> batch{{synthetic("a", axis(3, 0)), std::nullopt},
                                         {synthetic("a", axis(3, 1)), std::nullopt}};
  EXPECT_THROW(s.add_synthetic(std::move(batch)), recap::ValidationError);
  EXPECT_EQ(s.size(), 3u);
}

TEST(AddSynthetic, PerIterationVolumeAtDatasetScale) {
  // 566,747 human captions; one iteration adds 42,320 synthetic ones on average.
  std::mt19937_64 rng(5);
  const std::size_t humans = 566747, added = 42320;
  std::vector<CaptionRecord> recs;
  recs.reserve(humans);
  std::normal_distribution<double> g;
  for (std::size_t i = 0; i < humans; ++i) {
    Vector v(4);
    for (auto& x : v) x = g(rng);
    recs.push_back(human("h" + std::to_string(i), std::move(v)));
  }
  const auto s = Datastore::build(std::move(recs));
  std::vector<Datastore::Addition> batch;
  batch.reserve(added);
  for (std::size_t i = 0; i < added; ++i) {
    Vector v(4);
    for (auto& x : v) x = g(rng);
    batch.push_back({synthetic("s" + std::to_string(i), std::move(v)), std::nullopt});
  }
  const auto next = s.add_synthetic(std::move(batch));
  EXPECT_EQ(next.manifest().human_count, humans);
  EXPECT_EQ(next.manifest().synthetic_count, added);
  EXPECT_EQ(next.size() - s.size(), added);
}

TEST(Persistence, RoundTripIsIdentity) {
  testing_support::TempDir dir;
  std::mt19937_64 rng(6);
  auto s = Datastore::build(random_records(rng, 40, 5), "coco", "abc123");
  s = s.add_synthetic(synthetic("syn-\xe2\x82\xac", oracle::gaussian(rng, 5, 1).col(0), 2),
                      recap::AuditEntry{0.71, 0.6, "ref_aclip"});
  s = s.add_synthetic(synthetic("syn-b", oracle::gaussian(rng, 5, 1).col(0), 3));
  s.save(dir.path());
  const auto back = Datastore::load(dir.path());
  EXPECT_TRUE(back == s);
  EXPECT_EQ(back.manifest().map_fingerprint, "abc123");
  EXPECT_EQ(back.audit().size(), 1u);
  // Saving again yields identical bytes.
  testing_support::TempDir again;
  back.save(again.path());
  for (const char* f : {"manifest.json", "records.jsonl", "embeddings.embx", "audit.jsonl"}) {
    EXPECT_EQ(recap::read_file_bytes(dir / f), recap::read_file_bytes(again / f)) << f;
  }
}

TEST(Persistence, LargeStoreGivesIdenticalProbeResults) {
  testing_support::TempDir dir;
  std::mt19937_64 rng(7);
  const auto s = Datastore::build(random_records(rng, 145000, 64));
  s.save(dir.path());
  const auto back = Datastore::load(dir.path());
  ASSERT_EQ(back.size(), s.size());
  for (int q = 0; q < 10; ++q) {
    const Vector query = oracle::gaussian(rng, 64, 1).col(0);
    const auto a = s.topk(query, 13), b = back.topk(query, 13);
    ASSERT_EQ(indices(a), indices(b));
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].score, b[i].score);
  }
}

class CorruptedStore : public ::testing::TestWithParam<const char*> {};

TEST_P(CorruptedStore, FailsCrc) {
  testing_support::TempDir dir;
  std::mt19937_64 rng(8);
  auto s = Datastore::build(random_records(rng, 10, 4));
  s = s.add_synthetic(synthetic("x", axis(4, 0)), recap::AuditEntry{1.0, 0.5, "aclip"});
  s.save(dir.path());
  auto bytes = recap::read_file_bytes(dir / GetParam());
  bytes[bytes.size() / 2] ^= std::byte{0x01};
  recap::write_file_bytes(dir / GetParam(), bytes);
  try {
    Datastore::load(dir.path());
    FAIL();
  } catch (const recap::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("CRC"), std::string::npos) << e.what();
  }
}

INSTANTIATE_TEST_SUITE_P(Files, CorruptedStore, ::testing::Values("records.jsonl", "embeddings.embx", "audit.jsonl"));

TEST(Persistence, EditedManifestFailsCrc) {
  testing_support::TempDir dir;
  std::mt19937_64 rng(9);
  Datastore::build(random_records(rng, 5, 4), "tag-a", "fp").save(dir.path());
  auto text = recap::read_file_text(dir / "manifest.json");
  const auto pos = text.find("tag-a");
  ASSERT_NE(pos, std::string::npos);
  text[pos + 4] = 'b';
  recap::write_file_text(dir / "manifest.json", text);
  try {
    Datastore::load(dir.path());
    FAIL();
  } catch (const recap::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("manifest.json CRC"), std::string::npos) << e.what();
  }
}

TEST(Persistence, TruncationVersionAndMissingFiles) {
  testing_support::TempDir dir;
  axes_store().save(dir.path());
  auto records = recap::read_file_text(dir / "records.jsonl");
  recap::write_file_text(dir / "records.jsonl", records.substr(0, records.size() - 4));
  EXPECT_THROW(Datastore::load(dir.path()), recap::FormatError);
  recap::write_file_text(dir / "records.jsonl", records);
  EXPECT_NO_THROW(Datastore::load(dir.path()));

  auto manifest = nlohmann::json::parse(recap::read_file_text(dir / "manifest.json"));
  manifest["format_version"] = 99;
  recap::write_file_text(dir / "manifest.json", manifest.dump());
  EXPECT_THROW(Datastore::load(dir.path()), recap::FormatError);
  recap::write_file_text(dir / "manifest.json", "{not json");
  EXPECT_THROW(Datastore::load(dir.path()), recap::FormatError);

  testing_support::TempDir empty;
  EXPECT_THROW(Datastore::load(empty.path()), recap::ValidationError);
}

}  // namespace
