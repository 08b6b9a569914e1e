#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "attrib/errors.hpp"
#include "attrib/store.hpp"
#include "test_util.hpp"

using namespace attrib;

TEST_CASE("embedding file round-trips byte for byte") {
  TempDir dir("store_roundtrip");
  const EmbeddingMatrix m(4, {1, 0, 0, 0, 0, 1, 0, 0, 0.5f, 0.5f, 0.5f, 0.5f}, {"a", "b", "c"},
                          true);
  write_embeddings(m, dir / "x.emb");
  const auto loaded = load_embeddings(dir / "x.emb");
  CHECK(loaded.count() == 3);
  CHECK(loaded.dim() == 4);
  CHECK(loaded.normalized());
  CHECK(loaded.ids() == m.ids());
  CHECK(loaded.data() == m.data());
  CHECK(std::filesystem::file_size(dir / "x.emb") == kEmbeddingHeaderBytes + 3 * 4 * 4);

  write_embeddings(loaded, dir / "y.emb");
  CHECK(read_bytes(dir / "x.emb") == read_bytes(dir / "y.emb"));
  CHECK(read_bytes(dir / "x.ids") == read_bytes(dir / "y.ids"));
}

TEST_CASE("round-trip property over random matrices") {
  TempDir dir("store_prop");
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t dim = 1 + rng.below(17);
    const std::size_t count = rng.below(30);
    const auto m = random_matrix(rng, count, dim, trial % 2 == 0);
    write_embeddings(m, dir / "p.emb");
    const auto bytes = read_bytes(dir / "p.emb");
    write_embeddings(load_embeddings(dir / "p.emb"), dir / "q.emb");
    CHECK(bytes == read_bytes(dir / "q.emb"));
  }
}

TEST_CASE("header layout") {
  TempDir dir("store_header");
  write_embeddings(EmbeddingMatrix(2, {3, 4}, {"r"}, false), dir / "h.emb");
  const auto b = read_bytes(dir / "h.emb");
  REQUIRE(b.size() == 44);
  CHECK(std::memcmp(b.data(), "AEMB", 4) == 0);
  CHECK(b[4] == 1);
  CHECK(b[8] == 2);
  CHECK(b[12] == 1);
  CHECK(b[20] == 0);
  for (std::size_t i = 21; i < 36; ++i) CHECK(b[i] == 0);
  float first;
  std::memcpy(&first, b.data() + 36, 4);
  CHECK(first == 3.0f);
}

TEST_CASE("malformed embedding files") {
  TempDir dir("store_bad");
  const EmbeddingMatrix m(4, std::vector<float>(12, 0.5f), {"a", "b", "c"}, true);
  write_embeddings(m, dir / "ok.emb");
  auto bytes = read_bytes(dir / "ok.emb");

  SUBCASE("truncated payload") {
    write_bytes(dir / "ok.emb", {bytes.begin(), bytes.end() - 3});
    CHECK_THROWS_AS(load_embeddings(dir / "ok.emb"), FormatError);
  }
  SUBCASE("header claims 512 dims, payload holds 511 per row") {
    auto b = bytes;
    b.resize(kEmbeddingHeaderBytes);
    const std::uint32_t dim = 512;
    std::memcpy(b.data() + 8, &dim, 4);
    b.resize(kEmbeddingHeaderBytes + 511 * 3 * 4, 0);
    write_bytes(dir / "ok.emb", b);
    CHECK_THROWS_AS(load_embeddings(dir / "ok.emb"), FormatError);
  }
  SUBCASE("bad magic") {
    bytes[0] = 'X';
    write_bytes(dir / "ok.emb", bytes);
    CHECK_THROWS_AS(load_embeddings(dir / "ok.emb"), FormatError);
  }
  SUBCASE("nonzero reserved byte") {
    bytes[30] = 1;
    write_bytes(dir / "ok.emb", bytes);
    CHECK_THROWS_AS(load_embeddings(dir / "ok.emb"), FormatError);
  }
  SUBCASE("id count mismatch") {
    std::ofstream(dir / "ok.ids") << "a\nb\n";
    CHECK_THROWS_AS(load_embeddings(dir / "ok.emb"), ConsistencyError);
  }
  SUBCASE("duplicate ids") {
    std::ofstream(dir / "ok.ids") << "a\nb\na\n";
    CHECK_THROWS_AS(load_embeddings(dir / "ok.emb"), ConsistencyError);
  }
  SUBCASE("NaN rows are reported by id") {
    const float nan = std::nanf("");
    std::memcpy(bytes.data() + kEmbeddingHeaderBytes + 4 * 4 + 8, &nan, 4);
    write_bytes(dir / "ok.emb", bytes);
    try {
      load_embeddings(dir / "ok.emb");
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("b") != std::string::npos);
    }
  }
}

TEST_CASE("normalize") {
  const EmbeddingMatrix m(2, {3, 4, 0.6f, 0.8f}, {"x", "y"}, false);
  const auto n = normalize(m);
  CHECK(n.normalized());
  CHECK(n.row(0)[0] == doctest::Approx(0.6).epsilon(1e-7));
  CHECK(n.row(0)[1] == doctest::Approx(0.8).epsilon(1e-7));
  CHECK(std::abs(n.row(1)[0] - 0.6f) <= 1e-7f);
  CHECK(std::abs(n.row(1)[1] - 0.8f) <= 1e-7f);

  CHECK_THROWS_AS(normalize(EmbeddingMatrix(2, {1, 1, 0, 0}, {"ok", "zero"}, false)), DataError);
}

TEST_CASE("normalize is idempotent bitwise and yields unit rows") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto m = random_matrix(rng, 50, 1 + rng.below(64), false, 3.0);
    const auto once = normalize(m);
    const auto twice = normalize(once);
    CHECK(once.data() == twice.data());
    for (std::size_t i = 0; i < once.count(); ++i) {
      double sq = 0.0;
      for (float v : once.row(i)) sq += double(v) * v;
      CHECK(std::abs(std::sqrt(sq) - 1.0) < 1e-4);
    }
  }
}

namespace {

DatasetManifest small_manifest(std::size_t distractors) {
  std::vector<ManifestRecord> r;
  for (int m = 0; m < 2; ++m) {
    const std::string model = "m" + std::to_string(m);
    r.push_back({model + "_e0", Role::kExemplar, model, Split::kTest, "", "src"});
    r.push_back({model + "_e1", Role::kExemplar, model, Split::kTest, "", "src"});
    for (int s = 0; s < 5; ++s)
      r.push_back({model + "_s" + std::to_string(s), Role::kSynthesized, model, Split::kTest,
                   s % 2 ? "gpt" : "procedural", "src"});
  }
  for (std::size_t d = 0; d < distractors; ++d)
    r.push_back({"d" + std::to_string(d), Role::kDistractor, "", Split::kTrain, "", "laion"});
  return DatasetManifest(std::move(r));
}

}  // namespace

TEST_CASE("manifest round trip and validation") {
  TempDir dir("manifest");
  const auto m = small_manifest(3);
  write_manifest(m, dir / "m.tsv");
  const auto loaded = load_manifest(dir / "m.tsv");
  CHECK(loaded.records() == m.records());

  std::ofstream(dir / "bad.tsv") << "a\texemplar\tm\ttrain\t\n";
  CHECK_THROWS_AS(load_manifest(dir / "bad.tsv"), FormatError);
  std::ofstream(dir / "role.tsv") << "a\tteacher\tm\ttrain\t\tsrc\n";
  CHECK_THROWS_AS(load_manifest(dir / "role.tsv"), FormatError);

  CHECK_THROWS_AS(DatasetManifest({{"s", Role::kSynthesized, "m", Split::kTrain, "gpt", "x"}}),
                  ConsistencyError);
  CHECK_THROWS_AS(DatasetManifest({{"e", Role::kExemplar, "", Split::kTrain, "", "x"}}),
                  ConsistencyError);
  CHECK_THROWS_AS(DatasetManifest({{"e", Role::kExemplar, "m", Split::kTrain, "", "x"},
                                   {"e", Role::kDistractor, "", Split::kTrain, "", "x"}}),
                  ConsistencyError);
}

TEST_CASE("build_query_pool counts, determinism and errors") {
  const auto m = small_manifest(100);
  const auto pool = build_query_pool(m, Split::kTest, "", "", 50, 7);
  CHECK(pool.query_ids.size() == 10);
  CHECK(pool.candidate_ids.size() == 50 + 4);
  CHECK(pool.truth.size() == 2);
  CHECK(pool.truth.at("m0") == std::set<std::string>{"m0_e0", "m0_e1"});

  std::set<std::string> cands(pool.candidate_ids.begin(), pool.candidate_ids.end());
  CHECK(cands.size() == pool.candidate_ids.size());
  for (const auto& [model, ex] : pool.truth)
    for (const auto& e : ex) CHECK(cands.contains(e));
  for (const auto& q : pool.query_ids) CHECK_FALSE(cands.contains(q));

  const auto again = build_query_pool(m, Split::kTest, "", "", 50, 7);
  CHECK(again.candidate_ids == pool.candidate_ids);
  CHECK(again.query_ids == pool.query_ids);
  const auto other = build_query_pool(m, Split::kTest, "", "", 50, 8);
  CHECK(other.candidate_ids != pool.candidate_ids);

  const auto gpt = build_query_pool(m, Split::kTest, "src", "gpt", 0, 7);
  CHECK(gpt.query_ids.size() == 4);

  CHECK_THROWS_AS(build_query_pool(m, Split::kTest, "", "", 101, 7), DataError);
  CHECK_THROWS_AS(build_query_pool(m, Split::kVal, "", "", 10, 7), EmptyCaseError);
}

TEST_CASE("distractor sampling is uniform") {
  const auto m = small_manifest(20);
  std::map<std::string, int> hits;
  const int trials = 4000;
  for (int s = 0; s < trials; ++s) {
    const auto pool = build_query_pool(m, Split::kTest, "", "", 5, s);
    for (const auto& id : pool.candidate_ids)
      if (id[0] == 'd') ++hits[id];
  }
  // Each distractor is kept with probability 1/4: 1000 expected, sd ~27.
  CHECK(hits.size() == 20);
  for (const auto& [id, n] : hits) CHECK(std::abs(n - 1000) < 140);
}
