#include <doctest.h>

#include <cmath>
#include <numeric>

#include "attrib/errors.hpp"
#include "attrib/retrieval.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace attrib;

namespace {

RankedList list_of(const std::vector<std::string>& ids, std::size_t k) {
  RankedList l;
  l.k = k;
  float s = 1.0f;
  for (const auto& id : ids) {
    l.entries.push_back({id, s});
    s -= 0.001f;
  }
  return l;
}

std::vector<std::string> ids_of(const RankedList& l) {
  std::vector<std::string> out;
  for (const auto& e : l.entries) out.push_back(e.candidate_id);
  return out;
}

}  // namespace

TEST_CASE("exact match ranks first with similarity one") {
  Rng rng(1);
  const auto c = random_matrix(rng, 200, 32, true);
  const auto top = scan_topk(c.row(57), c, 5);
  REQUIRE(top.entries.size() == 5);
  CHECK(top.entries[0].candidate_id == "r57");
  CHECK(top.entries[0].similarity == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("ties are broken by candidate id") {
  // a and c are orthogonal to the query, b is the query itself.
  const EmbeddingMatrix c(2, {0, 1, 1, 0, 0, 1}, {"c", "b", "a"}, true);
  const std::vector<float> q{1, 0};
  const auto top = scan_topk(q, c, 3);
  CHECK(ids_of(top) == std::vector<std::string>{"b", "a", "c"});
}

TEST_CASE("chunked top-k equals a full sort") {
  Rng rng(2);
  const auto c = random_matrix(rng, 1000, 64, true);
  for (int trial = 0; trial < 20; ++trial) {
    const auto q = random_matrix(rng, 1, 64, true);
    const auto got = scan_topk(q.row(0), c, 10);
    const auto want = oracle::full_sort_topk(q.row(0), c, 10);
    CHECK(got.entries == want.entries);
  }
}

TEST_CASE("multi-chunk scans match the full sort and report exact ranks") {
  Rng rng(3);
  // Coarse values produce many exact ties across chunk boundaries.
  const std::size_t n = kScanChunkRows * 2 + 777, d = 8;
  std::vector<float> data(n * d);
  std::vector<std::string> ids(n);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < d; ++k) data[r * d + k] = float(int(rng.below(3)) - 1) * 0.5f;
    ids[r] = "c" + std::to_string((r * 7919) % n);
  }
  const EmbeddingMatrix c(d, std::move(data), std::move(ids), false);
  std::vector<float> q(d, 0.0f);
  q[0] = q[1] = q[2] = q[3] = 0.5f;

  std::vector<std::size_t> truth{5, 30000, n - 1};
  for (unsigned threads : {1u, 3u}) {
    const auto res = scan(q, c, 50, truth, threads);
    const auto full = oracle::full_sort_topk(q, c, n);
    CHECK(res.top.entries ==
          std::vector<RankedEntry>(full.entries.begin(), full.entries.begin() + 50));
    for (std::size_t t = 0; t < truth.size(); ++t) {
      const auto it = std::find_if(full.entries.begin(), full.entries.end(),
                                   [&](const auto& e) { return e.candidate_id == c.id(truth[t]); });
      CHECK(res.truth_ranks[t] == std::size_t(it - full.entries.begin()) + 1);
    }
  }
}

TEST_CASE("recall examples") {
  const auto l = list_of({"a", "x", "b", "y", "z"}, 5);
  CHECK(recall_at_k(l, {"a", "b"}, 5) == 1.0);
  CHECK(recall_at_k(list_of({"a", "x", "y", "b", "c"}, 5), {"a", "b", "c", "d", "e"}, 5) ==
        doctest::Approx(0.6));
  CHECK(recall_at_k(list_of({"a", "x", "y", "z", "b"}, 5), {"a", "b", "c", "d", "e"}, 3) ==
        doctest::Approx(0.2));
  // 37 of 100 truth items in the top 100
  std::vector<std::string> order;
  std::set<std::string> truth;
  for (int i = 0; i < 100; ++i) {
    order.push_back("o" + std::to_string(i));
    if (i < 37) truth.insert("o" + std::to_string(i));
  }
  for (int i = 0; i < 63; ++i) truth.insert("t" + std::to_string(i));
  CHECK(recall_at_k(list_of(order, 100), truth, 100) == doctest::Approx(0.37));

  CHECK_THROWS_AS(recall_at_k(l, {}, 1), MetricError);
  CHECK_THROWS_AS(recall_at_k(l, {"a"}, 6), MetricError);
}

TEST_CASE("average precision examples") {
  CHECK(average_precision(list_of({"a", "b", "c"}, 3), {"a"}) == 1.0);
  CHECK(average_precision(list_of({"x", "y", "z", "a"}, 4), {"a"}) == doctest::Approx(0.25));
  // relevant at ranks 1 and 3: (1 + 2/3) / 2
  CHECK(average_precision(list_of({"a", "x", "b"}, 3), {"a", "b"}) ==
        doctest::Approx(0.8333).epsilon(1e-4));
  CHECK(average_precision_from_ranks({3, 1}) == doctest::Approx(5.0 / 6.0));
  CHECK_THROWS_AS(average_precision(list_of({"a"}, 1), {"a", "b"}), MetricError);
  CHECK_THROWS_AS(average_precision_from_ranks({}), MetricError);
}

TEST_CASE("recall and AP agree with enumeration over random rankings") {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(40);
    std::vector<std::string> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = "i" + std::to_string(i);
    rng.shuffle(order);
    std::set<std::string> truth;
    const std::size_t t = 1 + rng.below(n);
    for (std::size_t i = 0; i < t; ++i) truth.insert("i" + std::to_string(i));
    const auto l = list_of(order, n);
    CHECK(average_precision(l, truth) ==
          doctest::Approx(oracle::ap_enumerate(order, truth)).epsilon(1e-12));
    double prev = 0.0;
    for (std::size_t k = 1; k <= n; ++k) {
      const double r = recall_at_k(l, truth, k);
      CHECK(r == doctest::Approx(oracle::recall_enumerate(order, truth, k)).epsilon(1e-12));
      CHECK(r >= prev);
      prev = r;
    }
    CHECK(prev == 1.0);
  }
}

TEST_CASE("metrics are invariant under monotone transforms of similarity") {
  Rng rng(5);
  const auto c = random_matrix(rng, 300, 16, true);
  const auto q = random_matrix(rng, 1, 16, true);
  const auto full = scan_topk(q.row(0), c, 300);
  RankedList squashed = full;
  for (auto& e : squashed.entries) e.similarity = std::tanh(3.0f * e.similarity) + 2.0f;
  const std::set<std::string> truth{"r1", "r20", "r200"};
  CHECK(average_precision(full, truth) == average_precision(squashed, truth));
  for (std::size_t k : {1u, 10u, 100u}) CHECK(recall_at_k(full, truth, k) == recall_at_k(squashed, truth, k));
}

TEST_CASE("expected AP of one relevant item under random order is H(n)/n") {
  Rng rng(6);
  const std::size_t n = 100;
  double harmonic = 0.0;
  for (std::size_t i = 1; i <= n; ++i) harmonic += 1.0 / double(i);
  double sum = 0.0;
  const int trials = 20000;
  for (int t = 0; t < trials; ++t) sum += average_precision_from_ranks({1 + rng.below(n)});
  CHECK(sum / trials == doctest::Approx(harmonic / double(n)).epsilon(0.05));
}

namespace {

struct Planted {
  EmbeddingMatrix embeddings;
  QueryPool pool;
};

// Each query is a noisy copy of its model's single exemplar.
Planted planted(Rng& rng, std::size_t models, std::size_t dim, double noise) {
  std::vector<float> data;
  std::vector<std::string> ids;
  QueryPool pool;
  auto push_unit = [&](std::vector<double> v, std::string id) {
    double sq = 0;
    for (double x : v) sq += x * x;
    for (double x : v) data.push_back(float(x / std::sqrt(sq)));
    ids.push_back(std::move(id));
  };
  for (std::size_t m = 0; m < models; ++m) {
    std::vector<double> base(dim);
    for (auto& x : base) x = rng.normal();
    const std::string model = "m" + std::to_string(m);
    push_unit(base, model + "_e");
    auto q = base;
    for (auto& x : q) x += noise * rng.normal();
    push_unit(q, model + "_q");
    pool.query_ids.push_back(model + "_q");
    pool.query_models.push_back(model);
    pool.candidate_ids.push_back(model + "_e");
    pool.truth[model] = {model + "_e"};
  }
  return {EmbeddingMatrix(dim, std::move(data), std::move(ids), true), std::move(pool)};
}

}  // namespace

TEST_CASE("planted nearest neighbours give perfect scores") {
  Rng rng(7);
  const auto p = planted(rng, 50, 64, 0.01);
  const std::vector<std::size_t> ks{1, 5};
  const auto rep = evaluate_case(p.pool, p.embeddings, std::nullopt, ks, "planted", "pretrained");
  CHECK(rep.recall_at.at(1) == 1.0);
  CHECK(rep.mean_average_precision == 1.0);
  CHECK(rep.per_query.size() == 50);

  // The identity mapper changes nothing.
  const auto mapped = evaluate_case(p.pool, p.embeddings, Mapper::initial(MapperKind::kAffine, 64),
                                    ks, "planted", "trained");
  CHECK(mapped.recall_at.at(1) == 1.0);
}

TEST_CASE("evaluate_case matches the oracle per query") {
  Rng rng(8);
  const auto p = planted(rng, 40, 16, 1.5);
  const std::vector<std::size_t> ks{1, 5, 10};
  const auto rep = evaluate_case(p.pool, p.embeddings, std::nullopt, ks, "noisy", "pretrained");
  std::vector<std::size_t> rows;
  for (const auto& id : p.pool.candidate_ids) rows.push_back(p.embeddings.row_of(id));
  const auto cands = p.embeddings.select(rows);
  double map = 0.0;
  for (std::size_t q = 0; q < p.pool.query_ids.size(); ++q) {
    const auto full = oracle::full_sort_topk(p.embeddings.row(p.embeddings.row_of(p.pool.query_ids[q])),
                                             cands, cands.count());
    const auto& truth = p.pool.truth.at(p.pool.query_models[q]);
    const double ap = oracle::ap_enumerate(ids_of(full), truth);
    CHECK(rep.per_query[q].average_precision == doctest::Approx(ap).epsilon(1e-12));
    for (std::size_t k : ks)
      CHECK(rep.per_query[q].recall_at.at(k) == oracle::recall_enumerate(ids_of(full), truth, k));
    map += ap;
  }
  CHECK(rep.mean_average_precision == doctest::Approx(map / 40.0).epsilon(1e-12));
}

TEST_CASE("aggregation is a macro average over cases") {
  CaseReport a, b;
  a.recall_at[1] = 0.2;
  b.recall_at[1] = 0.4;
  a.mean_average_precision = 0.1;
  b.mean_average_precision = 0.3;
  const auto m = aggregate({a, b});
  CHECK(m.recall_at.at(1) == doctest::Approx(0.3));
  CHECK(m.mean_average_precision == doctest::Approx(0.2));
}

TEST_CASE("scan errors") {
  const EmbeddingMatrix empty(4, {}, {}, true);
  const std::vector<float> q{1, 0, 0, 0};
  CHECK_THROWS_AS(scan_topk(q, empty, 3), EmptyCaseError);
  const EmbeddingMatrix c(3, {1, 0, 0}, {"a"}, true);
  CHECK_THROWS_AS(scan_topk(q, c, 1), ShapeError);
  CHECK_THROWS_AS(scan_topk(std::vector<float>{2, 0, 0}, c, 1), DataError);
}
