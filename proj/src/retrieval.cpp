#include "attrib/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <queue>

#include "attrib/errors.hpp"
#include "attrib/parallel.hpp"

namespace attrib {

float similarity(std::span<const float> a, std::span<const float> b) {
  const std::size_t d = a.size();
  const float* x = a.data();
  const float* y = b.data();
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= d; i += 8)
    for (int l = 0; l < 8; ++l) acc[l] += x[i + l] * y[i + l];
  for (; i < d; ++i) acc[i % 8] += x[i] * y[i];
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

namespace {

struct Hit {
  float sim;
  std::size_t row;
};

// Strict "ranks ahead of" order: higher similarity first, then smaller id.
struct Ahead {
  const EmbeddingMatrix* m;
  bool operator()(const Hit& a, const Hit& b) const {
    if (a.sim != b.sim) return a.sim > b.sim;
    return m->id(a.row) < m->id(b.row);
  }
};

void check_query(std::span<const float> query, const EmbeddingMatrix& candidates) {
  if (query.size() != candidates.dim()) {
    throw ShapeError("query has dim " + std::to_string(query.size()) + ", candidates have " +
                     std::to_string(candidates.dim()));
  }
  double sq = 0.0;
  for (float v : query) sq += static_cast<double>(v) * v;
  if (std::abs(std::sqrt(sq) - 1.0) > 1e-4) throw DataError("query vector is not unit-norm");
}

}  // namespace

ScanResult scan(std::span<const float> query, const EmbeddingMatrix& candidates, std::size_t k,
                std::span<const std::size_t> truth_rows, unsigned threads) {
  if (candidates.count() == 0) throw EmptyCaseError("empty candidate set");
  if (k == 0) throw ConfigError("k must be at least 1");
  check_query(query, candidates);

  const Ahead ahead{&candidates};
  const std::size_t n = candidates.count();
  const std::size_t chunks = (n + kScanChunkRows - 1) / kScanChunkRows;

  std::vector<Hit> truth(truth_rows.size());
  for (std::size_t t = 0; t < truth_rows.size(); ++t) {
    if (truth_rows[t] >= n) throw ShapeError("truth row out of range");
    truth[t] = {similarity(query, candidates.row(truth_rows[t])), truth_rows[t]};
  }

  // Per chunk: a max-heap under `ahead` whose top is the weakest kept hit, and
  // a count of rows ranking ahead of each truth row.
  std::vector<std::vector<Hit>> heaps(chunks);
  std::vector<std::vector<std::size_t>> ahead_counts(chunks,
                                                     std::vector<std::size_t>(truth.size(), 0));
  parallel_chunks(n, chunks, threads, [&](std::size_t c, std::size_t lo, std::size_t hi) {
    auto& heap = heaps[c];
    heap.reserve(std::min(k, hi - lo) + 1);
    auto& counts = ahead_counts[c];
    for (std::size_t r = lo; r < hi; ++r) {
      const Hit h{similarity(query, candidates.row(r)), r};
      for (std::size_t t = 0; t < truth.size(); ++t)
        if (h.sim >= truth[t].sim && ahead(h, truth[t])) ++counts[t];
      if (heap.size() < k) {
        heap.push_back(h);
        std::push_heap(heap.begin(), heap.end(), ahead);
      } else if (h.sim >= heap.front().sim && ahead(h, heap.front())) {
        std::pop_heap(heap.begin(), heap.end(), ahead);
        heap.back() = h;
        std::push_heap(heap.begin(), heap.end(), ahead);
      }
    }
    std::sort_heap(heap.begin(), heap.end(), ahead);
  });

  // k-way merge of the sorted chunk lists, heads compared under `ahead`.
  using Head = std::pair<Hit, std::size_t>;  // hit, chunk
  auto behind = [&](const Head& a, const Head& b) { return ahead(b.first, a.first); };
  std::priority_queue<Head, std::vector<Head>, decltype(behind)> frontier(behind);
  std::vector<std::size_t> cursor(chunks, 0);
  for (std::size_t c = 0; c < chunks; ++c)
    if (!heaps[c].empty()) frontier.push({heaps[c][0], c});

  ScanResult out;
  out.top.k = k;
  out.top.entries.reserve(std::min(k, n));
  while (!frontier.empty() && out.top.entries.size() < k) {
    const auto [hit, c] = frontier.top();
    frontier.pop();
    out.top.entries.push_back({candidates.id(hit.row), hit.sim});
    if (++cursor[c] < heaps[c].size()) frontier.push({heaps[c][cursor[c]], c});
  }

  out.truth_ranks.assign(truth.size(), 1);
  out.truth_similarities.resize(truth.size());
  for (std::size_t t = 0; t < truth.size(); ++t) {
    for (std::size_t c = 0; c < chunks; ++c) out.truth_ranks[t] += ahead_counts[c][t];
    out.truth_similarities[t] = truth[t].sim;
  }
  return out;
}

RankedList scan_topk(std::span<const float> query, const EmbeddingMatrix& candidates,
                     std::size_t k, unsigned threads) {
  return scan(query, candidates, k, {}, threads).top;
}

RankedList scan_topk(std::span<const float> query, const EmbeddingMatrix& candidates,
                     const Mapper& mapper, std::size_t k, unsigned threads) {
  const EmbeddingMatrix q(query.size(), std::vector<float>(query.begin(), query.end()), {"q"},
                          true);
  const auto mq = map_embeddings(mapper, Branch::kSynthSide, q);
  const auto mc = map_embeddings(mapper, Branch::kTrainSide, candidates, threads);
  return scan(mq.row(0), mc, k, {}, threads).top;
}

double recall_at_k(const RankedList& ranked, const std::set<std::string>& truth, std::size_t k) {
  if (truth.empty()) throw MetricError("recall needs a nonempty truth set");
  if (k > ranked.k && ranked.entries.size() == ranked.k)
    throw MetricError("recall@" + std::to_string(k) + " requested from a top-" +
                      std::to_string(ranked.k) + " list");
  const std::size_t limit = std::min(k, ranked.entries.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < limit; ++i) hits += truth.contains(ranked.entries[i].candidate_id);
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

double recall_from_ranks(std::span<const std::size_t> ranks, std::size_t k) {
  if (ranks.empty()) throw MetricError("recall needs a nonempty truth set");
  const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t r) { return r <= k; });
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

double average_precision(const RankedList& full, const std::set<std::string>& truth) {
  if (truth.empty()) throw MetricError("average precision needs a nonempty truth set");
  std::vector<std::size_t> ranks;
  for (std::size_t i = 0; i < full.entries.size(); ++i)
    if (truth.contains(full.entries[i].candidate_id)) ranks.push_back(i + 1);
  if (ranks.size() != truth.size())
    throw MetricError("ranking does not contain every truth item");
  return average_precision_from_ranks(std::move(ranks));
}

double average_precision_from_ranks(std::vector<std::size_t> ranks) {
  if (ranks.empty()) throw MetricError("average precision needs a nonempty truth set");
  std::sort(ranks.begin(), ranks.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    if (ranks[i] == 0 || (i > 0 && ranks[i] == ranks[i - 1]))
      throw MetricError("ranks must be distinct and 1-based");
    sum += static_cast<double>(i + 1) / static_cast<double>(ranks[i]);
  }
  return sum / static_cast<double>(ranks.size());
}

CaseReport evaluate_case(const QueryPool& pool, const EmbeddingMatrix& embeddings,
                         const std::optional<Mapper>& mapper, std::span<const std::size_t> ks,
                         const std::string& name, const std::string& method, unsigned threads) {
  if (ks.empty()) throw ConfigError("no K values given");
  if (pool.candidate_ids.empty()) throw EmptyCaseError("case '" + name + "' has no candidates");
  const std::size_t max_k = *std::max_element(ks.begin(), ks.end());

  std::vector<std::size_t> cand_rows, query_rows;
  cand_rows.reserve(pool.candidate_ids.size());
  for (const auto& id : pool.candidate_ids) cand_rows.push_back(embeddings.row_of(id));
  for (const auto& id : pool.query_ids) query_rows.push_back(embeddings.row_of(id));
  EmbeddingMatrix candidates = embeddings.select(cand_rows);
  EmbeddingMatrix queries = embeddings.select(query_rows);
  if (mapper) {
    candidates = map_embeddings(*mapper, Branch::kTrainSide, candidates, threads);
    queries = map_embeddings(*mapper, Branch::kSynthSide, queries, threads);
  }

  CaseReport report;
  report.name = name;
  report.method = method;
  for (std::size_t q = 0; q < pool.query_ids.size(); ++q) {
    const auto& truth = pool.truth.at(pool.query_models[q]);
    if (truth.empty()) throw MetricError("model '" + pool.query_models[q] + "' has no exemplars");
    std::vector<std::size_t> truth_rows;
    for (const auto& id : truth) truth_rows.push_back(candidates.row_of(id));
    auto res = scan(queries.row(q), candidates, max_k, truth_rows, threads);
    res.top.query_id = pool.query_ids[q];

    QueryMetrics qm;
    qm.query_id = pool.query_ids[q];
    for (std::size_t k : ks) qm.recall_at[k] = recall_at_k(res.top, truth, k);
    qm.average_precision = average_precision_from_ranks(res.truth_ranks);
    report.per_query.push_back(std::move(qm));
  }

  const double nq = static_cast<double>(report.per_query.size());
  for (std::size_t k : ks) {
    double s = 0.0;
    for (const auto& qm : report.per_query) s += qm.recall_at.at(k);
    report.recall_at[k] = s / nq;
  }
  double s = 0.0;
  for (const auto& qm : report.per_query) s += qm.average_precision;
  report.mean_average_precision = s / nq;
  return report;
}

MetricReport aggregate(std::vector<CaseReport> cases) {
  MetricReport out;
  out.cases = std::move(cases);
  if (out.cases.empty()) return out;
  const double nc = static_cast<double>(out.cases.size());
  for (const auto& c : out.cases) {
    for (const auto& [k, v] : c.recall_at) out.recall_at[k] += v;
    out.mean_average_precision += c.mean_average_precision;
  }
  for (auto& [k, v] : out.recall_at) v /= nc;
  out.mean_average_precision /= nc;
  return out;
}

}  // namespace attrib
