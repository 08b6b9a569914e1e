#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "attrib/mapper.hpp"
#include "attrib/store.hpp"

namespace attrib {

// Inner product in f32 with eight interleaved partial sums. Every scan and
// every reference check goes through this kernel so similarities agree bitwise.
float similarity(std::span<const float> a, std::span<const float> b);

struct RankedEntry {
  std::string candidate_id;
  float similarity = 0.0f;
  bool operator==(const RankedEntry&) const = default;
};

// Candidates by descending similarity; equal similarities ordered by id.
struct RankedList {
  std::string query_id;
  std::vector<RankedEntry> entries;
  std::size_t k = 0;
};

struct ScanResult {
  RankedList top;
  // 1-based rank of each requested truth row in the full ordering, aligned
  // with the `truth_rows` argument, and that row's similarity.
  std::vector<std::size_t> truth_ranks;
  std::vector<float> truth_similarities;
};

inline constexpr std::size_t kScanChunkRows = 16384;

// Exact top-k over every candidate row, plus exact full-pool ranks of the
// truth rows obtained by counting. Candidates are scanned in fixed chunks of
// kScanChunkRows; per-chunk heaps are merged in chunk order.
ScanResult scan(std::span<const float> query, const EmbeddingMatrix& candidates, std::size_t k,
                std::span<const std::size_t> truth_rows = {}, unsigned threads = 1);

RankedList scan_topk(std::span<const float> query, const EmbeddingMatrix& candidates,
                     std::size_t k, unsigned threads = 1);

// Maps the query with the synth branch and candidates with the train branch
// before scanning. Re-maps the whole pool on every call; evaluate_case maps once.
RankedList scan_topk(std::span<const float> query, const EmbeddingMatrix& candidates,
                     const Mapper& mapper, std::size_t k, unsigned threads = 1);

double recall_at_k(const RankedList& ranked, const std::set<std::string>& truth, std::size_t k);

// Fraction of truth ranks (1-based) that are <= k.
double recall_from_ranks(std::span<const std::size_t> ranks, std::size_t k);

// Average precision over a ranking that covers every truth item.
double average_precision(const RankedList& full, const std::set<std::string>& truth);

// Average precision from the 1-based ranks of the relevant items.
double average_precision_from_ranks(std::vector<std::size_t> ranks);

struct QueryMetrics {
  std::string query_id;
  std::map<std::size_t, double> recall_at;
  double average_precision = 0.0;
};

struct CaseReport {
  std::string name;
  std::string method;  // e.g. "pretrained", "trained"
  std::vector<QueryMetrics> per_query;
  std::map<std::size_t, double> recall_at;  // mean over queries
  double mean_average_precision = 0.0;
};

struct MetricReport {
  std::vector<CaseReport> cases;
  // Macro average over cases.
  std::map<std::size_t, double> recall_at;
  double mean_average_precision = 0.0;
};

// Scores every query of `pool` against its candidates. `mapper` nullopt means
// raw (pretrained) features.
CaseReport evaluate_case(const QueryPool& pool, const EmbeddingMatrix& embeddings,
                         const std::optional<Mapper>& mapper, std::span<const std::size_t> ks,
                         const std::string& name, const std::string& method,
                         unsigned threads = 1);

MetricReport aggregate(std::vector<CaseReport> cases);

}  // namespace attrib
