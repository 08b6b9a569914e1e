// Times one exact top-k scan over random unit vectors.
//   bench_scan [rows=1000000] [dim=512] [threads=0 (all cores)] [k=100]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <string>

#include "attrib/parallel.hpp"
#include "attrib/retrieval.hpp"
#include "attrib/rng.hpp"

int main(int argc, char** argv) {
  const std::size_t rows = argc > 1 ? std::stoull(argv[1]) : 1000000;
  const std::size_t dim = argc > 2 ? std::stoull(argv[2]) : 512;
  const unsigned threads = attrib::resolve_threads(argc > 3 ? std::stoul(argv[3]) : 0);
  const std::size_t k = argc > 4 ? std::stoull(argv[4]) : 100;

  attrib::Rng rng(1);
  auto unit = [&](float* out) {
    double sq = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      out[i] = static_cast<float>(rng.normal());
      sq += double(out[i]) * out[i];
    }
    const double inv = 1.0 / std::sqrt(sq);
    for (std::size_t i = 0; i < dim; ++i) out[i] = static_cast<float>(out[i] * inv);
  };
  std::vector<float> data(rows * dim);
  std::vector<std::string> ids(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    unit(data.data() + r * dim);
    ids[r] = std::to_string(r);
  }
  const attrib::EmbeddingMatrix candidates(dim, std::move(data), std::move(ids), true);
  std::vector<float> query(dim);
  unit(query.data());

  attrib::scan_topk(query, candidates, k, threads);  // warm-up
  const auto t0 = std::chrono::steady_clock::now();
  const auto top = attrib::scan_topk(query, candidates, k, threads);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double macs = double(rows) * double(dim);
  std::printf("rows=%zu dim=%zu threads=%u k=%zu time=%.3fs throughput=%.3g MAC/s (%.3g per thread) top1=%s %.4f\n",
              rows, dim, threads, k, secs, macs / secs, macs / secs / threads,
              top.entries[0].candidate_id.c_str(), top.entries[0].similarity);
  return 0;
}
