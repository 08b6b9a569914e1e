#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "attrib/errors.hpp"
#include "attrib/retrieval.hpp"

namespace attrib {

struct CalibrationParams {
  double tau = 1.0;  // temperature, > 0
  double lam = 0.0;  // threshold, in [0, 1)
  bool fitted = false;
};

// Top similarities of one query, descending, with the positions of its
// exemplars inside the list.
struct ScoredPool {
  std::string query_id;
  std::vector<float> sims;
  std::vector<std::string> ids;
  std::vector<std::size_t> truth_positions;
  std::size_t total_pool_size = 0;
};

// Keeps the first `keep` entries of `scan.top` and appends any truth item
// that fell outside them (using the truth ranks/similarities from the scan),
// so every exemplar is present. `truth_ids` is aligned with the truth rows
// passed to scan().
ScoredPool make_scored_pool(const ScanResult& scan, std::span<const std::string> truth_ids,
                            std::size_t keep, std::size_t total_pool_size);

// Number of entries to keep for a pool of `pool_size`: ceil(fraction * size)
// capped at `cap` (0 = no cap), at least 1.
std::size_t kept_count(std::size_t pool_size, double fraction, std::size_t cap);

struct InfluenceDistribution {
  std::vector<std::string> ids;  // rank order
  std::vector<double> probs;     // aligned with ids
  std::size_t support = 0;       // entries with prob > 0
};

// P(j) proportional to relu(exp((s_j - s_0) / tau) - lam). Entries beyond the
// pool carry zero probability. Throws DegenerateDistribution when every
// numerator is zero.
InfluenceDistribution influence_scores(const ScoredPool& pool, const CalibrationParams& p);

struct KlValue {
  double value = 0.0;
  double d_tau = 0.0;
  double d_lam = 0.0;
};

// KL(S || P) where S is uniform over the pool's exemplars and P uses the
// softplus(beta) relaxation of the relu, with analytic gradients in (tau, lam).
KlValue kl_loss(const ScoredPool& pool, const CalibrationParams& p, double softplus_beta);

// KL(S || P) under the exact relu form; zero probabilities are floored at
// 1e-12. Diagnostic only, never used for fitting.
double kl_divergence_exact(const ScoredPool& pool, const CalibrationParams& p);

struct CalibrationConfig {
  double lr_tau = 0.5;
  double lr_lam = 0.0005;
  std::size_t batch = 4096;
  std::size_t steps = 200;
  double softplus_beta = 100.0;
  double init_tau = 1.0;
  double init_lam = 0.0;
  double keep_fraction = 0.1;
  std::size_t keep_cap = 100000;
  std::uint64_t seed = 0;
};

struct CalibrationFit {
  CalibrationParams params;
  double initial_loss = 0.0;
  double final_loss = 0.0;          // full-data loss at the returned params
  std::vector<double> loss_history;  // batch loss before each step
};

inline constexpr double kTauFloor = 1e-4;
inline constexpr double kLamCeiling = 1.0 - 1e-6;

class CalibrationDiverged : public NumericError {
 public:
  CalibrationDiverged(const std::string& what, CalibrationParams last_stable)
      : NumericError(what), last_stable_(last_stable) {}
  const CalibrationParams& last_stable() const { return last_stable_; }

 private:
  CalibrationParams last_stable_;
};

// Plain gradient descent on the mean kl_loss with separate step sizes for tau
// and lam. Each step uses `batch` pools (all of them when there are fewer);
// with more pools, batches walk a seeded permutation. tau is kept >= kTauFloor
// and lam is projected into [0, kLamCeiling]. Returns whichever visited
// parameters scored the lowest full-data loss.
CalibrationFit fit_calibration(std::span<const ScoredPool> pools, const CalibrationConfig& config);

// Mean kl_loss over pools, summed in order.
KlValue mean_kl(std::span<const ScoredPool> pools, const CalibrationParams& p, double beta);

// Text record: tau=..., lam=..., beta=..., steps=..., final_loss=...
void save_calibration(const CalibrationParams& p, const CalibrationConfig& config,
                      double final_loss, const std::filesystem::path& path);
CalibrationParams load_calibration(const std::filesystem::path& path);

}  // namespace attrib
