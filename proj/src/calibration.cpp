#include "attrib/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

#include "attrib/rng.hpp"

namespace attrib {

ScoredPool make_scored_pool(const ScanResult& scan, std::span<const std::string> truth_ids,
                            std::size_t keep, std::size_t total_pool_size) {
  if (truth_ids.size() != scan.truth_ranks.size())
    throw ShapeError("truth ids do not match the scan's truth rows");
  ScoredPool pool;
  pool.query_id = scan.top.query_id;
  pool.total_pool_size = total_pool_size;
  const std::size_t n = std::min(keep, scan.top.entries.size());
  for (std::size_t i = 0; i < n; ++i) {
    pool.sims.push_back(scan.top.entries[i].similarity);
    pool.ids.push_back(scan.top.entries[i].candidate_id);
  }
  // Exemplars ranked below the kept prefix are appended in rank order.
  std::vector<std::size_t> order(truth_ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scan.truth_ranks[a] < scan.truth_ranks[b]; });
  for (std::size_t t : order) {
    const std::size_t rank = scan.truth_ranks[t];
    if (rank <= n) {
      if (pool.ids[rank - 1] != truth_ids[t])
        throw ConsistencyError("truth rank disagrees with the ranked list");
      pool.truth_positions.push_back(rank - 1);
    } else {
      pool.truth_positions.push_back(pool.sims.size());
      pool.sims.push_back(scan.truth_similarities[t]);
      pool.ids.push_back(truth_ids[t]);
    }
  }
  std::sort(pool.truth_positions.begin(), pool.truth_positions.end());
  return pool;
}

std::size_t kept_count(std::size_t pool_size, double fraction, std::size_t cap) {
  auto n = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(pool_size)));
  if (cap != 0) n = std::min(n, cap);
  return std::clamp<std::size_t>(n, 1, std::max<std::size_t>(pool_size, 1));
}

namespace {

void check_pool(const ScoredPool& pool) {
  if (pool.sims.empty()) throw EmptyCaseError("scored pool '" + pool.query_id + "' is empty");
  if (pool.ids.size() != pool.sims.size()) throw ShapeError("pool ids and sims differ in length");
}

void check_params(const CalibrationParams& p) {
  if (!(p.tau > 0.0)) throw ConfigError("calibration temperature must be positive");
  if (!(p.lam >= 0.0)) throw ConfigError("calibration threshold must be non-negative");
}

// log(1 + exp(u)) without overflow.
double softplus1(double u) { return u > 0 ? u + std::log1p(std::exp(-u)) : std::log1p(std::exp(u)); }

}  // namespace

InfluenceDistribution influence_scores(const ScoredPool& pool, const CalibrationParams& p) {
  check_pool(pool);
  check_params(p);
  InfluenceDistribution out;
  out.ids = pool.ids;
  out.probs.resize(pool.sims.size());
  const double top = pool.sims[0];
  double total = 0.0;
  for (std::size_t j = 0; j < pool.sims.size(); ++j) {
    const double num = std::exp((pool.sims[j] - top) / p.tau) - p.lam;
    out.probs[j] = num > 0.0 ? num : 0.0;
    total += out.probs[j];
  }
  if (!(total > 0.0)) {
    throw DegenerateDistribution("threshold " + std::to_string(p.lam) +
                                 " zeroes every candidate of '" + pool.query_id + "'");
  }
  for (auto& v : out.probs) {
    v /= total;
    out.support += v > 0.0;
  }
  return out;
}

KlValue kl_loss(const ScoredPool& pool, const CalibrationParams& p, double beta) {
  check_pool(pool);
  check_params(p);
  if (pool.truth_positions.empty())
    throw MetricError("scored pool '" + pool.query_id + "' has no exemplar");
  if (!(beta > 0.0)) throw ConfigError("softplus beta must be positive");

  const std::size_t m = pool.sims.size();
  const double top = pool.sims[0];
  const double log_beta = std::log(beta);
  std::vector<double> log_a(m), g_tau(m), g_lam(m);
  for (std::size_t j = 0; j < m; ++j) {
    const double gap = pool.sims[j] - top;  // <= 0
    const double e = std::exp(gap / p.tau);
    const double u = beta * (e - p.lam);
    // log softplus_beta(e - lam) = log(log1p(exp(u))) - log(beta)
    log_a[j] = (u < -30.0 ? u : std::log(softplus1(u))) - log_beta;
    // r = sigmoid(u) / a, computed in log space
    const double r = std::exp(-softplus1(-u) - log_a[j]);
    g_tau[j] = r * e * (-gap / (p.tau * p.tau));
    g_lam[j] = -r;
  }
  const double mx = *std::max_element(log_a.begin(), log_a.end());
  double z = 0.0;
  for (double la : log_a) z += std::exp(la - mx);
  const double lse = mx + std::log(z);

  KlValue out;
  const double n = static_cast<double>(pool.truth_positions.size());
  double truth_log = 0.0, truth_tau = 0.0, truth_lam = 0.0;
  for (std::size_t k : pool.truth_positions) {
    truth_log += log_a[k];
    truth_tau += g_tau[k];
    truth_lam += g_lam[k];
  }
  double mix_tau = 0.0, mix_lam = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    const double w = std::exp(log_a[j] - lse);
    mix_tau += w * g_tau[j];
    mix_lam += w * g_lam[j];
  }
  out.value = -std::log(n) - truth_log / n + lse;
  out.d_tau = mix_tau - truth_tau / n;
  out.d_lam = mix_lam - truth_lam / n;
  return out;
}

double kl_divergence_exact(const ScoredPool& pool, const CalibrationParams& p) {
  if (pool.truth_positions.empty())
    throw MetricError("scored pool '" + pool.query_id + "' has no exemplar");
  const auto dist = influence_scores(pool, p);
  const double n = static_cast<double>(pool.truth_positions.size());
  double kl = 0.0;
  for (std::size_t k : pool.truth_positions)
    kl += (1.0 / n) * std::log((1.0 / n) / std::max(dist.probs[k], 1e-12));
  return kl;
}

KlValue mean_kl(std::span<const ScoredPool> pools, const CalibrationParams& p, double beta) {
  KlValue acc;
  for (const auto& pool : pools) {
    const auto v = kl_loss(pool, p, beta);
    acc.value += v.value;
    acc.d_tau += v.d_tau;
    acc.d_lam += v.d_lam;
  }
  const double n = static_cast<double>(pools.size());
  acc.value /= n;
  acc.d_tau /= n;
  acc.d_lam /= n;
  return acc;
}

CalibrationFit fit_calibration(std::span<const ScoredPool> pools, const CalibrationConfig& config) {
  if (pools.empty()) throw EmptyCaseError("no pools to calibrate on");
  if (config.batch == 0) throw ConfigError("calibration batch must be positive");

  CalibrationParams params{config.init_tau, config.init_lam, false};
  CalibrationFit fit;
  const bool full_batch = config.batch >= pools.size();

  std::vector<std::size_t> order(pools.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(config.seed);
  if (!full_batch) rng.shuffle(order);
  std::size_t cursor = 0;
  std::vector<ScoredPool> batch;

  CalibrationParams best = params;
  double best_loss = mean_kl(pools, params, config.softplus_beta).value;
  fit.initial_loss = best_loss;
  if (!std::isfinite(best_loss))
    throw CalibrationDiverged("initial calibration loss is not finite", params);

  for (std::size_t step = 0; step < config.steps; ++step) {
    KlValue kv;
    if (full_batch) {
      kv = mean_kl(pools, params, config.softplus_beta);
    } else {
      batch.clear();
      for (std::size_t i = 0; i < config.batch; ++i) {
        if (cursor == order.size()) {
          rng.shuffle(order);
          cursor = 0;
        }
        batch.push_back(pools[order[cursor++]]);
      }
      kv = mean_kl(batch, params, config.softplus_beta);
    }
    if (!std::isfinite(kv.value) || !std::isfinite(kv.d_tau) || !std::isfinite(kv.d_lam)) {
      throw CalibrationDiverged("calibration diverged at step " + std::to_string(step), best);
    }
    fit.loss_history.push_back(kv.value);
    if (full_batch && kv.value < best_loss) {
      best_loss = kv.value;
      best = params;
    }

    params.tau = std::max(kTauFloor, params.tau - config.lr_tau * kv.d_tau);
    params.lam = std::clamp(params.lam - config.lr_lam * kv.d_lam, 0.0, kLamCeiling);

    if (!full_batch || step + 1 == config.steps) {
      const double full = mean_kl(pools, params, config.softplus_beta).value;
      if (std::isfinite(full) && full < best_loss) {
        best_loss = full;
        best = params;
      }
    }
  }
  fit.params = best;
  fit.params.fitted = true;
  fit.final_loss = best_loss;
  return fit;
}

void save_calibration(const CalibrationParams& p, const CalibrationConfig& config,
                      double final_loss, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  char buf[256];
  std::snprintf(buf, sizeof buf, "tau=%.17g\nlam=%.17g\nbeta=%.17g\nsteps=%zu\nfinal_loss=%.17g\n",
                p.tau, p.lam, config.softplus_beta, config.steps, final_loss);
  out << buf;
}

CalibrationParams load_calibration(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (!kv.contains("tau") || !kv.contains("lam"))
    throw FormatError(path.string() + ": missing tau or lam");
  CalibrationParams p;
  try {
    p.tau = std::stod(kv["tau"]);
    p.lam = std::stod(kv["lam"]);
  } catch (const std::exception&) {
    throw FormatError(path.string() + ": unparsable tau/lam");
  }
  p.fitted = true;
  check_params(p);
  return p;
}

}  // namespace attrib
