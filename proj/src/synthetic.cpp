#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "attrib/harness.hpp"

namespace attrib {

Matrix random_rotation(std::size_t dim, Rng& rng) {
  Matrix a(dim, dim);
  for (auto& v : a.data()) v = rng.normal();
  // Modified Gram-Schmidt on the columns; the sign convention R_ii > 0 makes
  // the result Haar-distributed.
  Matrix q(dim, dim);
  for (std::size_t j = 0; j < dim; ++j) {
    std::vector<double> v(dim);
    for (std::size_t i = 0; i < dim; ++i) v[i] = a(i, j);
    for (std::size_t p = 0; p < j; ++p) {
      double dot = 0.0;
      for (std::size_t i = 0; i < dim; ++i) dot += q(i, p) * v[i];
      for (std::size_t i = 0; i < dim; ++i) v[i] -= dot * q(i, p);
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < dim; ++i) q(i, j) = v[i] / norm;
  }
  return q;
}

double condition_number(const Matrix& a) {
  if (a.rows() != a.cols()) throw ShapeError("condition_number needs a square matrix");
  const std::size_t n = a.rows();
  // Symmetric M = A^T A, cyclic Jacobi rotations until off-diagonal mass vanishes.
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += a(k, i) * a(k, j);
      m(i, j) = acc;
    }
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0, diag = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) (i == j ? diag : off) += m(i, j) * m(i, j);
    if (off <= 1e-30 * std::max(diag, 1e-300)) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (m(p, q) == 0.0) continue;
        const double theta = (m(q, q) - m(p, p)) / (2.0 * m(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double mkp = m(k, p), mkq = m(k, q);
          m(k, p) = c * mkp - s * mkq;
          m(k, q) = s * mkp + c * mkq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double mpk = m(p, k), mqk = m(q, k);
          m(p, k) = c * mpk - s * mqk;
          m(q, k) = s * mpk + c * mqk;
        }
      }
    }
  }
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    lo = std::min(lo, std::max(m(i, i), 0.0));
    hi = std::max(hi, m(i, i));
  }
  if (lo <= 0.0) return std::numeric_limits<double>::infinity();
  return std::sqrt(hi / lo);
}

void SyntheticSpec::validate() const {
  if (n_models < 1 || exemplars_per_model < 1 || synth_per_model < 1 || dim < 1)
    throw ConfigError("synthetic spec counts and dim must be positive");
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be non-negative");
  if (prompt_types.empty()) throw ConfigError("at least one prompt type is required");
  if (val_fraction < 0 || test_fraction < 0 || val_fraction + test_fraction > 1.0)
    throw ConfigError("val_fraction + test_fraction must lie in [0, 1]");
  if (distortion_kind == DistortionKind::kExplicit) {
    if (distortion.rows() != dim || distortion.cols() != dim)
      throw ConfigError("explicit distortion must be dim x dim");
    const double cond = condition_number(distortion);
    if (!(cond <= kMaxDistortionCondition))
      throw ConfigError("distortion is singular or ill-conditioned (condition number " +
                        std::to_string(cond) + ")");
  }
}

namespace {

void push_unit(std::vector<float>& out, std::vector<double> v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double inv = 1.0 / std::sqrt(sq);
  for (double x : v) out.push_back(static_cast<float>(x * inv));
}

std::string numbered(const char* prefix, std::size_t i, int width) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%0*zu", prefix, width, i);
  return buf;
}

}  // namespace

SyntheticData synth_generate(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t d = spec.dim;

  Matrix distortion;
  switch (spec.distortion_kind) {
    case DistortionKind::kIdentity: distortion = Matrix::identity(d); break;
    case DistortionKind::kRotation: distortion = random_rotation(d, rng); break;
    case DistortionKind::kExplicit: distortion = spec.distortion; break;
  }

  std::vector<std::size_t> order(spec.n_models);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  const auto n_val = static_cast<std::size_t>(std::llround(spec.val_fraction * spec.n_models));
  const auto n_test = static_cast<std::size_t>(std::llround(spec.test_fraction * spec.n_models));
  std::vector<Split> split_of(spec.n_models, Split::kTrain);
  for (std::size_t i = 0; i < spec.n_models; ++i) {
    if (i < n_val) split_of[order[i]] = Split::kVal;
    else if (i < n_val + n_test) split_of[order[i]] = Split::kTest;
  }

  std::vector<float> data;
  std::vector<std::string> ids;
  std::vector<ManifestRecord> records;
  auto gaussian = [&](std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    return v;
  };
  const int width = spec.n_models >= 10000 ? 6 : 4;

  for (std::size_t m = 0; m < spec.n_models; ++m) {
    const std::string model = numbered("m", m, width);
    std::vector<double> u = gaussian(d);
    double sq = 0.0;
    for (double x : u) sq += x * x;
    for (auto& x : u) x /= std::sqrt(sq);
    std::vector<double> au(d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t k = 0; k < d; ++k) au[i] += distortion(i, k) * u[k];

    for (std::size_t e = 0; e < spec.exemplars_per_model; ++e) {
      std::vector<double> v(d);
      for (std::size_t i = 0; i < d; ++i) v[i] = u[i] + spec.noise_sigma * rng.normal();
      push_unit(data, std::move(v));
      ids.push_back(model + "_ex" + std::to_string(e));
      records.push_back({ids.back(), Role::kExemplar, model, split_of[m], "", spec.source});
    }
    for (std::size_t s = 0; s < spec.synth_per_model; ++s) {
      std::vector<double> v(d);
      for (std::size_t i = 0; i < d; ++i) v[i] = au[i] + spec.noise_sigma * rng.normal();
      push_unit(data, std::move(v));
      ids.push_back(model + "_syn" + std::to_string(s));
      records.push_back({ids.back(), Role::kSynthesized, model, split_of[m],
                         spec.prompt_types[s % spec.prompt_types.size()], spec.source});
    }
  }
  for (std::size_t j = 0; j < spec.n_distractors; ++j) {
    push_unit(data, gaussian(d));
    ids.push_back(numbered("d", j, 7));
    records.push_back({ids.back(), Role::kDistractor, "", Split::kTrain, "", "distractor"});
  }

  return {EmbeddingMatrix(d, std::move(data), std::move(ids), true),
          DatasetManifest(std::move(records)), std::move(distortion)};
}

SyntheticPaths write_synthetic(const SyntheticData& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  SyntheticPaths p{dir / "embeddings.emb", dir / "manifest.tsv"};
  write_embeddings(data.embeddings, p.embeddings);
  write_manifest(data.manifest, p.manifest);
  return p;
}

}  // namespace attrib
