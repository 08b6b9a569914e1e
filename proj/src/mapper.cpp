#include "attrib/mapper.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

#include "attrib/errors.hpp"
#include "attrib/parallel.hpp"
#include "attrib/rng.hpp"

namespace attrib {

std::string_view to_string(MapperKind k) {
  switch (k) {
    case MapperKind::kAffine: return "affine";
    case MapperKind::kChannel: return "channel";
    case MapperKind::kMlp2: return "mlp2";
  }
  return "?";
}

MapperKind parse_mapper_kind(std::string_view s) {
  if (s == "affine") return MapperKind::kAffine;
  if (s == "channel") return MapperKind::kChannel;
  if (s == "mlp2") return MapperKind::kMlp2;
  throw ConfigError("unknown mapper kind '" + std::string(s) + "'");
}

std::size_t branch_param_count(MapperKind kind, std::size_t dim) {
  switch (kind) {
    case MapperKind::kAffine: return dim * dim + dim;
    case MapperKind::kChannel: return dim;
    case MapperKind::kMlp2: return 2 * (dim * dim + dim);
  }
  return 0;
}

Mapper::Mapper(MapperKind kind, std::size_t dim, std::vector<double> params)
    : kind_(kind), dim_(dim), params_(std::move(params)) {
  if (dim_ == 0) throw ShapeError("mapper dim must be positive");
  if (params_.size() != 2 * branch_param_count(kind_, dim_)) {
    throw ShapeError("mapper " + std::string(to_string(kind_)) + " of dim " +
                     std::to_string(dim_) + " needs " +
                     std::to_string(2 * branch_param_count(kind_, dim_)) + " params, got " +
                     std::to_string(params_.size()));
  }
}

Mapper Mapper::initial(MapperKind kind, std::size_t dim, std::uint64_t seed) {
  const std::size_t n = branch_param_count(kind, dim);
  std::vector<double> p(2 * n, 0.0);
  Rng rng(seed);
  for (std::size_t b = 0; b < 2; ++b) {
    double* base = p.data() + b * n;
    switch (kind) {
      case MapperKind::kAffine:
        for (std::size_t i = 0; i < dim; ++i) base[i * dim + i] = 1.0;
        break;
      case MapperKind::kChannel:
        std::fill(base, base + dim, 1.0);
        break;
      case MapperKind::kMlp2: {
        const double sd = 1.0 / std::sqrt(static_cast<double>(dim));
        for (std::size_t i = 0; i < dim * dim; ++i) base[i] = sd * rng.normal();
        double* w2 = base + dim * dim + dim;
        for (std::size_t i = 0; i < dim * dim; ++i) w2[i] = sd * rng.normal();
        break;
      }
    }
  }
  return Mapper(kind, dim, std::move(p));
}

std::span<double> Mapper::branch(Branch b) {
  const std::size_t n = branch_size();
  return {params_.data() + static_cast<std::size_t>(b) * n, n};
}

std::span<const double> Mapper::branch(Branch b) const {
  const std::size_t n = branch_size();
  return {params_.data() + static_cast<std::size_t>(b) * n, n};
}

Matrix Mapper::weight(Branch b) const {
  if (kind_ != MapperKind::kAffine) throw ShapeError("weight() is defined for affine mappers");
  Matrix w(dim_, dim_);
  const auto p = branch(b);
  std::copy(p.begin(), p.begin() + dim_ * dim_, w.data().begin());
  return w;
}

namespace {

// y = W x + b for a row-major D x D W.
void affine_apply(const double* w, const double* b, const double* x, double* y, std::size_t d) {
  for (std::size_t i = 0; i < d; ++i) {
    const double* wr = w + i * d;
    double acc = b[i];
    for (std::size_t k = 0; k < d; ++k) acc += wr[k] * x[k];
    y[i] = acc;
  }
}

// Per-row activations kept for the backward pass.
struct RowCache {
  std::vector<double> pre;     // mlp2 hidden pre-activation
  std::vector<double> hidden;  // mlp2 relu output
  std::vector<double> z;       // normalized output
  double norm = 0.0;
};

void forward_row(MapperKind kind, std::size_t d, std::span<const double> p, const double* x,
                 RowCache& c) {
  std::vector<double> y(d);
  switch (kind) {
    case MapperKind::kAffine:
      affine_apply(p.data(), p.data() + d * d, x, y.data(), d);
      break;
    case MapperKind::kChannel:
      for (std::size_t i = 0; i < d; ++i) y[i] = p[i] * x[i];
      break;
    case MapperKind::kMlp2: {
      c.pre.resize(d);
      c.hidden.resize(d);
      affine_apply(p.data(), p.data() + d * d, x, c.pre.data(), d);
      for (std::size_t i = 0; i < d; ++i) c.hidden[i] = c.pre[i] > 0.0 ? c.pre[i] : 0.0;
      const double* w2 = p.data() + d * d + d;
      affine_apply(w2, w2 + d * d, c.hidden.data(), y.data(), d);
      break;
    }
  }
  double sq = 0.0;
  for (double v : y) sq += v * v;
  if (!(sq > 0.0) || !std::isfinite(sq)) throw NumericError("mapped feature has zero or non-finite norm");
  c.norm = std::sqrt(sq);
  c.z.resize(d);
  for (std::size_t i = 0; i < d; ++i) c.z[i] = y[i] / c.norm;
}

// Accumulates dL/dparams for one row given dL/dz.
void backward_row(MapperKind kind, std::size_t d, std::span<const double> p, const double* x,
                  const RowCache& c, const double* gz, double* grad) {
  double zg = 0.0;
  for (std::size_t i = 0; i < d; ++i) zg += c.z[i] * gz[i];
  std::vector<double> gy(d);
  for (std::size_t i = 0; i < d; ++i) gy[i] = (gz[i] - c.z[i] * zg) / c.norm;

  switch (kind) {
    case MapperKind::kAffine: {
      double* gw = grad;
      double* gb = grad + d * d;
      for (std::size_t i = 0; i < d; ++i) {
        double* row = gw + i * d;
        for (std::size_t k = 0; k < d; ++k) row[k] += gy[i] * x[k];
        gb[i] += gy[i];
      }
      break;
    }
    case MapperKind::kChannel:
      for (std::size_t i = 0; i < d; ++i) grad[i] += gy[i] * x[i];
      break;
    case MapperKind::kMlp2: {
      const double* w2 = p.data() + d * d + d;
      double* gw1 = grad;
      double* gb1 = grad + d * d;
      double* gw2 = grad + d * d + d;
      double* gb2 = gw2 + d * d;
      std::vector<double> ga(d, 0.0);
      for (std::size_t i = 0; i < d; ++i) {
        double* row = gw2 + i * d;
        const double* wrow = w2 + i * d;
        for (std::size_t k = 0; k < d; ++k) {
          row[k] += gy[i] * c.hidden[k];
          ga[k] += wrow[k] * gy[i];
        }
        gb2[i] += gy[i];
      }
      for (std::size_t k = 0; k < d; ++k)
        if (c.pre[k] <= 0.0) ga[k] = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        double* row = gw1 + i * d;
        for (std::size_t k = 0; k < d; ++k) row[k] += ga[i] * x[k];
        gb1[i] += ga[i];
      }
      break;
    }
  }
}

void check_cols(const Mapper& m, const Matrix& x) {
  if (x.cols() != m.dim()) {
    throw ShapeError("input has " + std::to_string(x.cols()) + " columns, mapper dim is " +
                     std::to_string(m.dim()));
  }
}

// Below this the norm is treated as exactly zero (its non-smooth point).
constexpr double kOrthoKink = 1e-10;

// Frobenius norm of W^T W - I and, optionally, its gradient W(A + A^T)/||A||
// = 2 W A / ||A|| added into `grad` (D x D) scaled by `scale`.
double ortho_term(const double* w, std::size_t d, double* grad, double scale) {
  std::vector<double> a(d * d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) acc += w[k * d + i] * w[k * d + j];
      if (i == j) acc -= 1.0;
      a[i * d + j] = acc;
      a[j * d + i] = acc;
    }
  }
  double sq = 0.0;
  for (double v : a) sq += v * v;
  const double norm = std::sqrt(sq);
  if (grad != nullptr && norm > kOrthoKink) {
    const double f = scale * 2.0 / norm;
    for (std::size_t r = 0; r < d; ++r) {
      for (std::size_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < d; ++k) acc += w[r * d + k] * a[k * d + j];
        grad[r * d + j] += f * acc;
      }
    }
  }
  return norm;
}

}  // namespace

Matrix map_forward(const Mapper& m, Branch branch, const Matrix& x) {
  check_cols(m, x);
  Matrix out(x.rows(), x.cols());
  const auto p = m.branch(branch);
  RowCache cache;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    forward_row(m.kind(), m.dim(), p, x.row(r).data(), cache);
    std::copy(cache.z.begin(), cache.z.end(), out.row(r).begin());
  }
  return out;
}

Matrix to_matrix(const EmbeddingMatrix& m) {
  Matrix out(m.count(), m.dim());
  std::copy(m.data().begin(), m.data().end(), out.data().begin());
  return out;
}

EmbeddingMatrix map_embeddings(const Mapper& m, Branch branch, const EmbeddingMatrix& x,
                               unsigned threads) {
  if (x.dim() != m.dim()) {
    throw ShapeError("embeddings have dim " + std::to_string(x.dim()) + ", mapper dim is " +
                     std::to_string(m.dim()));
  }
  const std::size_t d = m.dim();
  std::vector<float> data(x.count() * d);
  const auto p = m.branch(branch);
  const std::size_t chunks = std::max<std::size_t>(1, x.count() / 4096);
  parallel_chunks(x.count(), chunks, threads, [&](std::size_t, std::size_t lo, std::size_t hi) {
    RowCache cache;
    std::vector<double> in(d);
    for (std::size_t r = lo; r < hi; ++r) {
      const auto src = x.row(r);
      std::copy(src.begin(), src.end(), in.begin());
      forward_row(m.kind(), d, p, in.data(), cache);
      for (std::size_t k = 0; k < d; ++k) data[r * d + k] = static_cast<float>(cache.z[k]);
    }
  });
  return EmbeddingMatrix(d, std::move(data), x.ids(), true);
}

NtXentResult nt_xent_with_grad(const Matrix& t, const Matrix& s, double temperature) {
  if (t.rows() != s.rows() || t.cols() != s.cols())
    throw ShapeError("NT-Xent needs T and S of identical shape");
  if (!(temperature > 0.0)) throw ShapeError("NT-Xent temperature must be positive");
  const std::size_t b = t.rows();
  const std::size_t d = t.cols();
  if (b < 2) throw BatchTooSmall("NT-Xent needs at least 2 pairs, got " + std::to_string(b));

  Matrix logits(b, b);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) acc += t(i, k) * s(j, k);
      logits(i, j) = acc / temperature;
    }
  }

  // Row softmax P (t_i against all s_j) and column softmax Q (s_i against all t_j).
  Matrix p(b, b), q(b, b);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double mx = logits(i, 0);
    for (std::size_t j = 1; j < b; ++j) mx = std::max(mx, logits(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < b; ++j) z += std::exp(logits(i, j) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < b; ++j) p(i, j) = std::exp(logits(i, j) - lse);
    loss += lse - logits(i, i);
  }
  for (std::size_t j = 0; j < b; ++j) {
    double mx = logits(0, j);
    for (std::size_t i = 1; i < b; ++i) mx = std::max(mx, logits(i, j));
    double z = 0.0;
    for (std::size_t i = 0; i < b; ++i) z += std::exp(logits(i, j) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t i = 0; i < b; ++i) q(i, j) = std::exp(logits(i, j) - lse);
    loss += lse - logits(j, j);
  }

  NtXentResult r;
  r.loss = loss / static_cast<double>(b);
  // dL/dlogits(i,j) = (P_ij + Q_ij - 2 delta_ij) / B
  Matrix g(b, b);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j)
      g(i, j) = (p(i, j) + q(i, j) - (i == j ? 2.0 : 0.0)) / (static_cast<double>(b) * temperature);
  r.grad_t = Matrix(b, d);
  r.grad_s = Matrix(b, d);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      const double gij = g(i, j);
      for (std::size_t k = 0; k < d; ++k) {
        r.grad_t(i, k) += gij * s(j, k);
        r.grad_s(j, k) += gij * t(i, k);
      }
    }
  }
  return r;
}

double nt_xent(const Matrix& t, const Matrix& s, double temperature) {
  return nt_xent_with_grad(t, s, temperature).loss;
}

double ortho_reg(const Mapper& m) {
  if (m.kind() != MapperKind::kAffine) return 0.0;
  const std::size_t d = m.dim();
  return 0.5 * (ortho_term(m.branch(Branch::kTrainSide).data(), d, nullptr, 0.0) +
                ortho_term(m.branch(Branch::kSynthSide).data(), d, nullptr, 0.0));
}

std::vector<double> ortho_reg_grad(const Mapper& m) {
  std::vector<double> g(m.params().size(), 0.0);
  if (m.kind() != MapperKind::kAffine) return g;
  const std::size_t d = m.dim();
  const std::size_t n = m.branch_size();
  ortho_term(m.branch(Branch::kTrainSide).data(), d, g.data(), 0.5);
  ortho_term(m.branch(Branch::kSynthSide).data(), d, g.data() + n, 0.5);
  return g;
}

LossValue loss_and_grad(const Mapper& m, const Matrix& train_x, const Matrix& synth_x,
                        double temperature, double lambda_reg, unsigned threads) {
  check_cols(m, train_x);
  check_cols(m, synth_x);
  if (train_x.rows() != synth_x.rows())
    throw ShapeError("pair matrices have different row counts");
  const std::size_t b = train_x.rows();
  if (b < 2) throw BatchTooSmall("NT-Xent needs at least 2 pairs, got " + std::to_string(b));
  const std::size_t d = m.dim();
  const std::size_t n = m.branch_size();
  const auto pt = m.branch(Branch::kTrainSide);
  const auto ps = m.branch(Branch::kSynthSide);

  const std::size_t shards = std::max(1u, threads);
  std::vector<RowCache> cache_t(b), cache_s(b);
  Matrix t(b, d), s(b, d);
  parallel_chunks(b, shards, threads, [&](std::size_t, std::size_t lo, std::size_t hi) {
    for (std::size_t r = lo; r < hi; ++r) {
      forward_row(m.kind(), d, pt, train_x.row(r).data(), cache_t[r]);
      forward_row(m.kind(), d, ps, synth_x.row(r).data(), cache_s[r]);
      std::copy(cache_t[r].z.begin(), cache_t[r].z.end(), t.row(r).begin());
      std::copy(cache_s[r].z.begin(), cache_s[r].z.end(), s.row(r).begin());
    }
  });

  const NtXentResult nt = nt_xent_with_grad(t, s, temperature);

  const std::size_t used = std::min(shards, b);
  std::vector<std::vector<double>> partial(used, std::vector<double>(2 * n, 0.0));
  parallel_chunks(b, used, threads, [&](std::size_t c, std::size_t lo, std::size_t hi) {
    double* g = partial[c].data();
    for (std::size_t r = lo; r < hi; ++r) {
      backward_row(m.kind(), d, pt, train_x.row(r).data(), cache_t[r], nt.grad_t.row(r).data(), g);
      backward_row(m.kind(), d, ps, synth_x.row(r).data(), cache_s[r], nt.grad_s.row(r).data(),
                   g + n);
    }
  });

  LossValue out;
  out.contrastive = nt.loss;
  out.regularizer = ortho_reg(m);
  out.total = out.contrastive + lambda_reg * out.regularizer;
  out.gradients = std::move(partial[0]);
  for (std::size_t c = 1; c < used; ++c)
    for (std::size_t i = 0; i < out.gradients.size(); ++i) out.gradients[i] += partial[c][i];
  if (lambda_reg != 0.0) {
    const auto rg = ortho_reg_grad(m);
    for (std::size_t i = 0; i < rg.size(); ++i) out.gradients[i] += lambda_reg * rg[i];
  }
  return out;
}

void save_mapper(const Mapper& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  std::array<unsigned char, 24> header{};
  std::memcpy(header.data(), "AMAP", 4);
  const std::uint32_t version = 1;
  const auto kind = static_cast<std::uint32_t>(m.kind());
  const auto dim = static_cast<std::uint32_t>(m.dim());
  const std::uint64_t count = m.params().size();
  std::memcpy(header.data() + 4, &version, 4);
  std::memcpy(header.data() + 8, &kind, 4);
  std::memcpy(header.data() + 12, &dim, 4);
  std::memcpy(header.data() + 16, &count, 8);
  out.write(reinterpret_cast<const char*>(header.data()), header.size());
  std::vector<float> f(m.params().begin(), m.params().end());
  out.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * 4));
  if (!out) throw FormatError("write failed: " + path.string());
}

Mapper load_mapper(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::array<unsigned char, 24> header{};
  in.read(reinterpret_cast<char*>(header.data()), header.size());
  if (in.gcount() != 24 || std::memcmp(header.data(), "AMAP", 4) != 0)
    throw FormatError(path.string() + ": not a mapper checkpoint");
  std::uint32_t version, kind, dim;
  std::uint64_t count;
  std::memcpy(&version, header.data() + 4, 4);
  std::memcpy(&kind, header.data() + 8, 4);
  std::memcpy(&dim, header.data() + 12, 4);
  std::memcpy(&count, header.data() + 16, 8);
  if (version != 1) throw FormatError(path.string() + ": unsupported version");
  if (kind > 2) throw FormatError(path.string() + ": unknown mapper kind");
  const auto mk = static_cast<MapperKind>(kind);
  if (dim == 0 || count != 2 * branch_param_count(mk, dim))
    throw FormatError(path.string() + ": parameter count does not match kind/dim");
  std::vector<float> f(count);
  in.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(count * 4));
  if (in.gcount() != static_cast<std::streamsize>(count * 4))
    throw FormatError(path.string() + ": truncated parameters");
  if (in.peek() != std::ifstream::traits_type::eof())
    throw FormatError(path.string() + ": trailing bytes");
  return Mapper(mk, dim, std::vector<double>(f.begin(), f.end()));
}

}  // namespace attrib
