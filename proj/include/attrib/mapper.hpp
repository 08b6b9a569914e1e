#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "attrib/matrix.hpp"
#include "attrib/store.hpp"

namespace attrib {

enum class MapperKind : std::uint32_t { kAffine = 0, kChannel = 1, kMlp2 = 2 };

// train_side maps candidate (training) images, synth_side maps synthesized
// queries. The two branches have independent parameters.
enum class Branch { kTrainSide = 0, kSynthSide = 1 };

std::string_view to_string(MapperKind k);
MapperKind parse_mapper_kind(std::string_view s);

// Learnable map applied on top of frozen features. Parameters of both
// branches live in one flat vector so optimizers can treat them uniformly.
//
// Per-branch layout (train branch first, then synth branch):
//   affine  W[D*D] (row-major, out x in), b[D]
//   channel scale[D]
//   mlp2    W1[D*D], b1[D], W2[D*D], b2[D]   (h = W2 relu(W1 x + b1) + b2)
class Mapper {
 public:
  Mapper() = default;
  Mapper(MapperKind kind, std::size_t dim, std::vector<double> params);

  // Affine: W = I, b = 0. Channel: scale = 1. Mlp2: Gaussian weights with
  // std 1/sqrt(D) drawn from Rng(seed), zero biases.
  static Mapper initial(MapperKind kind, std::size_t dim, std::uint64_t seed = 0);

  MapperKind kind() const { return kind_; }
  std::size_t dim() const { return dim_; }
  std::size_t branch_size() const { return params_.size() / 2; }

  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }

  std::span<double> branch(Branch b);
  std::span<const double> branch(Branch b) const;

  // Affine only: the weight matrix of one branch as a D x D matrix copy.
  Matrix weight(Branch b) const;

 private:
  MapperKind kind_ = MapperKind::kAffine;
  std::size_t dim_ = 0;
  std::vector<double> params_;
};

std::size_t branch_param_count(MapperKind kind, std::size_t dim);

// h(X) with every output row rescaled to unit L2 norm.
Matrix map_forward(const Mapper& m, Branch branch, const Matrix& x);

// Maps and renormalizes a whole embedding matrix into a new f32 matrix.
EmbeddingMatrix map_embeddings(const Mapper& m, Branch branch, const EmbeddingMatrix& x,
                               unsigned threads = 1);

Matrix to_matrix(const EmbeddingMatrix& m);

// Symmetric NT-Xent: mean over i of
//   -log softmax_j(t_i.s_j / u)[i] - log softmax_j(t_j.s_i / u)[i].
double nt_xent(const Matrix& t, const Matrix& s, double temperature);

// Same loss plus dL/dT and dL/dS.
struct NtXentResult {
  double loss = 0.0;
  Matrix grad_t;
  Matrix grad_s;
};
NtXentResult nt_xent_with_grad(const Matrix& t, const Matrix& s, double temperature);

// 1/2 (||W^T W - I||_F + ||W~^T W~ - I||_F), unsquared. Zero for non-affine kinds.
double ortho_reg(const Mapper& m);

// Gradient of ortho_reg w.r.t. the flat parameter vector. Zero where a
// Frobenius norm term vanishes.
std::vector<double> ortho_reg_grad(const Mapper& m);

struct LossValue {
  double contrastive = 0.0;
  double regularizer = 0.0;
  double total = 0.0;
  std::vector<double> gradients;  // same layout as Mapper::params()
};

// Loss of mapping raw (unmapped) exemplar rows `train_x` and synthesized rows
// `synth_x` (row i of each forms a positive pair) and its exact gradient
// through the mapper and the row renormalization. `threads` > 1 shards the
// per-row work into `threads` fixed chunks reduced in chunk order.
LossValue loss_and_grad(const Mapper& m, const Matrix& train_x, const Matrix& synth_x,
                        double temperature, double lambda_reg, unsigned threads = 1);

// Checkpoint layout (little-endian):
//   "AMAP", u32 version (1), u32 kind, u32 dim, u64 param count, f32 params[]
void save_mapper(const Mapper& m, const std::filesystem::path& path);
Mapper load_mapper(const std::filesystem::path& path);

}  // namespace attrib
