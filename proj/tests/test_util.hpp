#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "attrib/matrix.hpp"
#include "attrib/rng.hpp"
#include "attrib/store.hpp"

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& name)
      : path_(std::filesystem::temp_directory_path() / ("attrib_test_" + name)) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

// Gaussian rows scaled by `scale`, optionally normalized; ids "r<i>".
inline attrib::EmbeddingMatrix random_matrix(attrib::Rng& rng, std::size_t count, std::size_t dim,
                                             bool unit, double scale = 1.0) {
  std::vector<float> data(count * dim);
  std::vector<std::string> ids(count);
  for (std::size_t r = 0; r < count; ++r) {
    double sq = 0.0;
    for (std::size_t k = 0; k < dim; ++k) {
      const double v = scale * rng.normal();
      data[r * dim + k] = static_cast<float>(v);
      sq += v * v;
    }
    if (unit)
      for (std::size_t k = 0; k < dim; ++k)
        data[r * dim + k] = static_cast<float>(data[r * dim + k] / std::sqrt(sq));
    ids[r] = "r" + std::to_string(r);
  }
  return attrib::EmbeddingMatrix(dim, std::move(data), std::move(ids), unit);
}

// Unit-norm rows of a double matrix.
inline attrib::Matrix random_unit_rows(attrib::Rng& rng, std::size_t rows, std::size_t cols) {
  attrib::Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (auto& v : m.row(r)) {
      v = rng.normal();
      sq += v * v;
    }
    for (auto& v : m.row(r)) v /= std::sqrt(sq);
  }
  return m;
}
