#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace attrib {

// Dense f32 feature matrix, one row per image, with ids aligned to rows.
//
// On-disk layout (little-endian):
//   bytes  0..3   magic "AEMB"
//   bytes  4..7   u32 version (1)
//   bytes  8..11  u32 dim
//   bytes 12..19  u64 count
//   byte  20      u8 normalized flag
//   bytes 21..35  reserved, zero
//   bytes 36..    count*dim f32, row-major
// Ids live in a sidecar text file (one id per line) named by
// `ids_path_for`.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;
  // Validates shape, id uniqueness and finiteness.
  EmbeddingMatrix(std::size_t dim, std::vector<float> data, std::vector<std::string> ids,
                  bool normalized);

  std::size_t dim() const { return dim_; }
  std::size_t count() const { return ids_.size(); }
  bool normalized() const { return normalized_; }

  std::span<const float> row(std::size_t i) const { return {data_.data() + i * dim_, dim_}; }
  const std::vector<float>& data() const { return data_; }
  const std::vector<std::string>& ids() const { return ids_; }
  const std::string& id(std::size_t i) const { return ids_[i]; }

  // Row index of `id`, or nullopt.
  std::optional<std::size_t> find(std::string_view id) const;
  // Row index of `id`; throws ConsistencyError when absent.
  std::size_t row_of(std::string_view id) const;

  // Gathers the given rows into a new matrix (same flag).
  EmbeddingMatrix select(std::span<const std::size_t> rows) const;

 private:
  std::size_t dim_ = 0;
  std::vector<float> data_;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> index_;
  bool normalized_ = false;
};

inline constexpr std::size_t kEmbeddingHeaderBytes = 36;

std::filesystem::path ids_path_for(const std::filesystem::path& embeddings);

EmbeddingMatrix load_embeddings(const std::filesystem::path& path);
void write_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path);

// Rescales every row to unit L2 norm. Rows whose squared norm is already
// within 1e-6 of 1 are kept bit-for-bit, which makes the operation idempotent.
// Throws DataError naming the first zero-norm row.
EmbeddingMatrix normalize(const EmbeddingMatrix& m);

enum class Role { kExemplar, kSynthesized, kDistractor };
enum class Split { kTrain, kVal, kTest };

std::string_view to_string(Role r);
std::string_view to_string(Split s);
Role parse_role(std::string_view s);
Split parse_split(std::string_view s);

struct ManifestRecord {
  std::string image_id;
  Role role = Role::kDistractor;
  std::string model_id;
  Split split = Split::kTrain;
  std::string prompt_type;
  std::string source;

  bool operator==(const ManifestRecord&) const = default;
};

// One record per line: image_id \t role \t model_id \t split \t prompt_type \t source
class DatasetManifest {
 public:
  DatasetManifest() = default;
  // Validates the role/model invariants; throws ConsistencyError.
  explicit DatasetManifest(std::vector<ManifestRecord> records);

  const std::vector<ManifestRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }

 private:
  std::vector<ManifestRecord> records_;
};

DatasetManifest load_manifest(const std::filesystem::path& path);
void write_manifest(const DatasetManifest& m, const std::filesystem::path& path);

// Synthesized queries of one test case plus the candidate pool they are ranked
// against. `query_models` is aligned with `query_ids`.
struct QueryPool {
  std::vector<std::string> query_ids;
  std::vector<std::string> query_models;
  std::vector<std::string> candidate_ids;
  std::map<std::string, std::set<std::string>> truth;
};

// Empty `source` or `prompt_type` matches everything.
//
// Queries are the synthesized records matching (split, source, prompt_type).
// Candidates are every exemplar record of the requested split, every exemplar
// of the query models, and `distractor_count` distractors drawn uniformly
// without replacement (any split) with Rng(seed).
QueryPool build_query_pool(const DatasetManifest& manifest, Split split,
                           std::string_view source, std::string_view prompt_type,
                           std::size_t distractor_count, std::uint64_t seed);

}  // namespace attrib
