#include "attrib/store.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "attrib/errors.hpp"
#include "attrib/rng.hpp"

namespace attrib {

static_assert(std::endian::native == std::endian::little,
              "embedding files are little-endian; big-endian hosts need byte swapping");

EmbeddingMatrix::EmbeddingMatrix(std::size_t dim, std::vector<float> data,
                                 std::vector<std::string> ids, bool normalized)
    : dim_(dim), data_(std::move(data)), ids_(std::move(ids)), normalized_(normalized) {
  if (dim_ == 0) throw FormatError("embedding dim must be positive");
  if (data_.size() != ids_.size() * dim_) {
    throw ConsistencyError("embedding payload holds " + std::to_string(data_.size()) +
                           " floats but " + std::to_string(ids_.size()) + " ids x dim " +
                           std::to_string(dim_) + " were expected");
  }
  index_.reserve(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (!index_.emplace(ids_[i], i).second)
      throw ConsistencyError("duplicate image id '" + ids_[i] + "'");
  }
  std::string bad;
  std::size_t n_bad = 0;
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    const auto r = row(i);
    if (!std::all_of(r.begin(), r.end(), [](float v) { return std::isfinite(v); })) {
      if (n_bad < 20) bad += (n_bad ? ", " : "") + ids_[i];
      ++n_bad;
    }
  }
  if (n_bad) {
    throw DataError(std::to_string(n_bad) + " row(s) contain NaN or infinity: " + bad +
                    (n_bad > 20 ? ", ..." : ""));
  }
}

std::optional<std::size_t> EmbeddingMatrix::find(std::string_view id) const {
  const auto it = index_.find(std::string(id));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t EmbeddingMatrix::row_of(std::string_view id) const {
  if (auto r = find(id)) return *r;
  throw ConsistencyError("image id '" + std::string(id) + "' has no embedding row");
}

EmbeddingMatrix EmbeddingMatrix::select(std::span<const std::size_t> rows) const {
  std::vector<float> data;
  data.reserve(rows.size() * dim_);
  std::vector<std::string> ids;
  ids.reserve(rows.size());
  for (std::size_t r : rows) {
    const auto src = row(r);
    data.insert(data.end(), src.begin(), src.end());
    ids.push_back(ids_[r]);
  }
  return EmbeddingMatrix(dim_, std::move(data), std::move(ids), normalized_);
}

std::filesystem::path ids_path_for(const std::filesystem::path& embeddings) {
  auto p = embeddings;
  p.replace_extension(".ids");
  return p;
}

namespace {

template <typename T>
T read_le(const unsigned char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

template <typename T>
void put_le(unsigned char* p, T v) {
  std::memcpy(p, &v, sizeof(T));
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

}  // namespace

EmbeddingMatrix load_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::array<unsigned char, kEmbeddingHeaderBytes> header{};
  in.read(reinterpret_cast<char*>(header.data()), header.size());
  if (in.gcount() != static_cast<std::streamsize>(header.size()))
    throw FormatError(path.string() + ": truncated header");
  if (std::memcmp(header.data(), "AEMB", 4) != 0)
    throw FormatError(path.string() + ": bad magic");
  const auto version = read_le<std::uint32_t>(header.data() + 4);
  if (version != 1)
    throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  const auto dim = read_le<std::uint32_t>(header.data() + 8);
  const auto count = read_le<std::uint64_t>(header.data() + 12);
  const auto flag = header[20];
  if (dim == 0) throw FormatError(path.string() + ": dim is zero");
  if (flag > 1) throw FormatError(path.string() + ": normalized flag must be 0 or 1");
  for (std::size_t i = 21; i < header.size(); ++i)
    if (header[i] != 0) throw FormatError(path.string() + ": reserved header bytes not zero");

  const auto file_size = std::filesystem::file_size(path);
  const std::uint64_t payload = file_size - kEmbeddingHeaderBytes;
  if (count > payload / (4ull * dim) || payload != count * dim * 4ull) {
    throw FormatError(path.string() + ": payload is " + std::to_string(payload) +
                      " bytes, header implies " + std::to_string(count) + " x " +
                      std::to_string(dim) + " f32");
  }
  std::vector<float> data(count * dim);
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!in) throw FormatError(path.string() + ": short read");

  auto ids = read_lines(ids_path_for(path));
  if (ids.size() != count) {
    throw ConsistencyError(ids_path_for(path).string() + " has " + std::to_string(ids.size()) +
                           " ids, embedding header declares " + std::to_string(count));
  }
  return EmbeddingMatrix(dim, std::move(data), std::move(ids), flag == 1);
}

void write_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path) {
  std::array<unsigned char, kEmbeddingHeaderBytes> header{};
  std::memcpy(header.data(), "AEMB", 4);
  put_le<std::uint32_t>(header.data() + 4, 1);
  put_le<std::uint32_t>(header.data() + 8, static_cast<std::uint32_t>(m.dim()));
  put_le<std::uint64_t>(header.data() + 12, m.count());
  header[20] = m.normalized() ? 1 : 0;
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(header.data()), header.size());
    out.write(reinterpret_cast<const char*>(m.data().data()),
              static_cast<std::streamsize>(m.data().size() * sizeof(float)));
    if (!out) throw FormatError("write failed: " + path.string());
  }
  std::ofstream ids(ids_path_for(path), std::ios::trunc);
  if (!ids) throw FormatError("cannot write " + ids_path_for(path).string());
  for (const auto& id : m.ids()) ids << id << '\n';
}

EmbeddingMatrix normalize(const EmbeddingMatrix& m) {
  std::vector<float> data = m.data();
  const std::size_t dim = m.dim();
  for (std::size_t i = 0; i < m.count(); ++i) {
    float* r = data.data() + i * dim;
    double sq = 0.0;
    for (std::size_t k = 0; k < dim; ++k) sq += static_cast<double>(r[k]) * r[k];
    if (sq == 0.0) throw DataError("row '" + m.id(i) + "' has zero norm");
    if (std::abs(sq - 1.0) <= 1e-6) continue;
    const double inv = 1.0 / std::sqrt(sq);
    for (std::size_t k = 0; k < dim; ++k) r[k] = static_cast<float>(r[k] * inv);
  }
  return EmbeddingMatrix(dim, std::move(data), m.ids(), true);
}

std::string_view to_string(Role r) {
  switch (r) {
    case Role::kExemplar: return "exemplar";
    case Role::kSynthesized: return "synthesized";
    case Role::kDistractor: return "distractor";
  }
  return "?";
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Role parse_role(std::string_view s) {
  if (s == "exemplar") return Role::kExemplar;
  if (s == "synthesized") return Role::kSynthesized;
  if (s == "distractor") return Role::kDistractor;
  throw FormatError("unknown role '" + std::string(s) + "'");
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw FormatError("unknown split '" + std::string(s) + "'");
}

DatasetManifest::DatasetManifest(std::vector<ManifestRecord> records)
    : records_(std::move(records)) {
  std::unordered_map<std::string, Role> roles;
  std::set<std::string> with_exemplar;
  std::set<std::string> with_synth;
  for (const auto& r : records_) {
    if (r.image_id.empty()) throw ConsistencyError("manifest record with empty image_id");
    auto [it, inserted] = roles.emplace(r.image_id, r.role);
    if (!inserted && it->second != r.role) {
      throw ConsistencyError("image '" + r.image_id + "' appears as both " +
                             std::string(to_string(it->second)) + " and " +
                             std::string(to_string(r.role)));
    }
    if (r.role == Role::kDistractor) continue;
    if (r.model_id.empty()) {
      throw ConsistencyError(std::string(to_string(r.role)) + " image '" + r.image_id +
                             "' has no model_id");
    }
    (r.role == Role::kExemplar ? with_exemplar : with_synth).insert(r.model_id);
  }
  for (const auto& model : with_synth) {
    if (!with_exemplar.contains(model))
      throw ConsistencyError("model '" + model + "' has synthesized images but no exemplar");
  }
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::vector<ManifestRecord> records;
  std::size_t line_no = 0;
  for (const auto& line : read_lines(path)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 6) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected 6 fields, got " +
                        std::to_string(fields.size()));
    }
    try {
      records.push_back({fields[0], parse_role(fields[1]), fields[2], parse_split(fields[3]),
                         fields[4], fields[5]});
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return DatasetManifest(std::move(records));
}

void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  for (const auto& r : m.records()) {
    out << r.image_id << '\t' << to_string(r.role) << '\t' << r.model_id << '\t'
        << to_string(r.split) << '\t' << r.prompt_type << '\t' << r.source << '\n';
  }
}

QueryPool build_query_pool(const DatasetManifest& manifest, Split split,
                           std::string_view source, std::string_view prompt_type,
                           std::size_t distractor_count, std::uint64_t seed) {
  auto matches = [&](const ManifestRecord& r) {
    return r.split == split && (source.empty() || r.source == source) &&
           (prompt_type.empty() || r.prompt_type == prompt_type);
  };

  QueryPool pool;
  for (const auto& r : manifest.records()) {
    if (r.role == Role::kSynthesized && matches(r)) {
      pool.query_ids.push_back(r.image_id);
      pool.query_models.push_back(r.model_id);
      pool.truth[r.model_id];
    }
  }
  if (pool.query_ids.empty()) {
    throw EmptyCaseError("no synthesized images for split=" + std::string(to_string(split)) +
                         " source='" + std::string(source) + "' prompt_type='" +
                         std::string(prompt_type) + "'");
  }

  std::vector<std::string> distractors;
  std::set<std::string> seen;
  for (const auto& r : manifest.records()) {
    if (r.role == Role::kExemplar) {
      const bool is_truth = pool.truth.contains(r.model_id);
      if (is_truth) pool.truth[r.model_id].insert(r.image_id);
      if ((is_truth || r.split == split) && seen.insert(r.image_id).second)
        pool.candidate_ids.push_back(r.image_id);
    } else if (r.role == Role::kDistractor) {
      distractors.push_back(r.image_id);
    }
  }
  if (distractor_count > distractors.size()) {
    throw DataError("requested " + std::to_string(distractor_count) + " distractors, only " +
                    std::to_string(distractors.size()) + " available");
  }
  // Partial Fisher-Yates: the first distractor_count slots are a uniform sample.
  Rng rng(seed);
  for (std::size_t i = 0; i < distractor_count; ++i) {
    const std::size_t j = i + rng.below(distractors.size() - i);
    std::swap(distractors[i], distractors[j]);
    if (seen.insert(distractors[i]).second) pool.candidate_ids.push_back(distractors[i]);
  }
  return pool;
}

}  // namespace attrib
