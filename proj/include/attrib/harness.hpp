#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "attrib/calibration.hpp"
#include "attrib/errors.hpp"
#include "attrib/mapper.hpp"
#include "attrib/retrieval.hpp"
#include "attrib/store.hpp"
#include "attrib/trainer.hpp"

namespace attrib {

// ---------------------------------------------------------------------------
// Configuration

// Parses flat `key=value` lines; blank lines and lines starting with '#' are
// skipped. Throws ConfigError on malformed lines or duplicate keys.
std::map<std::string, std::string> parse_key_values(const std::string& text);
std::map<std::string, std::string> load_key_values(const std::filesystem::path& path);

// One test case: the synthesized images of `source` prompted with
// `prompt_type`. `group` is the model type the case is averaged under
// (e.g. object or style).
struct CaseSpec {
  std::string source;
  std::string prompt_type;
  std::string group;
  std::string name() const { return source + "/" + prompt_type; }
};

struct RunConfig {
  std::filesystem::path embeddings;
  std::filesystem::path manifest;
  std::filesystem::path out;
  std::optional<std::filesystem::path> mapper_path;       // used when train=false
  std::optional<std::filesystem::path> calibration_path;  // used when calibrate=false
  bool train = true;
  bool calibrate = true;
  TrainConfig training;
  CalibrationConfig calibration;
  std::vector<CaseSpec> cases;                  // empty: every (source, prompt_type) of eval_split
  std::map<std::string, std::string> groups;    // source -> group; default group is the source
  std::vector<std::size_t> ks = {1, 5, 10, 100};
  Split eval_split = Split::kTest;
  Split calib_split = Split::kVal;
  std::optional<std::size_t> distractors;       // per case; default all
  std::size_t score_top_n = 10;
  std::uint64_t seed = 0;
  unsigned threads = 1;

  void validate() const;
};

// Every key accepted by run_config_from_map, in documentation order.
const std::vector<std::string>& run_config_keys();
RunConfig run_config_from_map(const std::map<std::string, std::string>& kv);
std::string run_config_to_text(const RunConfig& c);

// ---------------------------------------------------------------------------
// Synthetic data

enum class DistortionKind { kIdentity, kRotation, kExplicit };

struct SyntheticSpec {
  std::size_t n_models = 200;
  std::size_t exemplars_per_model = 3;
  std::size_t synth_per_model = 5;
  std::size_t n_distractors = 10000;
  std::size_t dim = 64;
  DistortionKind distortion_kind = DistortionKind::kRotation;
  Matrix distortion;  // used when distortion_kind is kExplicit
  double noise_sigma = 0.05;  // per-coordinate Gaussian noise std
  std::uint64_t seed = 0;
  std::vector<std::string> prompt_types = {"gpt", "procedural"};
  std::string source = "synthetic";
  double val_fraction = 0.2;
  double test_fraction = 0.2;

  void validate() const;
};

inline constexpr double kMaxDistortionCondition = 1e6;

struct SyntheticData {
  EmbeddingMatrix embeddings;
  DatasetManifest manifest;
  Matrix distortion;
};

// Each model m gets a random unit latent u_m. Exemplars are
// normalize(u_m + noise), synthesized images normalize(A u_m + noise) for the
// distortion A, distractors are random unit vectors. Models are split into
// train/val/test by a seeded shuffle. Fully determined by `spec`.
SyntheticData synth_generate(const SyntheticSpec& spec);

struct SyntheticPaths {
  std::filesystem::path embeddings;
  std::filesystem::path manifest;
};

// Writes embeddings.emb (+ embeddings.ids) and manifest.tsv under `dir`.
SyntheticPaths write_synthetic(const SyntheticData& data, const std::filesystem::path& dir);

// Haar-random orthogonal matrix (QR of a Gaussian matrix, sign-fixed).
Matrix random_rotation(std::size_t dim, Rng& rng);

// Ratio of largest to smallest singular value (Jacobi eigen-decomposition of
// A^T A). Infinity for singular input.
double condition_number(const Matrix& a);

// ---------------------------------------------------------------------------
// Reports

struct EvalReport {
  std::vector<CaseSpec> cases;
  std::vector<std::size_t> ks;
  std::vector<std::string> methods;            // display order
  std::map<std::string, MetricReport> by_method;
};

struct EmittedReport {
  std::string table;    // human-readable
  std::string records;  // JSON lines
};

// Table rows per (method, case) with R@K and mAP columns, followed by
// macro-average rows per group and over all cases. Values print with three
// decimals.
EmittedReport report_emit(const EvalReport& report);

// Rebuilds a report from the JSON-lines records written by report_emit.
EvalReport parse_report_records(const std::string& records);

// ---------------------------------------------------------------------------
// Pipeline

class StageError : public Error {
 public:
  StageError(std::string stage, const Error& cause)
      : Error(stage + ": " + cause.what(), cause.code()), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct LoadedData {
  EmbeddingMatrix embeddings;
  DatasetManifest manifest;
};

// Loads both files, normalizes unnormalized embeddings and checks every
// manifest id has a row.
LoadedData ingest(const std::filesystem::path& embeddings, const std::filesystem::path& manifest);

std::vector<CaseSpec> resolve_cases(const RunConfig& config, const DatasetManifest& manifest);

EvalReport run_evaluation(const RunConfig& config, const LoadedData& data,
                          const std::optional<Mapper>& mapper);

// Scans each calib-split query and keeps its top-R list plus any missing
// exemplar.
std::vector<ScoredPool> collect_scored_pools(const RunConfig& config, const LoadedData& data,
                                             const std::optional<Mapper>& mapper, Split split);

// One JSON line per eval-split query: top-N candidates with similarity and
// influence percentage.
std::string score_dump(const RunConfig& config, const LoadedData& data,
                       const std::optional<Mapper>& mapper, const CalibrationParams& params);

struct PipelineResult {
  EvalReport report;
  std::optional<Mapper> mapper;
  std::optional<CalibrationFit> calibration;
};

// ingest -> train -> evaluate -> calibrate -> score, writing under config.out:
//   config.txt, train/ (log and checkpoints), mapper.amap, report.jsonl,
//   report.txt, calibration.txt, scores.jsonl
// A failing stage throws StageError; artifacts of earlier stages stay on disk.
PipelineResult run_pipeline(const RunConfig& config);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace attrib
