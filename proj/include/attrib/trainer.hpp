#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attrib/mapper.hpp"
#include "attrib/rng.hpp"
#include "attrib/store.hpp"

namespace attrib {

enum class Schedule { kCosine, kConstant };

std::string_view to_string(Schedule s);
Schedule parse_schedule(std::string_view s);

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t epochs = 100;
  std::size_t batch_size = 1024;
  double upsilon = 1.0;  // NT-Xent temperature
  double lambda_reg = 0.05;
  std::uint64_t seed = 0;
  MapperKind mapper_kind = MapperKind::kAffine;
  Schedule schedule = Schedule::kCosine;
  unsigned threads = 1;
  // Validation: every `val_every` epochs (and after the last one) the mapper
  // is scored by Recall@10 on the val split against `val_distractors`
  // distractors. 0 disables validation and keeps the last mapper.
  std::size_t val_every = 10;
  std::size_t val_distractors = 10000;

  void validate() const;
};

// Flat key=value text, keys named after the fields above.
TrainConfig train_config_from_map(const std::map<std::string, std::string>& kv);
std::map<std::string, std::string> train_config_to_map(const TrainConfig& c);

struct TrainingPair {
  std::string exemplar_id;
  std::string synth_id;
  std::string model_id;
  bool operator==(const TrainingPair&) const = default;
};

// Draws one (exemplar, synthesized) pair per model per epoch. Within a model
// the exemplar is uniform over its exemplars, the prompt type uniform over the
// types it has, and the synthesized image uniform within that type.
class EpochSampler {
 public:
  // Models of `split` that have synthesized records; only exemplar and
  // synthesized records are ever sampled. Throws DataError for a model with
  // no exemplars in the split.
  EpochSampler(const DatasetManifest& manifest, Split split, std::uint64_t seed);

  // Pairs for one epoch, models shuffled, cut into batches of `batch_size`.
  // A trailing batch of fewer than 2 pairs is dropped.
  std::vector<std::vector<TrainingPair>> sample_epoch(std::size_t batch_size);

  std::size_t model_count() const { return models_.size(); }

 private:
  struct ModelImages {
    std::string model_id;
    std::vector<std::string> exemplars;
    std::vector<std::vector<std::string>> synth_by_type;  // prompt types sorted by name
  };
  std::vector<ModelImages> models_;
  Rng rng_;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

// One bias-corrected Adam update. Throws NumericError on a non-finite gradient.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

// lr0 * (1 + cos(pi * step / total_steps)) / 2
double cosine_lr(std::size_t step, std::size_t total_steps, double lr0);

struct StepLog {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double contrastive = 0.0;
  double regularizer = 0.0;
  double total = 0.0;
};

struct ValidationLog {
  std::size_t epoch = 0;
  double recall_at_10 = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  Mapper best;   // selected by val Recall@10, ties to lower val loss
  Mapper last;
  std::size_t best_epoch = 0;
  std::vector<StepLog> steps;
  std::vector<ValidationLog> validations;
};

// Trains on the train split and selects on the val split. When `out_dir` is
// set, writes train_log.jsonl, mapper_last.amap and mapper_best.amap there.
// A non-finite loss aborts with NumericError after saving the last good mapper.
TrainResult train(const TrainConfig& config, const EmbeddingMatrix& embeddings,
                  const DatasetManifest& manifest,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt);

}  // namespace attrib
