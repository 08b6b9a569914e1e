#include "attrib/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include <json.hpp>

#include "attrib/errors.hpp"
#include "attrib/retrieval.hpp"
#include "attrib/parallel.hpp"

namespace attrib {

std::string_view to_string(Schedule s) { return s == Schedule::kCosine ? "cosine" : "constant"; }

Schedule parse_schedule(std::string_view s) {
  if (s == "cosine") return Schedule::kCosine;
  if (s == "constant") return Schedule::kConstant;
  throw ConfigError("unknown schedule '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(lr, "lr");
  positive(beta1, "beta1");
  positive(beta2, "beta2");
  positive(eps, "eps");
  positive(upsilon, "upsilon");
  if (beta1 >= 1.0 || beta2 >= 1.0) throw ConfigError("beta1 and beta2 must be below 1");
  if (!(lambda_reg >= 0.0)) throw ConfigError("lambda_reg must be non-negative");
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
}

namespace {

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
  }
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    const auto u = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return u;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not a non-negative integer");
  }
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

TrainConfig train_config_from_map(const std::map<std::string, std::string>& kv) {
  TrainConfig c;
  for (const auto& [k, v] : kv) {
    if (k == "lr") c.lr = to_double(k, v);
    else if (k == "beta1") c.beta1 = to_double(k, v);
    else if (k == "beta2") c.beta2 = to_double(k, v);
    else if (k == "eps") c.eps = to_double(k, v);
    else if (k == "epochs") c.epochs = to_uint(k, v);
    else if (k == "batch_size") c.batch_size = to_uint(k, v);
    else if (k == "upsilon") c.upsilon = to_double(k, v);
    else if (k == "lambda_reg") c.lambda_reg = to_double(k, v);
    else if (k == "seed") c.seed = to_uint(k, v);
    else if (k == "mapper_kind") c.mapper_kind = parse_mapper_kind(v);
    else if (k == "schedule") c.schedule = parse_schedule(v);
    else if (k == "threads") c.threads = resolve_threads(static_cast<unsigned>(to_uint(k, v)));
    else if (k == "val_every") c.val_every = to_uint(k, v);
    else if (k == "val_distractors") c.val_distractors = to_uint(k, v);
    else throw ConfigError("unknown training config key '" + k + "'");
  }
  c.validate();
  return c;
}

std::map<std::string, std::string> train_config_to_map(const TrainConfig& c) {
  return {{"lr", fmt_double(c.lr)},
          {"beta1", fmt_double(c.beta1)},
          {"beta2", fmt_double(c.beta2)},
          {"eps", fmt_double(c.eps)},
          {"epochs", std::to_string(c.epochs)},
          {"batch_size", std::to_string(c.batch_size)},
          {"upsilon", fmt_double(c.upsilon)},
          {"lambda_reg", fmt_double(c.lambda_reg)},
          {"seed", std::to_string(c.seed)},
          {"mapper_kind", std::string(to_string(c.mapper_kind))},
          {"schedule", std::string(to_string(c.schedule))},
          {"threads", std::to_string(c.threads)},
          {"val_every", std::to_string(c.val_every)},
          {"val_distractors", std::to_string(c.val_distractors)}};
}

EpochSampler::EpochSampler(const DatasetManifest& manifest, Split split, std::uint64_t seed)
    : rng_(seed) {
  std::set<std::string> in_split;
  for (const auto& r : manifest.records())
    if (r.role != Role::kDistractor && r.split == split) in_split.insert(r.model_id);

  std::map<std::string, std::vector<std::string>> exemplars;
  std::map<std::string, std::map<std::string, std::vector<std::string>>> synth;
  for (const auto& r : manifest.records()) {
    if (!in_split.contains(r.model_id)) continue;
    if (r.role == Role::kExemplar) exemplars[r.model_id].push_back(r.image_id);
    if (r.role == Role::kSynthesized && r.split == split)
      synth[r.model_id][r.prompt_type].push_back(r.image_id);
  }
  for (const auto& model : in_split) {
    ModelImages mi;
    mi.model_id = model;
    mi.exemplars = exemplars[model];
    for (auto& [type, ids] : synth[model]) mi.synth_by_type.push_back(std::move(ids));
    if (mi.synth_by_type.empty()) continue;
    if (mi.exemplars.empty()) throw DataError("training model '" + model + "' has no exemplar");
    models_.push_back(std::move(mi));
  }
}

std::vector<std::vector<TrainingPair>> EpochSampler::sample_epoch(std::size_t batch_size) {
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
  std::vector<std::size_t> order(models_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng_.shuffle(order);

  std::vector<std::vector<TrainingPair>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    if (end - start < 2) break;
    std::vector<TrainingPair> batch;
    batch.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) {
      const auto& mi = models_[order[i]];
      const auto& ex = mi.exemplars[rng_.below(mi.exemplars.size())];
      const auto& group = mi.synth_by_type[rng_.below(mi.synth_by_type.size())];
      const auto& sy = group[rng_.below(group.size())];
      batch.push_back({ex, sy, mi.model_id});
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               double lr, double beta1, double beta2, double eps) {
  if (params.size() != grads.size() || state.m.size() != params.size() ||
      state.v.size() != params.size())
    throw ShapeError("adam_step: parameter, gradient and state sizes differ");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i]))
      throw NumericError("non-finite gradient at parameter " + std::to_string(i) + " (step " +
                         std::to_string(state.step + 1) + ")");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grads[i];
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
  if (total_steps == 0) return lr0;
  const double frac = static_cast<double>(std::min(step, total_steps)) /
                      static_cast<double>(total_steps);
  if (step >= total_steps) return 0.0;
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

namespace {

void gather(const EmbeddingMatrix& e, const std::vector<TrainingPair>& batch, Matrix& train_x,
            Matrix& synth_x) {
  train_x = Matrix(batch.size(), e.dim());
  synth_x = Matrix(batch.size(), e.dim());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto a = e.row(e.row_of(batch[i].exemplar_id));
    const auto b = e.row(e.row_of(batch[i].synth_id));
    std::copy(a.begin(), a.end(), train_x.row(i).begin());
    std::copy(b.begin(), b.end(), synth_x.row(i).begin());
  }
}

// Deterministic val pairing: first exemplar and first synthesized image of
// every val model, in manifest order.
std::vector<TrainingPair> validation_pairs(const DatasetManifest& manifest) {
  std::map<std::string, TrainingPair> first;
  for (const auto& r : manifest.records()) {
    if (r.role == Role::kSynthesized && r.split == Split::kVal) {
      auto& p = first[r.model_id];
      p.model_id = r.model_id;
      if (p.synth_id.empty()) p.synth_id = r.image_id;
    }
  }
  for (const auto& r : manifest.records()) {
    if (r.role == Role::kExemplar && first.contains(r.model_id)) {
      auto& p = first[r.model_id];
      if (p.exemplar_id.empty()) p.exemplar_id = r.image_id;
    }
  }
  std::vector<TrainingPair> out;
  for (auto& [model, p] : first) out.push_back(std::move(p));
  return out;
}

nlohmann::json step_json(const StepLog& s) {
  return {{"step", s.step}, {"epoch", s.epoch}, {"lr", s.lr}, {"contrastive", s.contrastive},
          {"regularizer", s.regularizer}, {"total", s.total}};
}

}  // namespace

TrainResult train(const TrainConfig& config, const EmbeddingMatrix& embeddings,
                  const DatasetManifest& manifest,
                  const std::optional<std::filesystem::path>& out_dir) {
  config.validate();
  if (!embeddings.normalized()) throw DataError("training needs normalized embeddings");

  EpochSampler sampler(manifest, Split::kTrain, config.seed);
  if (sampler.model_count() < 2) throw DataError("training split needs at least 2 models");

  Mapper mapper = Mapper::initial(config.mapper_kind, embeddings.dim(), config.seed);
  AdamState adam(mapper.params().size());

  const std::size_t full = sampler.model_count() / config.batch_size;
  const std::size_t rest = sampler.model_count() % config.batch_size;
  const std::size_t steps_per_epoch = full + (rest >= 2 ? 1 : 0);
  const std::size_t total_steps = steps_per_epoch * config.epochs;

  std::optional<QueryPool> val_pool;
  std::vector<TrainingPair> val_pairs;
  if (config.val_every > 0) {
    std::size_t available = 0;
    for (const auto& r : manifest.records()) available += r.role == Role::kDistractor;
    try {
      val_pool = build_query_pool(manifest, Split::kVal, "", "",
                                  std::min(config.val_distractors, available), config.seed);
      val_pairs = validation_pairs(manifest);
    } catch (const EmptyCaseError&) {
      val_pool.reset();
    }
  }

  std::ofstream log;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    log.open(*out_dir / "train_log.jsonl", std::ios::trunc);
    if (!log) throw FormatError("cannot write training log in " + out_dir->string());
  }

  TrainResult result;
  result.best = mapper;
  double best_recall = -1.0;
  double best_loss = 0.0;
  const std::size_t ks[] = {10};

  auto validate = [&](std::size_t epoch) {
    if (!val_pool) return;
    const auto rep = evaluate_case(*val_pool, embeddings, mapper, ks, "val", "trained",
                                   config.threads);
    ValidationLog v{epoch, rep.recall_at.at(10), 0.0};
    if (val_pairs.size() >= 2) {
      Matrix a, b;
      gather(embeddings, val_pairs, a, b);
      v.loss = nt_xent(map_forward(mapper, Branch::kTrainSide, a),
                       map_forward(mapper, Branch::kSynthSide, b), config.upsilon);
    }
    result.validations.push_back(v);
    if (v.recall_at_10 > best_recall || (v.recall_at_10 == best_recall && v.loss < best_loss)) {
      best_recall = v.recall_at_10;
      best_loss = v.loss;
      result.best = mapper;
      result.best_epoch = epoch;
    }
  };

  std::size_t step = 0;
  Matrix train_x, synth_x;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    for (const auto& batch : sampler.sample_epoch(config.batch_size)) {
      gather(embeddings, batch, train_x, synth_x);
      const auto lv = loss_and_grad(mapper, train_x, synth_x, config.upsilon, config.lambda_reg,
                                    config.threads);
      if (!std::isfinite(lv.total)) {
        if (out_dir) save_mapper(mapper, *out_dir / "mapper_last.amap");
        throw NumericError("training loss is not finite at step " + std::to_string(step) +
                           "; last good mapper kept");
      }
      const double lr = config.schedule == Schedule::kCosine
                            ? cosine_lr(step, total_steps, config.lr)
                            : config.lr;
      Mapper before = mapper;
      try {
        adam_step(mapper.params(), lv.gradients, adam, lr, config.beta1, config.beta2,
                  config.eps);
      } catch (const NumericError&) {
        if (out_dir) save_mapper(before, *out_dir / "mapper_last.amap");
        throw;
      }
      StepLog s{step, epoch, lr, lv.contrastive, lv.regularizer, lv.total};
      result.steps.push_back(s);
      if (log) log << step_json(s).dump() << '\n';
      ++step;
    }
    if (config.val_every > 0 && (epoch % config.val_every == 0 || epoch == config.epochs))
      validate(epoch);
  }
  result.last = mapper;
  if (!val_pool || config.val_every == 0) result.best = mapper;

  if (out_dir) {
    save_mapper(result.last, *out_dir / "mapper_last.amap");
    save_mapper(result.best, *out_dir / "mapper_best.amap");
  }
  return result;
}

}  // namespace attrib
