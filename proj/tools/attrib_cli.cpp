// Command-line front end: ingest, normalize, synth, train, eval, calibrate,
// score, report and run (the full pipeline).

#include <cstdio>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "attrib/harness.hpp"

namespace {

using namespace attrib;

struct RunFlags {
  std::string config_file;
  std::map<std::string, std::string> values;
};

// Registers --config plus one string flag per RunConfig key.
void add_run_flags(CLI::App* cmd, RunFlags& flags) {
  cmd->add_option("--config", flags.config_file, "flat key=value config file");
  for (const auto& key : run_config_keys()) {
    cmd->add_option_function<std::string>(
        "--" + key, [&flags, key](const std::string& v) { flags.values[key] = v; },
        "overrides config key " + key);
  }
}

RunConfig resolve(const RunFlags& flags) {
  std::map<std::string, std::string> kv;
  if (!flags.config_file.empty()) kv = load_key_values(flags.config_file);
  for (const auto& [k, v] : flags.values) kv[k] = v;
  return run_config_from_map(kv);
}

std::optional<Mapper> mapper_from(const RunConfig& c) {
  if (c.mapper_path) return load_mapper(*c.mapper_path);
  return std::nullopt;
}

int cmd_ingest(const RunFlags& flags) {
  const auto c = resolve(flags);
  if (c.embeddings.empty() || c.manifest.empty())
    throw ConfigError("ingest needs --embeddings and --manifest");
  const auto data = ingest(c.embeddings, c.manifest);
  std::map<std::string, std::size_t> roles;
  std::map<std::string, std::set<std::string>> models_by_split;
  for (const auto& r : data.manifest.records()) {
    ++roles[std::string(to_string(r.role))];
    if (r.role != Role::kDistractor) models_by_split[std::string(to_string(r.split))].insert(r.model_id);
  }
  std::cout << "embeddings: " << data.embeddings.count() << " x " << data.embeddings.dim() << '\n';
  for (const auto& [role, n] : roles) std::cout << role << ": " << n << '\n';
  for (const auto& [split, models] : models_by_split)
    std::cout << "models(" << split << "): " << models.size() << '\n';
  return 0;
}

int cmd_train(const RunConfig& c) {
  c.validate();
  const auto data = ingest(c.embeddings, c.manifest);
  const auto result = train(c.training, data.embeddings, data.manifest, c.out);
  save_mapper(result.best, c.out / "mapper.amap");
  std::cout << "steps: " << result.steps.size() << ", best epoch: " << result.best_epoch << '\n';
  for (const auto& v : result.validations)
    std::cout << "epoch " << v.epoch << " val R@10 " << v.recall_at_10 << " loss " << v.loss << '\n';
  return 0;
}

int cmd_eval(const RunConfig& c) {
  c.validate();
  const auto data = ingest(c.embeddings, c.manifest);
  const auto report = run_evaluation(c, data, mapper_from(c));
  const auto emitted = report_emit(report);
  std::filesystem::create_directories(c.out);
  write_text(c.out / "report.jsonl", emitted.records);
  write_text(c.out / "report.txt", emitted.table);
  std::cout << emitted.table;
  return 0;
}

int cmd_calibrate(const RunConfig& c) {
  c.validate();
  const auto data = ingest(c.embeddings, c.manifest);
  const auto pools = collect_scored_pools(c, data, mapper_from(c), c.calib_split);
  const auto fit = fit_calibration(pools, c.calibration);
  std::filesystem::create_directories(c.out);
  save_calibration(fit.params, c.calibration, fit.final_loss, c.out / "calibration.txt");
  std::printf("tau=%.6g lam=%.6g loss %.6g -> %.6g\n", fit.params.tau, fit.params.lam,
              fit.initial_loss, fit.final_loss);
  return 0;
}

int cmd_score(const RunConfig& c) {
  c.validate();
  const auto data = ingest(c.embeddings, c.manifest);
  CalibrationParams params;
  if (c.calibration_path) params = load_calibration(*c.calibration_path);
  std::filesystem::create_directories(c.out);
  write_text(c.out / "scores.jsonl", score_dump(c, data, mapper_from(c), params));
  return 0;
}

int cmd_run(const RunConfig& c) {
  const auto result = run_pipeline(c);
  std::cout << report_emit(result.report).table;
  if (result.calibration)
    std::printf("calibration: tau=%.6g lam=%.6g\n", result.calibration->params.tau,
                result.calibration->params.lam);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Embedding-space data attribution: train mappers, evaluate retrieval, calibrate influence"};
  app.require_subcommand(1);

  RunFlags ingest_f, train_f, eval_f, calib_f, score_f, run_f;
  auto* ingest_cmd = app.add_subcommand("ingest", "validate embeddings + manifest and summarize");
  add_run_flags(ingest_cmd, ingest_f);
  auto* train_cmd = app.add_subcommand("train", "train a mapper");
  add_run_flags(train_cmd, train_f);
  auto* eval_cmd = app.add_subcommand("eval", "Recall@K / mAP per test case");
  add_run_flags(eval_cmd, eval_f);
  auto* calib_cmd = app.add_subcommand("calibrate", "fit influence temperature and threshold");
  add_run_flags(calib_cmd, calib_f);
  auto* score_cmd = app.add_subcommand("score", "dump top candidates with influence percentages");
  add_run_flags(score_cmd, score_f);
  auto* run_cmd = app.add_subcommand("run", "full pipeline");
  add_run_flags(run_cmd, run_f);

  std::string norm_in, norm_out;
  auto* norm_cmd = app.add_subcommand("normalize", "rescale every embedding row to unit norm");
  norm_cmd->add_option("--in", norm_in, "input embedding file")->required();
  norm_cmd->add_option("--out", norm_out, "output embedding file")->required();

  std::string report_in;
  auto* report_cmd = app.add_subcommand("report", "render report.jsonl as a table");
  report_cmd->add_option("--in", report_in, "report.jsonl")->required();

  SyntheticSpec spec;
  std::string synth_out, distortion = "rotation", prompt_types = "gpt,procedural";
  auto* synth_cmd = app.add_subcommand("synth", "generate a planted-distortion synthetic dataset");
  synth_cmd->add_option("--out", synth_out, "output directory")->required();
  synth_cmd->add_option("--n_models", spec.n_models);
  synth_cmd->add_option("--exemplars_per_model", spec.exemplars_per_model);
  synth_cmd->add_option("--synth_per_model", spec.synth_per_model);
  synth_cmd->add_option("--n_distractors", spec.n_distractors);
  synth_cmd->add_option("--dim", spec.dim);
  synth_cmd->add_option("--distortion", distortion)->check(CLI::IsMember({"identity", "rotation"}));
  synth_cmd->add_option("--noise_sigma", spec.noise_sigma);
  synth_cmd->add_option("--seed", spec.seed);
  synth_cmd->add_option("--prompt_types", prompt_types, "comma-separated");
  synth_cmd->add_option("--source", spec.source);
  synth_cmd->add_option("--val_fraction", spec.val_fraction);
  synth_cmd->add_option("--test_fraction", spec.test_fraction);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
  }

  try {
    if (*ingest_cmd) return cmd_ingest(ingest_f);
    if (*train_cmd) return cmd_train(resolve(train_f));
    if (*eval_cmd) return cmd_eval(resolve(eval_f));
    if (*calib_cmd) return cmd_calibrate(resolve(calib_f));
    if (*score_cmd) return cmd_score(resolve(score_f));
    if (*run_cmd) return cmd_run(resolve(run_f));
    if (*norm_cmd) {
      write_embeddings(normalize(load_embeddings(norm_in)), norm_out);
      return 0;
    }
    if (*report_cmd) {
      std::cout << report_emit(parse_report_records(read_text(report_in))).table;
      return 0;
    }
    if (*synth_cmd) {
      spec.distortion_kind = distortion == "identity" ? DistortionKind::kIdentity
                                                      : DistortionKind::kRotation;
      spec.prompt_types.clear();
      std::stringstream ss(prompt_types);
      for (std::string t; std::getline(ss, t, ',');)
        if (!t.empty()) spec.prompt_types.push_back(t);
      const auto paths = write_synthetic(synth_generate(spec), synth_out);
      std::cout << paths.embeddings.string() << '\n' << paths.manifest.string() << '\n';
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kData);
  }
  return 0;
}
