#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "attrib/harness.hpp"

namespace attrib {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
  if (!out) throw FormatError("write failed: " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

LoadedData ingest(const std::filesystem::path& embeddings, const std::filesystem::path& manifest) {
  LoadedData d{load_embeddings(embeddings), load_manifest(manifest)};
  if (!d.embeddings.normalized()) d.embeddings = normalize(d.embeddings);
  for (const auto& r : d.manifest.records())
    if (!d.embeddings.find(r.image_id))
      throw ConsistencyError("manifest image '" + r.image_id + "' has no embedding row");
  return d;
}

std::vector<CaseSpec> resolve_cases(const RunConfig& config, const DatasetManifest& manifest) {
  if (!config.cases.empty()) return config.cases;
  std::set<std::pair<std::string, std::string>> seen;
  std::vector<CaseSpec> cases;
  for (const auto& r : manifest.records()) {
    if (r.role != Role::kSynthesized || r.split != config.eval_split) continue;
    if (!seen.insert({r.source, r.prompt_type}).second) continue;
    const auto g = config.groups.find(r.source);
    cases.push_back({r.source, r.prompt_type, g == config.groups.end() ? r.source : g->second});
  }
  if (cases.empty())
    throw EmptyCaseError("no synthesized images in split '" +
                         std::string(to_string(config.eval_split)) + "'");
  return cases;
}

namespace {

std::size_t distractor_budget(const RunConfig& config, const DatasetManifest& manifest) {
  std::size_t available = 0;
  for (const auto& r : manifest.records()) available += r.role == Role::kDistractor;
  return config.distractors.value_or(available);
}

template <typename Fn>
auto stage(const std::string& name, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(name, e);
  } catch (const std::filesystem::filesystem_error& e) {
    throw StageError(name, FormatError(e.what()));
  }
}

// Candidate matrix (mapped with the train branch when a mapper is given) and
// mapped query rows for one pool.
struct PreparedPool {
  EmbeddingMatrix candidates;
  EmbeddingMatrix queries;
};

PreparedPool prepare(const QueryPool& pool, const LoadedData& data,
                     const std::optional<Mapper>& mapper, unsigned threads) {
  std::vector<std::size_t> cand_rows, query_rows;
  for (const auto& id : pool.candidate_ids) cand_rows.push_back(data.embeddings.row_of(id));
  for (const auto& id : pool.query_ids) query_rows.push_back(data.embeddings.row_of(id));
  PreparedPool p{data.embeddings.select(cand_rows), data.embeddings.select(query_rows)};
  if (mapper) {
    p.candidates = map_embeddings(*mapper, Branch::kTrainSide, p.candidates, threads);
    p.queries = map_embeddings(*mapper, Branch::kSynthSide, p.queries, threads);
  }
  return p;
}

ScoredPool scored_for_query(const QueryPool& pool, const PreparedPool& prepared, std::size_t q,
                            const CalibrationConfig& cc, unsigned threads) {
  const auto& truth = pool.truth.at(pool.query_models[q]);
  std::vector<std::string> truth_ids(truth.begin(), truth.end());
  std::vector<std::size_t> truth_rows;
  for (const auto& id : truth_ids) truth_rows.push_back(prepared.candidates.row_of(id));
  const std::size_t n = prepared.candidates.count();
  const std::size_t keep = kept_count(n, cc.keep_fraction, cc.keep_cap);
  auto res = scan(prepared.queries.row(q), prepared.candidates, keep, truth_rows, threads);
  res.top.query_id = pool.query_ids[q];
  return make_scored_pool(res, truth_ids, keep, n);
}

}  // namespace

EvalReport run_evaluation(const RunConfig& config, const LoadedData& data,
                          const std::optional<Mapper>& mapper) {
  EvalReport report;
  report.cases = resolve_cases(config, data.manifest);
  report.ks = config.ks;
  report.methods = {"pretrained"};
  if (mapper) report.methods.push_back("trained");
  const std::size_t budget = distractor_budget(config, data.manifest);

  std::vector<CaseReport> pretrained, trained;
  for (const auto& spec : report.cases) {
    const auto pool = build_query_pool(data.manifest, config.eval_split, spec.source,
                                       spec.prompt_type, budget, config.seed);
    pretrained.push_back(evaluate_case(pool, data.embeddings, std::nullopt, config.ks,
                                       spec.name(), "pretrained", config.threads));
    if (mapper) {
      trained.push_back(evaluate_case(pool, data.embeddings, mapper, config.ks, spec.name(),
                                      "trained", config.threads));
    }
  }
  report.by_method["pretrained"] = aggregate(std::move(pretrained));
  if (mapper) report.by_method["trained"] = aggregate(std::move(trained));
  return report;
}

std::vector<ScoredPool> collect_scored_pools(const RunConfig& config, const LoadedData& data,
                                             const std::optional<Mapper>& mapper, Split split) {
  const auto pool = build_query_pool(data.manifest, split, "", "",
                                     distractor_budget(config, data.manifest), config.seed);
  const auto prepared = prepare(pool, data, mapper, config.threads);
  std::vector<ScoredPool> out;
  out.reserve(pool.query_ids.size());
  for (std::size_t q = 0; q < pool.query_ids.size(); ++q)
    out.push_back(scored_for_query(pool, prepared, q, config.calibration, config.threads));
  return out;
}

std::string score_dump(const RunConfig& config, const LoadedData& data,
                       const std::optional<Mapper>& mapper, const CalibrationParams& params) {
  const auto pool = build_query_pool(data.manifest, config.eval_split, "", "",
                                     distractor_budget(config, data.manifest), config.seed);
  const auto prepared = prepare(pool, data, mapper, config.threads);
  std::ostringstream out;
  for (std::size_t q = 0; q < pool.query_ids.size(); ++q) {
    const auto scored = scored_for_query(pool, prepared, q, config.calibration, config.threads);
    const auto dist = influence_scores(scored, params);
    const auto& truth = pool.truth.at(pool.query_models[q]);
    nlohmann::json top = nlohmann::json::array();
    const std::size_t n = std::min(config.score_top_n, scored.ids.size());
    for (std::size_t i = 0; i < n; ++i) {
      top.push_back({{"id", scored.ids[i]},
                     {"similarity", scored.sims[i]},
                     {"influence_pct", 100.0 * dist.probs[i]},
                     {"exemplar", truth.contains(scored.ids[i])}});
    }
    out << nlohmann::json{{"query_id", pool.query_ids[q]},
                          {"model_id", pool.query_models[q]},
                          {"tau", params.tau},
                          {"lam", params.lam},
                          {"top", top}}
               .dump()
        << '\n';
  }
  return out.str();
}

PipelineResult run_pipeline(const RunConfig& config) {
  stage("config", [&] {
    config.validate();
    std::filesystem::create_directories(config.out);
    write_text(config.out / "config.txt", run_config_to_text(config));
  });

  const LoadedData data = stage("ingest", [&] { return ingest(config.embeddings, config.manifest); });

  PipelineResult result;
  stage("train", [&] {
    if (config.train) {
      auto trained = train(config.training, data.embeddings, data.manifest, config.out / "train");
      result.mapper = std::move(trained.best);
      save_mapper(*result.mapper, config.out / "mapper.amap");
    } else if (config.mapper_path) {
      result.mapper = load_mapper(*config.mapper_path);
    }
  });

  stage("evaluate", [&] {
    result.report = run_evaluation(config, data, result.mapper);
    const auto emitted = report_emit(result.report);
    write_text(config.out / "report.jsonl", emitted.records);
    write_text(config.out / "report.txt", emitted.table);
  });

  CalibrationParams params;
  stage("calibrate", [&] {
    if (config.calibrate) {
      const auto pools = collect_scored_pools(config, data, result.mapper, config.calib_split);
      result.calibration = fit_calibration(pools, config.calibration);
      params = result.calibration->params;
      save_calibration(params, config.calibration, result.calibration->final_loss,
                       config.out / "calibration.txt");
    } else if (config.calibration_path) {
      params = load_calibration(*config.calibration_path);
    }
  });

  stage("score", [&] {
    write_text(config.out / "scores.jsonl", score_dump(config, data, result.mapper, params));
  });
  return result;
}

}  // namespace attrib
