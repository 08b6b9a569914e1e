#include <doctest.h>

#include <cmath>
#include <iterator>
#include <sstream>

#include "attrib/errors.hpp"
#include "attrib/harness.hpp"
#include "test_util.hpp"

using namespace attrib;

namespace {

SyntheticSpec tiny_spec() {
  SyntheticSpec s;
  s.n_models = 30;
  s.n_distractors = 300;
  s.dim = 16;
  s.seed = 21;
  return s;
}

RunConfig config_for(const SyntheticPaths& paths, const std::filesystem::path& out) {
  RunConfig c = run_config_from_map({{"epochs", "20"},
                                     {"batch_size", "16"},
                                     {"lr", "0.01"},
                                     {"val_every", "5"},
                                     {"calib_steps", "20"},
                                     {"seed", "3"}});
  c.embeddings = paths.embeddings;
  c.manifest = paths.manifest;
  c.out = out;
  return c;
}

double mean_pair_cosine(const SyntheticData& d) {
  // Cosine between each model's first exemplar and first synthesized image.
  std::map<std::string, std::pair<std::string, std::string>> first;
  for (const auto& r : d.manifest.records()) {
    auto& f = first[r.model_id];
    if (r.role == Role::kExemplar && f.first.empty()) f.first = r.image_id;
    if (r.role == Role::kSynthesized && f.second.empty()) f.second = r.image_id;
  }
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& [m, f] : first) {
    if (f.first.empty() || f.second.empty()) continue;
    sum += similarity(d.embeddings.row(d.embeddings.row_of(f.first)),
                      d.embeddings.row(d.embeddings.row_of(f.second)));
    ++n;
  }
  return sum / double(n);
}

}  // namespace

TEST_CASE("key=value parsing") {
  const auto kv = parse_key_values("# comment\n\n a = 1 \nb=x=y\n");
  CHECK(kv.at("a") == "1");
  CHECK(kv.at("b") == "x=y");
  CHECK_THROWS_AS(parse_key_values("a=1\na=2\n"), ConfigError);
  CHECK_THROWS_AS(parse_key_values("novalue\n"), ConfigError);
}

TEST_CASE("run config parsing and validation") {
  TempDir dir("harness_cfg");
  std::ofstream(dir / "e.emb") << "x";
  std::ofstream(dir / "m.tsv") << "x";
  auto c = run_config_from_map({{"embeddings", (dir / "e.emb").string()},
                                {"manifest", (dir / "m.tsv").string()},
                                {"out", (dir / "out").string()},
                                {"ks", "5, 10,100"},
                                {"cases", "imagenet:gpt,bam:object"},
                                {"groups", "imagenet:object,bam:style"},
                                {"seed", "9"},
                                {"calib_steps", "7"},
                                {"epochs", "3"}});
  CHECK(c.ks == std::vector<std::size_t>{5, 10, 100});
  REQUIRE(c.cases.size() == 2);
  CHECK(c.cases[1].name() == "bam/object");
  CHECK(c.cases[1].group == "style");
  CHECK(c.training.seed == 9);
  CHECK(c.training.epochs == 3);
  CHECK(c.calibration.steps == 7);
  CHECK_NOTHROW(c.validate());

  // The written form parses back to the same configuration.
  const auto again = run_config_from_map(parse_key_values(run_config_to_text(c)));
  CHECK(run_config_to_text(again) == run_config_to_text(c));

  auto empty_ks = c;
  empty_ks.ks.clear();
  CHECK_THROWS_AS(empty_ks.validate(), ConfigError);
  CHECK_THROWS_AS(run_config_from_map({{"ks", ""}}).validate(), ConfigError);
  auto unsorted = c;
  unsorted.ks = {10, 5};
  CHECK_THROWS_AS(unsorted.validate(), ConfigError);
  auto missing = c;
  missing.embeddings = dir / "nope.emb";
  CHECK_THROWS_AS(missing.validate(), ConfigError);
  CHECK_THROWS_AS(run_config_from_map({{"colour", "red"}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_map({{"train", "maybe"}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_map({{"eval_split", "dev"}}), ConfigError);
}

TEST_CASE("synthetic generation is deterministic down to the bytes") {
  TempDir dir("harness_synth");
  const auto spec = tiny_spec();
  write_synthetic(synth_generate(spec), dir / "a");
  write_synthetic(synth_generate(spec), dir / "b");
  for (const char* f : {"embeddings.emb", "embeddings.ids", "manifest.tsv"})
    CHECK(read_bytes(dir / "a" / f) == read_bytes(dir / "b" / f));
  auto other = spec;
  other.seed = 22;
  write_synthetic(synth_generate(other), dir / "c");
  CHECK(read_bytes(dir / "a/embeddings.emb") != read_bytes(dir / "c/embeddings.emb"));

  const auto d = synth_generate(spec);
  CHECK(d.embeddings.count() == 30 * (3 + 5) + 300);
  CHECK(d.embeddings.normalized());
  const auto loaded = ingest(dir / "a/embeddings.emb", dir / "a/manifest.tsv");
  CHECK(loaded.embeddings.data() == d.embeddings.data());
  CHECK(loaded.manifest.records() == d.manifest.records());
}

TEST_CASE("noise-free identity distortion gives perfect retrieval") {
  auto spec = tiny_spec();
  spec.distortion_kind = DistortionKind::kIdentity;
  spec.noise_sigma = 0.0;
  spec.exemplars_per_model = 1;
  const auto d = synth_generate(spec);
  const auto pool = build_query_pool(d.manifest, Split::kTest, "", "", 300, 1);
  const std::vector<std::size_t> ks{1, 10};
  const auto rep = evaluate_case(pool, d.embeddings, std::nullopt, ks, "id", "pretrained");
  CHECK(rep.recall_at.at(1) == 1.0);
  CHECK(rep.mean_average_precision == 1.0);
}

TEST_CASE("explicit distortions must be well conditioned") {
  auto spec = tiny_spec();
  spec.dim = 3;
  spec.distortion_kind = DistortionKind::kExplicit;
  spec.distortion = Matrix::identity(3);
  spec.distortion(2, 2) = 1e-9;
  CHECK_THROWS_AS(synth_generate(spec), ConfigError);
  spec.distortion(2, 2) = 0.5;
  CHECK(condition_number(spec.distortion) == doctest::Approx(2.0));
  CHECK_NOTHROW(synth_generate(spec));
  spec.distortion = Matrix(2, 2);
  CHECK_THROWS_AS(synth_generate(spec), ConfigError);

  Rng rng(4);
  CHECK(condition_number(random_rotation(12, rng)) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("exemplar/synthesized similarity rises as noise falls") {
  auto spec = tiny_spec();
  spec.distortion_kind = DistortionKind::kIdentity;
  double prev = -2.0;
  for (double sigma : {0.5, 0.2, 0.1, 0.05, 0.01, 0.0}) {
    spec.noise_sigma = sigma;
    const double c = mean_pair_cosine(synth_generate(spec));
    CHECK(c > prev);
    prev = c;
  }
  CHECK(prev == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("report table renders values verbatim and averages cases") {
  EvalReport r;
  r.ks = {5, 10, 100};
  r.methods = {"pretrained"};
  r.cases = {{"imagenet", "gpt", "object"}};
  CaseReport c;
  c.name = "imagenet/gpt";
  c.recall_at = {{5, 0.236}, {10, 0.277}, {100, 0.437}};
  c.mean_average_precision = 0.195;
  r.by_method["pretrained"] = aggregate({c});
  const auto out = report_emit(r);
  const auto line_start = out.table.find("imagenet/gpt");
  REQUIRE(line_start != std::string::npos);
  const auto line = out.table.substr(line_start, out.table.find('\n', line_start) - line_start);
  std::istringstream cells(line);
  std::vector<std::string> f{std::istream_iterator<std::string>(cells), {}};
  CHECK(f == std::vector<std::string>{"imagenet/gpt", "0.236", "0.277", "0.437", "0.195"});

  EvalReport two;
  two.ks = {10};
  two.methods = {"pretrained"};
  two.cases = {{"s", "gpt", "s"}, {"s", "procedural", "s"}};
  CaseReport a, b;
  a.recall_at[10] = 0.2;
  b.recall_at[10] = 0.4;
  two.by_method["pretrained"] = aggregate({a, b});
  const auto t = report_emit(two).table;
  const auto avg = t.find("[all] average");
  REQUIRE(avg != std::string::npos);
  CHECK(t.find("0.300", avg) != std::string::npos);
}

TEST_CASE("per-group averages appear when cases span groups") {
  EvalReport r;
  r.ks = {10};
  r.methods = {"pretrained"};
  r.cases = {{"a", "gpt", "object"}, {"b", "gpt", "style"}, {"c", "gpt", "style"}};
  std::vector<CaseReport> cs(3);
  cs[0].recall_at[10] = 0.9;
  cs[1].recall_at[10] = 0.1;
  cs[2].recall_at[10] = 0.3;
  r.by_method["pretrained"] = aggregate(cs);
  const auto t = report_emit(r).table;
  CHECK(t.find("[object] average") != std::string::npos);
  const auto style = t.find("[style] average");
  REQUIRE(style != std::string::npos);
  CHECK(t.substr(style, t.find('\n', style) - style).find("0.200") != std::string::npos);
}

TEST_CASE("pipeline with training disabled reports pretrained metrics only") {
  TempDir dir("harness_pipe_notrain");
  const auto paths = write_synthetic(synth_generate(tiny_spec()), dir / "data");
  auto c = config_for(paths, dir / "out");
  c.train = false;
  const auto res = run_pipeline(c);
  CHECK_FALSE(res.mapper);
  CHECK(res.report.methods == std::vector<std::string>{"pretrained"});
  for (const char* f : {"config.txt", "report.jsonl", "report.txt", "calibration.txt", "scores.jsonl"})
    CHECK(std::filesystem::exists(dir / "out" / f));
  CHECK_FALSE(std::filesystem::exists(dir / "out/mapper.amap"));

  // Written artifacts load back.
  const auto parsed = parse_report_records(read_text(dir / "out/report.jsonl"));
  CHECK(report_emit(parsed).table == read_text(dir / "out/report.txt"));
  CHECK(load_calibration(dir / "out/calibration.txt").tau == res.calibration->params.tau);
  const auto reloaded = run_config_from_map(load_key_values(dir / "out/config.txt"));
  CHECK(run_config_to_text(reloaded) == read_text(dir / "out/config.txt"));
}

TEST_CASE("pipeline runs are reproducible") {
  TempDir dir("harness_pipe_det");
  const auto paths = write_synthetic(synth_generate(tiny_spec()), dir / "data");
  const auto a = run_pipeline(config_for(paths, dir / "a"));
  const auto b = run_pipeline(config_for(paths, dir / "b"));
  REQUIRE(a.mapper);
  CHECK(a.report.methods == std::vector<std::string>{"pretrained", "trained"});
  for (const char* f : {"report.jsonl", "report.txt", "mapper.amap", "calibration.txt",
                        "scores.jsonl", "train/train_log.jsonl"})
    CHECK(read_bytes(dir / "a" / f) == read_bytes(dir / "b" / f));
  CHECK(load_mapper(dir / "a/mapper.amap").dim() == 16);
}

TEST_CASE("a failing stage names itself and keeps earlier artifacts") {
  TempDir dir("harness_pipe_fail");
  const auto paths = write_synthetic(synth_generate(tiny_spec()), dir / "data");
  auto c = config_for(paths, dir / "out");
  c.train = false;
  c.eval_split = Split::kTrain;
  c.cases = {{"nowhere", "gpt", "x"}};
  try {
    run_pipeline(c);
    FAIL("expected StageError");
  } catch (const StageError& e) {
    CHECK(e.stage() == "evaluate");
    CHECK(e.code() == ExitCode::kData);
  }
  CHECK(std::filesystem::exists(dir / "out/config.txt"));

  // A mapper of the wrong width fails in evaluation with a data error.
  auto wrong = config_for(paths, dir / "out2");
  wrong.train = false;
  save_mapper(Mapper::initial(MapperKind::kAffine, 8), dir / "m8.amap");
  wrong.mapper_path = dir / "m8.amap";
  CHECK_THROWS_AS(run_pipeline(wrong), StageError);
}
