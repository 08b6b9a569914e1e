#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "attrib/harness.hpp"
#include "attrib/parallel.hpp"

namespace attrib {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': '" + v + "' is not a boolean");
}

std::size_t to_size(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (v.empty() || v[0] == '-') throw std::invalid_argument(v);
    const auto n = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return n;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not a non-negative integer");
  }
}

double to_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
  }
}

std::pair<std::string, std::string> split_pair(const std::string& key, const std::string& item) {
  const auto colon = item.find(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == item.size())
    throw ConfigError("config key '" + key + "': expected a:b entries, got '" + item + "'");
  return {item.substr(0, colon), item.substr(colon + 1)};
}

const std::vector<std::string> kTrainKeys = {
    "lr",         "beta1",          "beta2",     "eps",       "epochs",
    "batch_size", "upsilon",        "lambda_reg", "mapper_kind", "schedule",
    "val_every",  "val_distractors"};

Split split_from(const std::string& key, const std::string& v) {
  try {
    return parse_split(v);
  } catch (const FormatError& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::stringstream ss(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(ss, line)) {
    ++n;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError("config line " + std::to_string(n) + ": expected key=value");
    const std::string key = trim(t.substr(0, eq));
    if (!kv.emplace(key, trim(t.substr(eq + 1))).second)
      throw ConfigError("config key '" + key + "' given twice");
  }
  return kv;
}

std::map<std::string, std::string> load_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

const std::vector<std::string>& run_config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k = {"embeddings", "manifest",    "out",         "mapper",
                                  "calibration", "train",      "calibrate",   "cases",
                                  "groups",     "ks",          "eval_split",  "calib_split",
                                  "distractors", "score_top_n", "seed",       "threads"};
    k.insert(k.end(), kTrainKeys.begin(), kTrainKeys.end());
    for (const char* c : {"calib_lr_tau", "calib_lr_lam", "calib_batch", "calib_steps",
                          "calib_beta", "calib_keep_fraction", "calib_keep_cap"})
      k.emplace_back(c);
    return k;
  }();
  return keys;
}

RunConfig run_config_from_map(const std::map<std::string, std::string>& kv) {
  RunConfig c;
  std::map<std::string, std::string> train_kv;
  for (const auto& [k, v] : kv) {
    if (k == "embeddings") c.embeddings = v;
    else if (k == "manifest") c.manifest = v;
    else if (k == "out") c.out = v;
    else if (k == "mapper") c.mapper_path = v.empty() ? std::nullopt : std::optional<std::filesystem::path>(v);
    else if (k == "calibration") c.calibration_path = v.empty() ? std::nullopt : std::optional<std::filesystem::path>(v);
    else if (k == "train") c.train = to_bool(k, v);
    else if (k == "calibrate") c.calibrate = to_bool(k, v);
    else if (k == "cases") {
      c.cases.clear();
      for (const auto& item : split_list(v)) {
        auto [src, pt] = split_pair(k, item);
        c.cases.push_back({src, pt, ""});
      }
    } else if (k == "groups") {
      c.groups.clear();
      for (const auto& item : split_list(v)) {
        auto [src, group] = split_pair(k, item);
        c.groups[src] = group;
      }
    } else if (k == "ks") {
      c.ks.clear();
      for (const auto& item : split_list(v)) c.ks.push_back(to_size(k, item));
    } else if (k == "eval_split") c.eval_split = split_from(k, v);
    else if (k == "calib_split") c.calib_split = split_from(k, v);
    else if (k == "distractors") c.distractors = v.empty() || v == "all" ? std::nullopt : std::optional<std::size_t>(to_size(k, v));
    else if (k == "score_top_n") c.score_top_n = to_size(k, v);
    else if (k == "seed") c.seed = to_size(k, v);
    else if (k == "threads") c.threads = resolve_threads(static_cast<unsigned>(to_size(k, v)));
    else if (k == "calib_lr_tau") c.calibration.lr_tau = to_real(k, v);
    else if (k == "calib_lr_lam") c.calibration.lr_lam = to_real(k, v);
    else if (k == "calib_batch") c.calibration.batch = to_size(k, v);
    else if (k == "calib_steps") c.calibration.steps = to_size(k, v);
    else if (k == "calib_beta") c.calibration.softplus_beta = to_real(k, v);
    else if (k == "calib_keep_fraction") c.calibration.keep_fraction = to_real(k, v);
    else if (k == "calib_keep_cap") c.calibration.keep_cap = to_size(k, v);
    else if (std::find(kTrainKeys.begin(), kTrainKeys.end(), k) != kTrainKeys.end())
      train_kv[k] = v;
    else throw ConfigError("unknown config key '" + k + "'");
  }
  c.training = train_config_from_map(train_kv);
  c.training.seed = c.seed;
  c.training.threads = c.threads;
  c.calibration.seed = c.seed;
  for (auto& cs : c.cases) cs.group = c.groups.contains(cs.source) ? c.groups.at(cs.source) : cs.source;
  return c;
}

void RunConfig::validate() const {
  if (ks.empty()) throw ConfigError("ks must list at least one K");
  if (!std::is_sorted(ks.begin(), ks.end()) ||
      std::adjacent_find(ks.begin(), ks.end()) != ks.end())
    throw ConfigError("ks must be strictly ascending");
  if (ks.front() == 0) throw ConfigError("K values must be positive");
  if (embeddings.empty()) throw ConfigError("no embeddings file given");
  if (manifest.empty()) throw ConfigError("no manifest file given");
  if (out.empty()) throw ConfigError("no output directory given");
  if (!std::filesystem::exists(embeddings))
    throw ConfigError("embeddings file " + embeddings.string() + " does not exist");
  if (!std::filesystem::exists(manifest))
    throw ConfigError("manifest file " + manifest.string() + " does not exist");
  if (mapper_path && !std::filesystem::exists(*mapper_path))
    throw ConfigError("mapper checkpoint " + mapper_path->string() + " does not exist");
  if (calibration_path && !std::filesystem::exists(*calibration_path))
    throw ConfigError("calibration file " + calibration_path->string() + " does not exist");
  if (!(calibration.keep_fraction > 0.0 && calibration.keep_fraction <= 1.0))
    throw ConfigError("calib_keep_fraction must be in (0, 1]");
  if (!(calibration.softplus_beta > 0.0)) throw ConfigError("calib_beta must be positive");
  if (score_top_n == 0) throw ConfigError("score_top_n must be positive");
  training.validate();
}

std::string run_config_to_text(const RunConfig& c) {
  std::ostringstream out;
  out << "embeddings=" << c.embeddings.string() << '\n'
      << "manifest=" << c.manifest.string() << '\n'
      << "out=" << c.out.string() << '\n'
      << "mapper=" << (c.mapper_path ? c.mapper_path->string() : "") << '\n'
      << "calibration=" << (c.calibration_path ? c.calibration_path->string() : "") << '\n'
      << "train=" << (c.train ? "true" : "false") << '\n'
      << "calibrate=" << (c.calibrate ? "true" : "false") << '\n';
  out << "cases=";
  for (std::size_t i = 0; i < c.cases.size(); ++i)
    out << (i ? "," : "") << c.cases[i].source << ':' << c.cases[i].prompt_type;
  out << "\ngroups=";
  bool first = true;
  for (const auto& [src, g] : c.groups) {
    out << (first ? "" : ",") << src << ':' << g;
    first = false;
  }
  out << "\nks=";
  for (std::size_t i = 0; i < c.ks.size(); ++i) out << (i ? "," : "") << c.ks[i];
  out << "\neval_split=" << to_string(c.eval_split) << '\n'
      << "calib_split=" << to_string(c.calib_split) << '\n'
      << "distractors=" << (c.distractors ? std::to_string(*c.distractors) : "all") << '\n'
      << "score_top_n=" << c.score_top_n << '\n'
      << "seed=" << c.seed << '\n'
      << "threads=" << c.threads << '\n';
  for (const auto& [k, v] : train_config_to_map(c.training))
    if (k != "seed" && k != "threads") out << k << '=' << v << '\n';
  out << "calib_lr_tau=" << g17(c.calibration.lr_tau) << '\n'
      << "calib_lr_lam=" << g17(c.calibration.lr_lam) << '\n'
      << "calib_batch=" << c.calibration.batch << '\n'
      << "calib_steps=" << c.calibration.steps << '\n'
      << "calib_beta=" << g17(c.calibration.softplus_beta) << '\n'
      << "calib_keep_fraction=" << g17(c.calibration.keep_fraction) << '\n'
      << "calib_keep_cap=" << c.calibration.keep_cap << '\n';
  return out.str();
}

}  // namespace attrib
