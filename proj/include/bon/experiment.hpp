#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bon/errors.hpp"
#include "bon/train.hpp"

namespace bon {

// JSON keys mirror the CLI flags with underscores (e.g. "eval_interval").
inline void apply_json(TrainConfig& cfg, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("experiment entry must be a JSON object");
  auto get = [&](const char* key, auto& field) {
    if (auto it = j.find(key); it != j.end()) {
      try {
        it->get_to(field);
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
      }
    }
  };
  static const std::vector<std::string> known = {
      "name", "sampler", "alpha", "m", "k", "s", "beta", "ae_lr", "mu_before_codeword", "hash_warm_start",
      "sh_rebuild_interval", "num_clusters", "max_bin_draws", "single_id_bin_all_random", "arch", "hidden_dim",
      "embed_dim", "optimizer", "lr", "lr_decay", "lr_decay_every", "steps", "eval_interval", "eval_samples",
      "full_eval", "probe_batches", "p_hat_pairs", "stop_at_train_map", "seed", "dataset", "train_fraction",
      "split_seed", "num_ids", "images_per_id", "input_dim", "cluster_spread", "noise_sigma", "signal_dims", "nuisance_sigma", "data_seed"};
  for (const auto& [key, value] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("unknown key '" + key + "'");

  get("name", cfg.name);
  if (auto it = j.find("sampler"); it != j.end()) cfg.sampler = parse_sampler(it->get<std::string>());
  get("alpha", cfg.alpha);
  get("m", cfg.m);
  get("k", cfg.k);
  get("s", cfg.s);
  get("beta", cfg.beta);
  get("ae_lr", cfg.ae_lr);
  get("mu_before_codeword", cfg.mu_before_codeword);
  get("hash_warm_start", cfg.hash_warm_start);
  get("sh_rebuild_interval", cfg.sh_rebuild_interval);
  get("num_clusters", cfg.num_clusters);
  get("max_bin_draws", cfg.max_bin_draws);
  get("single_id_bin_all_random", cfg.single_id_bin_all_random);
  if (auto it = j.find("arch"); it != j.end()) {
    const auto a = it->get<std::string>();
    if (a == "linear") cfg.arch = Arch::linear;
    else if (a == "one_hidden_tanh") cfg.arch = Arch::one_hidden_tanh;
    else throw ConfigError("unknown arch '" + a + "'");
  }
  get("hidden_dim", cfg.hidden_dim);
  get("embed_dim", cfg.embed_dim);
  if (auto it = j.find("optimizer"); it != j.end()) {
    const auto o = it->get<std::string>();
    if (o == "adam") cfg.optimizer = OptimizerKind::adam;
    else if (o == "sgd") cfg.optimizer = OptimizerKind::sgd;
    else throw ConfigError("unknown optimizer '" + o + "'");
  }
  get("lr", cfg.lr);
  get("lr_decay", cfg.lr_decay);
  get("lr_decay_every", cfg.lr_decay_every);
  get("steps", cfg.steps);
  get("eval_interval", cfg.eval_interval);
  get("eval_samples", cfg.eval_samples);
  get("full_eval", cfg.full_eval);
  get("probe_batches", cfg.probe_batches);
  get("p_hat_pairs", cfg.p_hat_pairs);
  get("stop_at_train_map", cfg.stop_at_train_map);
  get("seed", cfg.seed);
  get("dataset", cfg.dataset);
  get("train_fraction", cfg.train_fraction);
  get("split_seed", cfg.split_seed);
  get("num_ids", cfg.synth.num_ids);
  get("images_per_id", cfg.synth.images_per_id);
  get("input_dim", cfg.synth.input_dim);
  get("cluster_spread", cfg.synth.cluster_spread);
  get("noise_sigma", cfg.synth.noise_sigma);
  get("signal_dims", cfg.synth.signal_dims);
  get("nuisance_sigma", cfg.synth.nuisance_sigma);
  get("data_seed", cfg.synth.seed);
}

// Accepts either a JSON array of runs or {"defaults": {...}, "runs": [...]}.
inline std::vector<TrainConfig> parse_experiment_list(const nlohmann::json& spec) {
  nlohmann::json defaults = nlohmann::json::object();
  nlohmann::json runs;
  if (spec.is_array()) {
    runs = spec;
  } else if (spec.is_object()) {
    if (spec.contains("defaults")) defaults = spec["defaults"];
    if (!spec.contains("runs")) throw ConfigError("experiment spec has no 'runs' array");
    runs = spec["runs"];
  }
  if (!runs.is_array() || runs.empty()) throw ConfigError("experiment list is empty");
  std::vector<TrainConfig> out;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    TrainConfig cfg;
    cfg.name = "run" + std::to_string(i);
    apply_json(cfg, defaults);
    apply_json(cfg, runs[i]);
    out.push_back(cfg);
  }
  return out;
}

struct RunSummary {
  std::string name;
  std::string sampler;
  bool ok = false;
  std::string error;
  double peak_val_map = 0.0;
  std::uint64_t steps_to_peak = 0;
  std::optional<std::uint64_t> steps_to_train_map_09;
  double final_val_map = 0.0;
  double final_train_map = 0.0;
  double total_ms = 0.0;
  double hash_ms = 0.0;
};

inline RunSummary summarize(const TrainConfig& cfg, const RunLog& log) {
  RunSummary s;
  s.name = cfg.name;
  s.sampler = std::string(to_string(cfg.sampler));
  s.ok = true;
  for (const auto& r : log.rows)
    if (r.val_map > s.peak_val_map) s.peak_val_map = r.val_map, s.steps_to_peak = r.step;
  s.steps_to_train_map_09 = steps_to_train_map(log, 0.9);
  if (!log.rows.empty()) s.final_val_map = log.rows.back().val_map, s.final_train_map = log.rows.back().train_map;
  s.total_ms = log.total_ms;
  s.hash_ms = log.hash_ms;
  return s;
}

inline nlohmann::json to_json(const RunSummary& s) {
  nlohmann::json j{{"name", s.name}, {"sampler", s.sampler}, {"ok", s.ok}};
  if (!s.ok) {
    j["error"] = s.error;
    return j;
  }
  j["peak_val_map"] = s.peak_val_map;
  j["steps_to_peak"] = s.steps_to_peak;
  j["steps_to_train_map_0.9"] = s.steps_to_train_map_09 ? nlohmann::json(*s.steps_to_train_map_09) : nlohmann::json();
  j["final_val_map"] = s.final_val_map;
  j["final_train_map"] = s.final_train_map;
  j["total_ms"] = s.total_ms;
  j["hash_ms"] = s.hash_ms;
  j["hash_fraction"] = s.total_ms > 0.0 ? s.hash_ms / s.total_ms : 0.0;
  return j;
}

struct CompareReport {
  std::vector<RunSummary> runs;
  bool all_ok() const {
    for (const auto& r : runs)
      if (!r.ok) return false;
    return true;
  }
};

// Runs every config in order, writing <out_dir>/<name>.csv per run and
// <out_dir>/summary.json. A failing run is recorded and the rest continue.
inline CompareReport compare(const std::vector<TrainConfig>& configs, const std::filesystem::path& out_dir) {
  if (configs.empty()) throw ConfigError("compare: empty config list");
  std::filesystem::create_directories(out_dir);
  CompareReport report;
  for (const auto& cfg : configs) {
    try {
      const TrainResult res = train(cfg);
      write_runlog_csv(res.log, (out_dir / (cfg.name + ".csv")).string());
      report.runs.push_back(summarize(cfg, res.log));
    } catch (const std::exception& e) {
      RunSummary s;
      s.name = cfg.name;
      s.sampler = std::string(to_string(cfg.sampler));
      s.error = e.what();
      report.runs.push_back(s);
    }
  }
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : report.runs) j.push_back(to_json(r));
  std::ofstream os(out_dir / "summary.json");
  os << j.dump(2) << '\n';
  return report;
}

}  // namespace bon
