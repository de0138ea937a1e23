// bon: command-line front end.
//
//   bon gen-data --out data.csv [--num-ids 500 --images-per-id 10 ...]
//   bon train    --sampler bon_batch_hard [--dataset data.csv] --out runs/x
//   bon compare  --spec experiments.json --out runs/cmp
//   bon eval     --model runs/x/model.bin --dataset data.csv
//
// Exit codes: 0 ok, 1 usage, 2 data error, 3 runtime failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "bon/dataset.hpp"
#include "bon/embedding.hpp"
#include "bon/experiment.hpp"
#include "bon/hash.hpp"
#include "bon/metrics.hpp"
#include "bon/samplers.hpp"
#include "bon/train.hpp"

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kData = 2, kRuntime = 3 };

void add_synth_flags(CLI::App* cmd, bon::SynthConfig& s) {
  cmd->add_option("--num-ids", s.num_ids, "identities G")->capture_default_str();
  cmd->add_option("--images-per-id", s.images_per_id, "images per identity")->capture_default_str();
  cmd->add_option("--input-dim", s.input_dim, "input feature dimension D")->capture_default_str();
  cmd->add_option("--cluster-spread", s.cluster_spread, "std of identity centers")->capture_default_str();
  cmd->add_option("--noise-sigma", s.noise_sigma, "within-identity noise std")->capture_default_str();
  cmd->add_option("--signal-dims", s.signal_dims, "coordinates carrying identity (0 = all)")->capture_default_str();
  cmd->add_option("--nuisance-sigma", s.nuisance_sigma, "noise std on the other coordinates")->capture_default_str();
  cmd->add_option("--data-seed", s.seed, "generator seed")->capture_default_str();
}

nlohmann::json echo(const bon::TrainConfig& c) {
  return {{"name", c.name},   {"sampler", std::string(bon::to_string(c.sampler))},
          {"alpha", c.alpha}, {"m", c.m},
          {"k", c.k},         {"s", c.s},
          {"beta", c.beta},   {"steps", c.steps},
          {"eval_interval", c.eval_interval}, {"seed", c.seed},
          {"lr", c.lr},       {"dataset", c.dataset}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bag-of-negatives sampling for triplet training"};
  app.require_subcommand(1);

  std::string out;
  bon::SynthConfig synth = bon::benchmark_synth();
  auto* gen = app.add_subcommand("gen-data", "write a synthetic clustered-identity dataset");
  add_synth_flags(gen, synth);
  gen->add_option("--out", out, "output BONDATA file")->required();

  bon::TrainConfig cfg;
  std::string sampler_name = "bon_batch_hard";
  std::string arch_name = "one_hidden_tanh";
  auto* tr = app.add_subcommand("train", "train one model and write its run log");
  tr->add_option("--sampler", sampler_name, "vanilla|bon_random|semi_hard|batch_hard|bon_batch_hard|"
                                            "sh_oracle_batch_hard|static_cluster_batch_hard")
      ->capture_default_str();
  tr->add_option("--alpha", cfg.alpha, "triplet margin")->capture_default_str();
  tr->add_option("--m", cfg.m, "mini-batch size")->capture_default_str();
  tr->add_option("--k", cfg.k, "images per identity (group samplers)")->capture_default_str();
  tr->add_option("--s", cfg.s, "hash bits")->capture_default_str();
  tr->add_option("--beta", cfg.beta, "running-mean factor")->capture_default_str();
  tr->add_option("--steps", cfg.steps, "training steps")->capture_default_str();
  tr->add_option("--eval-interval", cfg.eval_interval, "steps between log rows")->capture_default_str();
  tr->add_option("--seed", cfg.seed, "run seed")->capture_default_str();
  tr->add_option("--dataset", cfg.dataset, "BONDATA file (default: synthetic benchmark)");
  tr->add_option("--lr", cfg.lr, "embedding learning rate")->capture_default_str();
  tr->add_option("--ae-lr", cfg.ae_lr, "auto-encoder learning rate")->capture_default_str();
  tr->add_option("--sh-rebuild-interval", cfg.sh_rebuild_interval, "steps between offline rebuilds")
      ->capture_default_str();
  tr->add_option("--num-clusters", cfg.num_clusters, "static-cluster baseline clusters")->capture_default_str();
  tr->add_option("--arch", arch_name, "linear|one_hidden_tanh")->capture_default_str();
  tr->add_option("--stop-at-train-map", cfg.stop_at_train_map, "stop once train mAP reaches this (0 = off)");
  tr->add_flag("--full-eval", cfg.full_eval, "evaluate mAP on full splits");
  tr->add_option("--name", cfg.name, "run name")->capture_default_str();
  tr->add_option("--out", out, "output directory")->required();
  add_synth_flags(tr, cfg.synth);

  std::string spec_path;
  auto* cmp = app.add_subcommand("compare", "run a JSON list of experiments");
  cmp->add_option("--spec", spec_path, "experiment list (JSON)")->required();
  cmp->add_option("--out", out, "output directory")->required();

  std::string model_path, data_path;
  auto* ev = app.add_subcommand("eval", "mAP of a model checkpoint on a dataset");
  ev->add_option("--model", model_path, "BONMDL1 checkpoint")->required();
  ev->add_option("--dataset", data_path, "BONDATA file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) {
      bon::write_dataset(bon::generate_synthetic(synth), out);
      return kOk;
    }
    if (*tr) {
      cfg.sampler = bon::parse_sampler(sampler_name);
      if (arch_name == "linear") cfg.arch = bon::Arch::linear;
      else if (arch_name != "one_hidden_tanh") throw bon::ConfigError("unknown arch '" + arch_name + "'");
      cfg.validate();
      std::filesystem::create_directories(out);
      try {
        const bon::TrainResult res = bon::train(cfg);
        const std::filesystem::path dir(out);
        bon::write_runlog_csv(res.log, (dir / "runlog.csv").string());
        bon::save_model(res.model, (dir / "model.bin").string());
        if (res.hash) bon::save_hash_state(*res.hash, (dir / "hash.bin").string());
        std::ofstream(dir / "summary.json") << bon::to_json(bon::summarize(cfg, res.log)).dump(2) << '\n';
      } catch (const bon::ParseError&) {
        throw;
      } catch (const bon::ConfigError&) {
        throw;
      } catch (const std::exception& e) {
        std::cerr << "train failed: " << e.what() << "\nconfig: " << echo(cfg).dump() << '\n';
        return kRuntime;
      }
      return kOk;
    }
    if (*cmp) {
      std::ifstream is(spec_path);
      if (!is) throw bon::ParseError("cannot open '" + spec_path + "'");
      nlohmann::json spec;
      try {
        spec = nlohmann::json::parse(is);
      } catch (const nlohmann::json::exception& e) {
        throw bon::ParseError(spec_path + ": " + e.what());
      }
      const auto report = bon::compare(bon::parse_experiment_list(spec), out);
      for (const auto& r : report.runs)
        if (!r.ok) std::cerr << "run '" << r.name << "' failed: " << r.error << '\n';
      return report.all_ok() ? kOk : kRuntime;
    }
    if (*ev) {
      const auto model = bon::load_model(model_path);
      const auto ds = bon::read_dataset(data_path);
      if (ds.dim() != model.input_dim) throw bon::ParseError("dataset D does not match the model input dimension");
      std::vector<bon::Identity> ids;
      for (const auto& s : ds.samples()) ids.push_back(s.id);
      const auto res = bon::mean_average_precision(bon::embed_all(model, ds), ids);
      std::cout << nlohmann::json{{"map", res.value},
                                  {"queries", res.queries_used},
                                  {"queries_without_positive", res.queries_without_positive}}
                       .dump()
                << '\n';
      return kOk;
    }
  } catch (const bon::ConfigError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const bon::ParseError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}
