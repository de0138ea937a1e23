#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bon/dataset.hpp"
#include "bon/embedding.hpp"
#include "bon/errors.hpp"
#include "bon/hash.hpp"
#include "bon/losses.hpp"
#include "bon/metrics.hpp"
#include "bon/samplers.hpp"

namespace bon {

struct TrainConfig {
  std::string name = "run";
  SamplerKind sampler = SamplerKind::bon_batch_hard;

  // Loss and batch layout.
  double alpha = kDefaultMargin;
  std::size_t m = 48;  // samples per mini-batch
  std::size_t k = 2;   // images per identity for group samplers; l = m / k

  // Online hash.
  unsigned s = 8;
  double beta = 0.99;
  double ae_lr = 1e-3;
  bool mu_before_codeword = true;
  bool hash_warm_start = true;

  // Baseline tables.
  std::uint64_t sh_rebuild_interval = 5000;
  std::size_t num_clusters = kStaticClusterDefault;
  std::size_t max_bin_draws = 16;
  bool single_id_bin_all_random = false;

  // Model and optimizer.
  Arch arch = Arch::one_hidden_tanh;
  std::size_t hidden_dim = 64;
  std::size_t embed_dim = 32;
  OptimizerKind optimizer = OptimizerKind::adam;
  double lr = 1e-3;
  double lr_decay = 0.9;
  std::uint64_t lr_decay_every = 50000;

  // Schedule and evaluation.
  std::uint64_t steps = 20000;
  std::uint64_t eval_interval = 500;
  std::size_t eval_samples = 2000;  // cap per evaluation subset
  bool full_eval = false;
  std::size_t probe_batches = 8;    // batches scored (not trained on) for the step-0 row
  std::size_t p_hat_pairs = 64;
  double stop_at_train_map = 0.0;   // > 0: stop after the first row reaching it

  std::uint64_t seed = 0;

  // Data: BONDATA file, or the synthetic generator when empty.
  std::string dataset;
  SynthConfig synth = benchmark_synth();
  double train_fraction = 0.8;
  std::uint64_t split_seed = 0;

  std::size_t l() const { return k ? m / k : 0; }
  std::size_t b() const { return m / 3; }

  void validate() const {
    if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
    if (is_triplet_sampler(sampler)) {
      if (m < 3 || m % 3 != 0) throw ConfigError("m must be a positive multiple of 3 for triplet samplers");
    } else {
      if (k < 2) throw ConfigError("k must be >= 2");
      if (m % k != 0 || m / k < 2) throw ConfigError("m must equal l*k with l >= 2");
    }
    if (s > kMaxCodeBits) throw ConfigError("s must be <= " + std::to_string(kMaxCodeBits));
    if (s >= embed_dim) throw ConfigError("s must be smaller than embed_dim");
    if (!(beta >= ThresholdState::kMinBeta && beta <= ThresholdState::kMaxBeta))
      throw ConfigError("beta must lie in [0.95, 0.999]");
    if (!(lr > 0.0) || !(ae_lr > 0.0)) throw ConfigError("learning rates must be positive");
    if (eval_interval == 0) throw ConfigError("eval_interval must be positive");
    if (sampler == SamplerKind::sh_oracle_batch_hard && sh_rebuild_interval == 0)
      throw ConfigError("sh_rebuild_interval must be positive");
    if (num_clusters < 1) throw ConfigError("num_clusters must be >= 1");
  }
};

struct RunLogRow {
  std::uint64_t step = 0;
  double train_map = 0.0;
  double val_map = 0.0;
  double nonzero_frac = 0.0;
  double mean_loss = 0.0;
  double p_hat = 0.0;
  double wall_ms = 0.0;
};

struct RunLog {
  std::vector<RunLogRow> rows;
  double hash_ms = 0.0;   // hash/table maintenance, included in total_ms
  double total_ms = 0.0;
  std::size_t skipped_samples = 0;  // degenerate embeddings dropped from steps
};

inline constexpr const char* kRunLogHeader = "step,train_map,val_map,nonzero_frac,mean_loss,p_hat,wall_ms";

inline void write_runlog_csv(const RunLog& log, std::ostream& os) {
  os << kRunLogHeader << '\n';
  for (const auto& r : log.rows)
    os << r.step << ',' << detail::format_double(r.train_map) << ',' << detail::format_double(r.val_map) << ','
       << detail::format_double(r.nonzero_frac) << ',' << detail::format_double(r.mean_loss) << ','
       << detail::format_double(r.p_hat) << ',' << detail::format_double(r.wall_ms) << '\n';
}

inline void write_runlog_csv(const RunLog& log, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ParseError("cannot open '" + path + "' for writing");
  write_runlog_csv(log, os);
}

// Every column except wall time.
inline bool same_trajectory(const RunLog& a, const RunLog& b) {
  if (a.rows.size() != b.rows.size()) return false;
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    const auto &x = a.rows[i], &y = b.rows[i];
    if (x.step != y.step || x.train_map != y.train_map || x.val_map != y.val_map || x.nonzero_frac != y.nonzero_frac ||
        x.mean_loss != y.mean_loss || x.p_hat != y.p_hat)
      return false;
  }
  return true;
}

// First logged step whose training mAP reaches `target`.
inline std::optional<std::uint64_t> steps_to_train_map(const RunLog& log, double target) {
  for (const auto& r : log.rows)
    if (r.train_map >= target) return r.step;
  return std::nullopt;
}

// Non-zero fraction at the first crossing of `target` training mAP, linearly
// interpolated between the two rows around the crossing.
inline std::optional<double> nonzero_frac_at_train_map(const RunLog& log, double target) {
  for (std::size_t i = 0; i < log.rows.size(); ++i) {
    const auto& r = log.rows[i];
    if (r.train_map < target) continue;
    if (i == 0) return r.nonzero_frac;
    const auto& p = log.rows[i - 1];
    const double span = r.train_map - p.train_map;
    const double t = span > 0.0 ? (target - p.train_map) / span : 1.0;
    return p.nonzero_frac + t * (r.nonzero_frac - p.nonzero_frac);
  }
  return std::nullopt;
}

struct TrainResult {
  RunLog log;
  EmbeddingModel model;
  std::optional<HashState> hash;
};

namespace detail {

inline Rng stream(std::uint64_t seed, std::uint64_t id) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(id)};
  return Rng(seq);
}

enum : std::uint64_t { kModelStream = 1, kSamplerStream, kHashStream, kProbeStream, kEvalStream, kClusterStream };

// Whole identities, in random order, until the next one would exceed `cap`.
inline Dataset eval_subset(const Dataset& ds, std::size_t cap, bool full, Rng& rng) {
  if (full || ds.size() <= cap) return ds;
  std::vector<Identity> ids = ds.ids();
  std::shuffle(ids.begin(), ids.end(), rng);
  std::vector<Identity> keep;
  std::size_t total = 0;
  for (Identity id : ids) {
    const std::size_t n = ds.members(id).size();
    if (total + n > cap) continue;
    keep.push_back(id);
    total += n;
  }
  return subset_by_ids(ds, keep);
}

class Clock {
 public:
  Clock() : start_(std::chrono::steady_clock::now()) {}
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

struct StepStats {
  double loss = 0.0;
  std::size_t units = 0;
  std::size_t nonzero = 0;
};

}  // namespace detail

// One training run. Construct, then call run().
class Trainer {
 public:
  Trainer(TrainConfig cfg, const Dataset& train, const Dataset& val)
      : cfg_(std::move(cfg)), train_(train), val_(val) {
    cfg_.validate();
    detail::require(train_.num_ids() >= 2, "train: training split has fewer than two identities");
    if (!is_triplet_sampler(cfg_.sampler))
      detail::require(train_.num_ids() >= cfg_.l(), "train: training split has fewer than l identities");
    Rng model_rng = detail::stream(cfg_.seed, detail::kModelStream);
    model_ = EmbeddingModel::create(cfg_.arch, train_.dim(), cfg_.hidden_dim, cfg_.embed_dim, model_rng);
    opt_ = Optimizer(cfg_.optimizer, LrSchedule{cfg_.lr, cfg_.lr_decay, cfg_.lr_decay_every});
    sampler_rng_ = detail::stream(cfg_.seed, detail::kSamplerStream);

    Rng eval_rng = detail::stream(cfg_.seed, detail::kEvalStream);
    train_eval_ = detail::eval_subset(train_, cfg_.eval_samples, cfg_.full_eval, eval_rng);
    val_eval_ = detail::eval_subset(val_, cfg_.eval_samples, cfg_.full_eval, eval_rng);
    for (std::size_t i = 0; i < cfg_.p_hat_pairs; ++i) {
      const auto a = static_cast<SampleIndex>(uniform_index(eval_rng, train_eval_.size()));
      const auto pos = positives_of(train_eval_, a);
      if (!pos.empty()) p_hat_pairs_.push_back({a, pos[uniform_index(eval_rng, pos.size())]});
    }
  }

  TrainResult run() {
    detail::Clock clock;
    RunLog log;

    if (uses_online_hash(cfg_.sampler)) {
      Rng hash_rng = detail::stream(cfg_.seed, detail::kHashStream);
      HashConfig hc;
      hc.bits = cfg_.s;
      hc.beta = cfg_.beta;
      hc.ae_lr = cfg_.ae_lr;
      hc.ae_optimizer = cfg_.optimizer;
      hc.mu_before_codeword = cfg_.mu_before_codeword;
      hash_.emplace(hc, train_.size(), cfg_.embed_dim, hash_rng);
      if (cfg_.hash_warm_start) warm_start(log);
    } else if (cfg_.sampler == SamplerKind::static_cluster_batch_hard) {
      detail::Clock t;
      Rng cluster_rng = detail::stream(cfg_.seed, detail::kClusterStream);
      frozen_ = static_cluster_table(train_, model_, cfg_.num_clusters, cluster_rng);
      log.hash_ms += t.ms();
    }

    // Step-0 row: score a few batches without training on them.
    {
      Rng probe_rng = detail::stream(cfg_.seed, detail::kProbeStream);
      if (cfg_.sampler == SamplerKind::sh_oracle_batch_hard) rebuild_sh(log);
      detail::StepStats probe;
      for (std::size_t i = 0; i < cfg_.probe_batches; ++i) {
        auto s = score_step(probe_rng, nullptr, log);
        probe.loss += s.loss, probe.units += s.units, probe.nonzero += s.nonzero;
      }
      append_row(log, 0, probe, clock);
    }

    detail::StepStats window;
    for (std::uint64_t step = 1; step <= cfg_.steps; ++step) {
      if (cfg_.sampler == SamplerKind::sh_oracle_batch_hard && (step - 1) % cfg_.sh_rebuild_interval == 0 && step > 1)
        rebuild_sh(log);
      GradientBuffer grads = zeros_like(model_.params);
      auto s = score_step(sampler_rng_, &grads, log);
      if (s.units > 0) opt_.step(model_.params, grads);
      window.loss += s.loss, window.units += s.units, window.nonzero += s.nonzero;

      if (step % cfg_.eval_interval == 0 || step == cfg_.steps) {
        append_row(log, step, window, clock);
        window = {};
        if (cfg_.stop_at_train_map > 0.0 && log.rows.back().train_map >= cfg_.stop_at_train_map) break;
      }
    }
    log.total_ms = clock.ms();
    return TrainResult{std::move(log), model_, hash_};
  }

 private:
  struct Forwarded {
    std::vector<SampleIndex> index;         // batch position -> sample
    std::vector<std::optional<ForwardCache>> cache;
  };

  // Forward every batch position; degenerate positions stay empty.
  Forwarded forward_batch(const std::vector<SampleIndex>& indices, RunLog& log) const {
    Forwarded f;
    f.index = indices;
    f.cache.reserve(indices.size());
    for (SampleIndex v : indices) {
      try {
        f.cache.emplace_back(forward(model_, train_.features(v)));
      } catch (const DegenerateEmbedding&) {
        f.cache.emplace_back(std::nullopt);
        ++log.skipped_samples;
      }
    }
    return f;
  }

  // Builds a batch with `rng`, evaluates the loss and, when `grads` is given,
  // accumulates parameter gradients and feeds the online hash.
  detail::StepStats score_step(Rng& rng, GradientBuffer* grads, RunLog& log) {
    detail::StepStats stats;
    std::vector<SampleIndex> indices;
    std::vector<Eigen::VectorXd> out_grads;
    Forwarded f;

    if (is_triplet_sampler(cfg_.sampler)) {
      const TripletBatch batch = cfg_.sampler == SamplerKind::vanilla
                                     ? vanilla_batch(train_, rng, cfg_.b())
                                     : bon_random_batch(train_, hash_->table(), rng, cfg_.b());
      for (const Triplet& t : batch.triplets) indices.insert(indices.end(), {t.a, t.p, t.n});
      f = forward_batch(indices, log);
      out_grads.assign(indices.size(), Eigen::VectorXd::Zero(Eigen::Index(cfg_.embed_dim)));
      for (std::size_t i = 0; i < batch.triplets.size(); ++i) {
        const auto &ca = f.cache[3 * i], &cp = f.cache[3 * i + 1], &cn = f.cache[3 * i + 2];
        if (!ca || !cp || !cn) continue;
        const LossReport r = triplet_loss(ca->output, cp->output, cn->output, cfg_.alpha);
        stats.loss += r.value;
        ++stats.units;
        if (r.nonzero) {
          ++stats.nonzero;
          out_grads[3 * i] += r.grad_anchor;
          out_grads[3 * i + 1] += r.grad_positive;
          out_grads[3 * i + 2] += r.grad_negative;
        }
      }
    } else {
      const GroupBatch batch = build_group_batch(rng);
      const std::vector<Identity> all_labels = batch.labels();
      indices = batch.flat();
      f = forward_batch(indices, log);
      out_grads.assign(indices.size(), Eigen::VectorXd::Zero(Eigen::Index(cfg_.embed_dim)));

      // Keep usable positions of identities that still have >= 2 of them.
      std::map<Identity, std::size_t> usable;
      for (std::size_t i = 0; i < indices.size(); ++i)
        if (f.cache[i]) ++usable[all_labels[i]];
      std::vector<std::size_t> pos;
      for (std::size_t i = 0; i < indices.size(); ++i)
        if (f.cache[i] && usable[all_labels[i]] >= 2) pos.push_back(i);
      std::vector<Identity> labels;
      for (std::size_t i : pos) labels.push_back(all_labels[i]);
      std::size_t groups = 0;
      for (const auto& [id, c] : usable) groups += c >= 2 ? 1 : 0;

      if (groups >= 2) {
        Eigen::MatrixXd emb(Eigen::Index(cfg_.embed_dim), Eigen::Index(pos.size()));
        for (std::size_t j = 0; j < pos.size(); ++j) emb.col(Eigen::Index(j)) = f.cache[pos[j]]->output;
        if (cfg_.sampler == SamplerKind::semi_hard) {
          semi_hard_step(emb, labels, pos, out_grads, stats);
        } else {
          const BatchHardReport r = batch_hard_loss(emb, labels, cfg_.alpha);
          stats.loss += r.value;
          stats.units += pos.size();
          stats.nonzero += r.nonzero_count();
          for (std::size_t j = 0; j < pos.size(); ++j) out_grads[pos[j]] += r.grads.col(Eigen::Index(j));
        }
      }
    }

    if (!grads) return stats;
    for (std::size_t i = 0; i < indices.size(); ++i)
      if (f.cache[i] && !out_grads[i].isZero(0.0)) accumulate_backward(model_, *f.cache[i], out_grads[i], *grads);

    if (hash_) {
      detail::Clock t;
      std::vector<SampleIndex> idx;
      std::vector<Eigen::VectorXd> emb;
      for (std::size_t i = 0; i < indices.size(); ++i)
        if (f.cache[i]) idx.push_back(indices[i]), emb.push_back(f.cache[i]->output);
      hash_->process_minibatch(train_, idx, emb);
      log.hash_ms += t.ms();
    }
    return stats;
  }

  void semi_hard_step(const Eigen::MatrixXd& emb, const std::vector<Identity>& labels,
                      const std::vector<std::size_t>& pos, std::vector<Eigen::VectorXd>& out_grads,
                      detail::StepStats& stats) const {
    const auto n = labels.size();
    std::vector<double> cand_d;
    std::vector<std::size_t> cand;
    for (std::size_t a = 0; a < n; ++a) {
      cand.clear();
      for (std::size_t j = 0; j < n; ++j)
        if (labels[j] != labels[a]) cand.push_back(j);
      for (std::size_t p = 0; p < n; ++p) {
        if (p == a || labels[p] != labels[a]) continue;
        const auto fa = emb.col(Eigen::Index(a));
        cand_d.clear();
        for (std::size_t j : cand) cand_d.push_back((fa - emb.col(Eigen::Index(j))).squaredNorm());
        const std::size_t nsel = cand[semi_hard_select((fa - emb.col(Eigen::Index(p))).squaredNorm(), cand_d)];
        const LossReport r = triplet_loss(fa, emb.col(Eigen::Index(p)), emb.col(Eigen::Index(nsel)), cfg_.alpha);
        stats.loss += r.value;
        ++stats.units;
        if (r.nonzero) {
          ++stats.nonzero;
          out_grads[pos[a]] += r.grad_anchor;
          out_grads[pos[p]] += r.grad_positive;
          out_grads[pos[nsel]] += r.grad_negative;
        }
      }
    }
  }

  GroupBatch build_group_batch(Rng& rng) const {
    const BinBatchOptions opt{cfg_.max_bin_draws, cfg_.single_id_bin_all_random};
    switch (cfg_.sampler) {
      case SamplerKind::semi_hard: return semi_hard_batch(train_, rng, cfg_.l(), cfg_.k);
      case SamplerKind::batch_hard: return batch_hard_batch(train_, rng, cfg_.l(), cfg_.k);
      case SamplerKind::bon_batch_hard: return bon_batch_hard_batch(train_, hash_->table(), rng, cfg_.l(), cfg_.k, opt);
      case SamplerKind::sh_oracle_batch_hard:
      case SamplerKind::static_cluster_batch_hard: return bin_group_batch(train_, *frozen_, rng, cfg_.l(), cfg_.k, opt);
      default: throw ContractViolation("build_group_batch: not a group sampler");
    }
  }

  // Assigns every training sample once with the initial model, in chunks of m.
  void warm_start(RunLog& log) {
    detail::Clock t;
    std::vector<SampleIndex> idx;
    std::vector<Eigen::VectorXd> emb;
    auto flush = [&] {
      if (!idx.empty()) hash_->process_minibatch(train_, idx, emb);
      idx.clear();
      emb.clear();
    };
    for (std::size_t v = 0; v < train_.size(); ++v) {
      try {
        emb.push_back(embed(model_, train_.features(SampleIndex(v))));
        idx.push_back(SampleIndex(v));
      } catch (const DegenerateEmbedding&) {
        ++log.skipped_samples;
      }
      if (idx.size() == cfg_.m) flush();
    }
    flush();
    log.hash_ms += t.ms();
  }

  void rebuild_sh(RunLog& log) {
    detail::Clock t;
    frozen_ = sh_oracle_rebuild(train_, model_, cfg_.s);
    log.hash_ms += t.ms();
  }

  void append_row(RunLog& log, std::uint64_t step, const detail::StepStats& window, const detail::Clock& clock) const {
    RunLogRow row;
    row.step = step;
    const Eigen::MatrixXd train_emb = embed_all(model_, train_eval_);
    const Eigen::MatrixXd val_emb = embed_all(model_, val_eval_);
    std::vector<Identity> train_ids, val_ids;
    for (const auto& s : train_eval_.samples()) train_ids.push_back(s.id);
    for (const auto& s : val_eval_.samples()) val_ids.push_back(s.id);
    row.train_map = mean_average_precision(train_emb, train_ids).value;
    row.val_map = mean_average_precision(val_emb, val_ids).value;
    if (window.units > 0) {
      row.nonzero_frac = nonzero_triplet_fraction(window.nonzero, window.units);
      row.mean_loss = window.loss / double(window.units);
    } else if (!log.rows.empty()) {
      row.nonzero_frac = log.rows.back().nonzero_frac;
      row.mean_loss = log.rows.back().mean_loss;
    }
    double p = 0.0;
    for (const auto& [a, pos] : p_hat_pairs_) p += p_hat_bruteforce(train_eval_, train_emb, a, pos, cfg_.alpha);
    row.p_hat = p_hat_pairs_.empty() ? 0.0 : p / double(p_hat_pairs_.size());
    row.wall_ms = clock.ms();
    log.rows.push_back(row);
  }

  TrainConfig cfg_;
  const Dataset& train_;
  const Dataset& val_;
  Dataset train_eval_, val_eval_;
  std::vector<std::pair<SampleIndex, SampleIndex>> p_hat_pairs_;
  EmbeddingModel model_;
  Optimizer opt_;
  Rng sampler_rng_;
  std::optional<HashState> hash_;
  std::optional<HashTable> frozen_;
};

inline TrainResult train(const TrainConfig& cfg, const Dataset& train_split, const Dataset& val_split) {
  return Trainer(cfg, train_split, val_split).run();
}

inline Dataset load_or_generate(const TrainConfig& cfg) {
  return cfg.dataset.empty() ? generate_synthetic(cfg.synth) : read_dataset(cfg.dataset);
}

inline TrainResult train(const TrainConfig& cfg) {
  cfg.validate();
  const Dataset full = load_or_generate(cfg);
  auto [tr, va] = split_by_identity(full, cfg.train_fraction, cfg.split_seed);
  return train(cfg, tr, va);
}

}  // namespace bon
