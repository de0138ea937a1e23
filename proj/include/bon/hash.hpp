#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bon/binary_io.hpp"
#include "bon/dataset.hpp"
#include "bon/embedding.hpp"
#include "bon/errors.hpp"
#include "bon/losses.hpp"

namespace bon {

using Codeword = std::uint32_t;

inline constexpr unsigned kMaxCodeBits = 20;

// ---------------------------------------------------------------------------
// Linear auto-encoder: h = W1 f + b1, f_hat = W2 h + b2.
// Block layout: [W1 (s x e), b1 (s x 1), W2 (e x s), b2 (e x 1)].

struct LinearAE {
  std::size_t embed_dim = 0;
  std::size_t code_bits = 0;
  ParameterBlocks params;

  static LinearAE create(std::size_t embed_dim, std::size_t code_bits, Rng& rng) {
    if (embed_dim == 0) throw ConfigError("autoencoder: embed_dim must be positive");
    if (code_bits >= embed_dim) throw ConfigError("autoencoder: code bits must be smaller than embed_dim");
    LinearAE ae;
    ae.embed_dim = embed_dim;
    ae.code_bits = code_bits;
    const auto e = static_cast<Eigen::Index>(embed_dim), s = static_cast<Eigen::Index>(code_bits);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Eigen::MatrixXd w1(s, e), w2(e, s);
    for (Eigen::Index j = 0; j < e; ++j)
      for (Eigen::Index i = 0; i < s; ++i) w1(i, j) = gauss(rng) / std::sqrt(double(e));
    for (Eigen::Index j = 0; j < s; ++j)
      for (Eigen::Index i = 0; i < e; ++i) w2(i, j) = gauss(rng) / std::sqrt(double(s));
    ae.params = {w1, Eigen::MatrixXd::Zero(s, 1), w2, Eigen::MatrixXd::Zero(e, 1)};
    return ae;
  }

  const Eigen::MatrixXd& W1() const { return params[0]; }
  const Eigen::MatrixXd& W2() const { return params[2]; }
  auto b1() const { return params[1].col(0); }
  auto b2() const { return params[3].col(0); }
};

struct AeForward {
  Eigen::VectorXd h;
  Eigen::VectorXd reconstruction;
};

inline AeForward ae_forward(const LinearAE& ae, const Eigen::VectorXd& fx) {
  detail::require(static_cast<std::size_t>(fx.size()) == ae.embed_dim, "ae_forward: dimension mismatch");
  AeForward out;
  out.h = ae.W1() * fx + ae.b1();
  out.reconstruction = ae.W2() * out.h + ae.b2();
  return out;
}

// Gradient of the batch-mean reconstruction loss w.r.t. the AE parameters.
// The embeddings are constants here: nothing flows back into f.
inline double ae_gradient(const LinearAE& ae, std::span<const Eigen::VectorXd> batch, GradientBuffer& grads) {
  detail::require(!batch.empty(), "ae_train_step: empty batch");
  grads = zeros_like(ae.params);
  double total = 0.0;
  const double scale = 1.0 / double(batch.size());
  for (const Eigen::VectorXd& fx : batch) {
    const AeForward fw = ae_forward(ae, fx);
    const AeLoss l = ae_loss(fx, fw.reconstruction);
    total += l.value;
    const Eigen::VectorXd g = scale * l.grad_reconstruction;
    grads[2].noalias() += g * fw.h.transpose();
    grads[3].col(0) += g;
    const Eigen::VectorXd dh = ae.W2().transpose() * g;
    grads[0].noalias() += dh * fx.transpose();
    grads[1].col(0) += dh;
  }
  return total * scale;
}

// One optimizer step on the mean reconstruction loss; returns the loss
// measured before the step.
inline double ae_train_step(LinearAE& ae, Optimizer& opt, std::span<const Eigen::VectorXd> batch) {
  GradientBuffer grads;
  const double loss = ae_gradient(ae, batch, grads);
  if (!std::isfinite(loss)) throw NumericError("ae_train_step: non-finite reconstruction loss");
  opt.step(ae.params, grads);
  return loss;
}

// ---------------------------------------------------------------------------
// Running-mean thresholds: mu <- beta mu + (1 - beta) h. The first observed h
// initializes mu directly.

struct ThresholdState {
  Eigen::VectorXd mu;
  double beta = 0.99;
  bool initialized = false;

  static constexpr double kMinBeta = 0.95;
  static constexpr double kMaxBeta = 0.999;

  ThresholdState() = default;
  ThresholdState(std::size_t bits, double beta_) : mu(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(bits))), beta(beta_) {
    if (!(beta >= kMinBeta && beta <= kMaxBeta)) throw ConfigError("thresholds: beta must lie in [0.95, 0.999]");
  }

  void update(const Eigen::VectorXd& h) {
    detail::require(h.size() == mu.size(), "update_thresholds: dimension mismatch");
    if (!initialized) {
      mu = h;
      initialized = true;
      return;
    }
    mu = beta * mu + (1.0 - beta) * h;
  }
};

inline void update_thresholds(ThresholdState& ts, const Eigen::VectorXd& h) { ts.update(h); }

// Bit d is set iff h[d] > mu[d] (ties give 0); bit d has weight 2^d.
inline Codeword codeword(const Eigen::VectorXd& h, const Eigen::VectorXd& mu) {
  detail::require(h.size() == mu.size(), "codeword: dimension mismatch");
  detail::require(h.size() <= 32, "codeword: more than 32 bits");
  Codeword cw = 0;
  for (Eigen::Index d = 0; d < h.size(); ++d)
    if (h[d] - mu[d] > 0.0) cw |= Codeword{1} << d;
  return cw;
}

// ---------------------------------------------------------------------------
// Hash table L (2^s buckets of (v, ID(v)), each sorted by v) plus the
// current-entry array C.

class HashTable {
 public:
  static constexpr Codeword kUnassigned = 0xFFFFFFFFu;

  struct Entry {
    SampleIndex v = 0;
    Identity id = 0;
    friend bool operator==(const Entry&, const Entry&) = default;
  };

  HashTable() = default;
  HashTable(unsigned bits, std::size_t num_samples) : bits_(bits) {
    if (bits > kMaxCodeBits) throw ConfigError("hash table: at most " + std::to_string(kMaxCodeBits) + " bits");
    buckets_.resize(std::size_t{1} << bits);
    slot_in_nonempty_.assign(buckets_.size(), kUnassigned);
    current_.assign(num_samples, kUnassigned);
  }

  unsigned bits() const { return bits_; }
  std::size_t num_buckets() const { return buckets_.size(); }
  std::size_t num_samples() const { return current_.size(); }
  std::size_t assigned() const { return assigned_; }

  const std::vector<Entry>& bucket(Codeword cw) const {
    check_codeword(cw);
    return buckets_[cw];
  }
  Codeword entry_of(SampleIndex v) const {
    check_sample(v);
    return current_[v];
  }
  const std::vector<Codeword>& entries() const { return current_; }

  // Move v into bucket cw, removing it from its previous bucket.
  void update(SampleIndex v, Identity id, Codeword cw) {
    check_sample(v);
    check_codeword(cw);
    const Codeword prev = current_[v];
    if (prev == cw) return;
    if (prev != kUnassigned) {
      auto& b = buckets_[prev];
      auto it = std::lower_bound(b.begin(), b.end(), v, [](const Entry& e, SampleIndex x) { return e.v < x; });
      if (it == b.end() || it->v != v)
        throw InvariantError("hash table: sample " + std::to_string(v) + " missing from bucket " + std::to_string(prev));
      b.erase(it);
      if (b.empty()) drop_nonempty(prev);
    } else {
      ++assigned_;
    }
    auto& b = buckets_[cw];
    if (b.empty()) add_nonempty(cw);
    auto it = std::lower_bound(b.begin(), b.end(), v, [](const Entry& e, SampleIndex x) { return e.v < x; });
    b.insert(it, Entry{v, id});
    current_[v] = cw;
  }

  std::size_t nonempty_count() const { return nonempty_.size(); }

  Codeword random_nonempty_bucket(Rng& rng) const {
    detail::require(!nonempty_.empty(), "hash table: no non-empty bucket");
    return nonempty_[uniform_index(rng, nonempty_.size())];
  }

  // Distinct identities in one bucket, ascending.
  std::vector<Identity> ids_in_bucket(Codeword cw) const {
    std::vector<Identity> ids;
    for (const Entry& e : bucket(cw)) ids.push_back(e.id);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    return ids;
  }

  // Integer payload of (L, C) under a 4-byte encoding: (v, id) per stored
  // entry plus one entry of C per sample.
  std::size_t payload_bytes() const { return 4 * (2 * assigned_ + current_.size()); }

  // Throws InvariantError on any inconsistency between L and C.
  void check_invariants() const {
    std::size_t total = 0;
    std::vector<bool> seen(current_.size(), false);
    for (std::size_t cw = 0; cw < buckets_.size(); ++cw) {
      const auto& b = buckets_[cw];
      total += b.size();
      for (std::size_t i = 0; i < b.size(); ++i) {
        const SampleIndex v = b[i].v;
        if (v >= current_.size() || seen[v]) throw InvariantError("hash table: duplicate or invalid sample in L");
        if (i > 0 && b[i - 1].v >= v) throw InvariantError("hash table: bucket not sorted");
        seen[v] = true;
        if (current_[v] != cw) throw InvariantError("hash table: C disagrees with L for sample " + std::to_string(v));
      }
      const bool listed = slot_in_nonempty_[cw] != kUnassigned;
      if (listed != !b.empty()) throw InvariantError("hash table: non-empty index out of sync");
    }
    for (std::size_t v = 0; v < current_.size(); ++v)
      if ((current_[v] != kUnassigned) != seen[v]) throw InvariantError("hash table: assigned sample absent from L");
    if (total != assigned_) throw InvariantError("hash table: assigned count mismatch");
  }

  // Same buckets and same C. The order of the non-empty index is history
  // dependent and not compared.
  friend bool operator==(const HashTable& a, const HashTable& b) {
    return a.bits_ == b.bits_ && a.current_ == b.current_ && a.buckets_ == b.buckets_;
  }

 private:
  void check_sample(SampleIndex v) const {
    if (v >= current_.size())
      throw ContractViolation("hash table: sample " + std::to_string(v) + " out of range");
  }
  void check_codeword(Codeword cw) const {
    if (cw >= buckets_.size()) throw ContractViolation("hash table: codeword " + std::to_string(cw) + " out of range");
  }
  void add_nonempty(Codeword cw) {
    slot_in_nonempty_[cw] = static_cast<Codeword>(nonempty_.size());
    nonempty_.push_back(cw);
  }
  void drop_nonempty(Codeword cw) {
    const Codeword slot = slot_in_nonempty_[cw];
    const Codeword last = nonempty_.back();
    nonempty_[slot] = last;
    slot_in_nonempty_[last] = slot;
    nonempty_.pop_back();
    slot_in_nonempty_[cw] = kUnassigned;
  }

  unsigned bits_ = 0;
  std::vector<std::vector<Entry>> buckets_;
  std::vector<Codeword> current_;
  std::vector<Codeword> nonempty_;
  std::vector<Codeword> slot_in_nonempty_;
  std::size_t assigned_ = 0;
};

inline void table_update(HashTable& ht, SampleIndex v, Identity id, Codeword cw) { ht.update(v, id, cw); }

// Samples of bucket cw whose identity differs from exclude_id, ascending.
inline std::vector<SampleIndex> negatives_in_bin(const HashTable& ht, Codeword cw, Identity exclude_id) {
  std::vector<SampleIndex> out;
  for (const auto& e : ht.bucket(cw))
    if (e.id != exclude_id) out.push_back(e.v);
  return out;
}

// ---------------------------------------------------------------------------
// Online hashing state: AE + thresholds + table, updated once per mini-batch.

struct HashConfig {
  unsigned bits = 8;
  double beta = 0.99;
  double ae_lr = 1e-3;
  OptimizerKind ae_optimizer = OptimizerKind::adam;
  // Update mu with h before extracting that sample's codeword.
  bool mu_before_codeword = true;
};

class HashState {
 public:
  HashState() = default;
  HashState(const HashConfig& cfg, std::size_t num_samples, std::size_t embed_dim, Rng& rng)
      : cfg_(cfg),
        ae_(LinearAE::create(embed_dim, cfg.bits, rng)),
        ae_opt_(cfg.ae_optimizer, LrSchedule{cfg.ae_lr, 1.0, 0}),
        thresholds_(cfg.bits, cfg.beta),
        table_(cfg.bits, num_samples) {}

  // For each sample in order: AE forward, threshold update, codeword, table
  // update. Then one AE step on the whole batch.
  void process_minibatch(const Dataset& ds, std::span<const SampleIndex> indices,
                         std::span<const Eigen::VectorXd> embeddings) {
    detail::require(indices.size() == embeddings.size(), "process_minibatch: index/embedding count mismatch");
    if (indices.empty()) return;
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const AeForward fw = ae_forward(ae_, embeddings[i]);
      if (cfg_.mu_before_codeword) thresholds_.update(fw.h);
      const Codeword cw = codeword(fw.h, thresholds_.mu);
      if (!cfg_.mu_before_codeword) thresholds_.update(fw.h);
      table_.update(indices[i], ds.id_of(indices[i]), cw);
    }
    last_ae_loss_ = ae_train_step(ae_, ae_opt_, embeddings);
  }

  Codeword codeword_of(const Eigen::VectorXd& embedding) const {
    return codeword(ae_forward(ae_, embedding).h, thresholds_.mu);
  }

  const HashConfig& config() const { return cfg_; }
  const LinearAE& autoencoder() const { return ae_; }
  LinearAE& autoencoder() { return ae_; }
  const ThresholdState& thresholds() const { return thresholds_; }
  ThresholdState& thresholds() { return thresholds_; }
  const HashTable& table() const { return table_; }
  HashTable& table() { return table_; }
  double last_ae_loss() const { return last_ae_loss_; }

 private:
  HashConfig cfg_;
  LinearAE ae_;
  Optimizer ae_opt_;
  ThresholdState thresholds_;
  HashTable table_;
  double last_ae_loss_ = 0.0;
};

// ---------------------------------------------------------------------------
// BONHSH1 checkpoint: magic, u32 s, u64 N, u64 e, f64 beta, u8 mu_initialized,
// mu (s x f64), AE blocks in layout order (f64, column-major), C (N x u32,
// 0xFFFFFFFF = unassigned). L is rebuilt from C and the dataset identities.
// Optimizer moments are not stored; a resumed AE restarts its moments.

inline void save_hash_state(const HashState& st, std::ostream& os) {
  const auto& ae = st.autoencoder();
  detail::put_magic(os, "BONHSH1");
  detail::put_le<std::uint32_t>(os, st.table().bits());
  detail::put_le<std::uint64_t>(os, st.table().num_samples());
  detail::put_le<std::uint64_t>(os, ae.embed_dim);
  detail::put_le<double>(os, st.thresholds().beta);
  detail::put_le<std::uint8_t>(os, st.thresholds().initialized ? 1 : 0);
  for (Eigen::Index d = 0; d < st.thresholds().mu.size(); ++d) detail::put_le<double>(os, st.thresholds().mu[d]);
  for (const auto& block : ae.params)
    for (Eigen::Index i = 0; i < block.size(); ++i) detail::put_le<double>(os, block.data()[i]);
  for (Codeword c : st.table().entries()) detail::put_le<std::uint32_t>(os, c);
}

inline HashState load_hash_state(std::istream& is, const Dataset& ds, HashConfig cfg = {}) {
  detail::expect_magic(is, "BONHSH1");
  const auto bits = detail::get_le<std::uint32_t>(is, "s");
  const auto n = detail::get_le<std::uint64_t>(is, "N");
  const auto e = detail::get_le<std::uint64_t>(is, "e");
  const auto beta = detail::get_le<double>(is, "beta");
  const auto init = detail::get_le<std::uint8_t>(is, "mu flag");
  if (bits > kMaxCodeBits || e == 0 || e > (1u << 20) || bits >= e) throw ParseError("offset 7: implausible s/e");
  if (n != ds.size()) throw ParseError("hash checkpoint has N=" + std::to_string(n) + " but dataset has " + std::to_string(ds.size()));
  cfg.bits = bits;
  cfg.beta = beta;
  Rng unused(0);
  HashState st(cfg, n, e, unused);
  st.thresholds().initialized = init != 0;
  for (Eigen::Index d = 0; d < st.thresholds().mu.size(); ++d) st.thresholds().mu[d] = detail::get_le<double>(is, "mu");
  for (auto& block : st.autoencoder().params)
    for (Eigen::Index i = 0; i < block.size(); ++i) block.data()[i] = detail::get_le<double>(is, "AE parameter");
  if (!st.thresholds().mu.allFinite() || !all_finite(st.autoencoder().params))
    throw ParseError("hash checkpoint contains non-finite values");
  for (std::uint64_t v = 0; v < n; ++v) {
    const auto c = detail::get_le<std::uint32_t>(is, "C");
    if (c == HashTable::kUnassigned) continue;
    if (c >= (std::uint64_t{1} << bits)) throw ParseError("C[" + std::to_string(v) + "] exceeds 2^s");
    st.table().update(static_cast<SampleIndex>(v), ds.id_of(static_cast<SampleIndex>(v)), c);
  }
  return st;
}

inline void save_hash_state(const HashState& st, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ParseError("cannot open '" + path + "' for writing");
  save_hash_state(st, os);
}

inline HashState load_hash_state(const std::string& path, const Dataset& ds, HashConfig cfg = {}) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open '" + path + "'");
  return load_hash_state(is, ds, cfg);
}

}  // namespace bon
