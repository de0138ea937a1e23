#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bon/binary_io.hpp"
#include "bon/dataset.hpp"
#include "bon/errors.hpp"

namespace bon {

// Parameters are kept as a list of dense blocks (vectors stored as n x 1).
// Models, gradient buffers and optimizer moments all share this layout.
using ParameterBlocks = std::vector<Eigen::MatrixXd>;
using GradientBuffer = ParameterBlocks;

inline GradientBuffer zeros_like(const ParameterBlocks& params) {
  GradientBuffer g;
  g.reserve(params.size());
  for (const auto& p : params) g.push_back(Eigen::MatrixXd::Zero(p.rows(), p.cols()));
  return g;
}

inline void set_zero(GradientBuffer& g) {
  for (auto& b : g) b.setZero();
}

inline bool all_finite(const ParameterBlocks& blocks) {
  for (const auto& b : blocks)
    if (!b.allFinite()) return false;
  return true;
}

inline std::size_t parameter_count(const ParameterBlocks& blocks) {
  std::size_t n = 0;
  for (const auto& b : blocks) n += static_cast<std::size_t>(b.size());
  return n;
}

enum class Arch : std::uint8_t { linear = 0, one_hidden_tanh = 1 };

// f(x) = z / ||z||, with z = W x + b (linear) or z = W2 tanh(W1 x + b1) + b2.
//
// Block layout:
//   linear:          [W (e x D), b (e x 1)]
//   one_hidden_tanh: [W1 (H x D), b1 (H x 1), W2 (e x H), b2 (e x 1)]
struct EmbeddingModel {
  Arch arch = Arch::one_hidden_tanh;
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t embed_dim = 0;
  ParameterBlocks params;

  // Weights ~ N(0, 1/fan_in) (std 1/sqrt(fan_in)), biases zero.
  static EmbeddingModel create(Arch arch, std::size_t input_dim, std::size_t hidden_dim, std::size_t embed_dim,
                               Rng& rng) {
    if (input_dim == 0 || embed_dim == 0) throw ConfigError("embedding: dimensions must be positive");
    if (arch == Arch::one_hidden_tanh && hidden_dim == 0) throw ConfigError("embedding: hidden_dim must be positive");
    EmbeddingModel m;
    m.arch = arch;
    m.input_dim = input_dim;
    m.hidden_dim = arch == Arch::linear ? 0 : hidden_dim;
    m.embed_dim = embed_dim;
    std::normal_distribution<double> gauss(0.0, 1.0);
    auto gaussian = [&](std::size_t rows, std::size_t cols) {
      Eigen::MatrixXd w(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
      const double scale = 1.0 / std::sqrt(double(cols));
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = scale * gauss(rng);
      return w;
    };
    auto zero_col = [](std::size_t rows) { return Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows), 1); };
    if (arch == Arch::linear) {
      m.params = {gaussian(embed_dim, input_dim), zero_col(embed_dim)};
    } else {
      m.params = {gaussian(hidden_dim, input_dim), zero_col(hidden_dim), gaussian(embed_dim, hidden_dim),
                  zero_col(embed_dim)};
    }
    return m;
  }

  void check_shapes() const {
    const auto D = static_cast<Eigen::Index>(input_dim), H = static_cast<Eigen::Index>(hidden_dim),
               E = static_cast<Eigen::Index>(embed_dim);
    auto is = [](const Eigen::MatrixXd& m, Eigen::Index r, Eigen::Index c) { return m.rows() == r && m.cols() == c; };
    bool ok = arch == Arch::linear
                  ? params.size() == 2 && is(params[0], E, D) && is(params[1], E, 1)
                  : params.size() == 4 && is(params[0], H, D) && is(params[1], H, 1) && is(params[2], E, H) &&
                        is(params[3], E, 1);
    if (!ok) throw ContractViolation("embedding: parameter shapes do not match declared dimensions");
  }

  friend bool operator==(const EmbeddingModel& a, const EmbeddingModel& b) {
    if (a.arch != b.arch || a.input_dim != b.input_dim || a.hidden_dim != b.hidden_dim ||
        a.embed_dim != b.embed_dim || a.params.size() != b.params.size())
      return false;
    for (std::size_t i = 0; i < a.params.size(); ++i)
      if (a.params[i].rows() != b.params[i].rows() || a.params[i].cols() != b.params[i].cols() ||
          a.params[i] != b.params[i])
        return false;
    return true;
  }
};

struct ForwardCache {
  Eigen::VectorXd input;
  Eigen::VectorXd hidden;  // tanh activations; empty for the linear arch
  Eigen::VectorXd output;  // unit-norm embedding
  double z_norm = 0.0;
};

inline constexpr double kDegenerateNorm = 1e-12;

inline ForwardCache forward(const EmbeddingModel& model, const Eigen::VectorXd& x) {
  if (static_cast<std::size_t>(x.size()) != model.input_dim)
    throw ContractViolation("embedding forward: input has " + std::to_string(x.size()) + " entries, expected " +
                            std::to_string(model.input_dim));
  ForwardCache c;
  c.input = x;
  Eigen::VectorXd z;
  if (model.arch == Arch::linear) {
    z = model.params[0] * x + model.params[1].col(0);
  } else {
    c.hidden = (model.params[0] * x + model.params[1].col(0)).array().tanh().matrix();
    z = model.params[2] * c.hidden + model.params[3].col(0);
  }
  c.z_norm = z.norm();
  if (!(c.z_norm >= kDegenerateNorm)) throw DegenerateEmbedding("embedding forward: ||z|| below 1e-12");
  c.output = z / c.z_norm;
  return c;
}

inline Eigen::VectorXd embed(const EmbeddingModel& model, const Eigen::VectorXd& x) { return forward(model, x).output; }

// Adds d(output . grad_out)/d(params) into `acc`.
inline void accumulate_backward(const EmbeddingModel& model, const ForwardCache& cache,
                                const Eigen::VectorXd& grad_out, GradientBuffer& acc) {
  if (static_cast<std::size_t>(grad_out.size()) != model.embed_dim || acc.size() != model.params.size())
    throw ContractViolation("embedding backward: shape mismatch");
  const Eigen::VectorXd& y = cache.output;
  // Jacobian of z/||z||: (I - y y^T) / ||z||
  const Eigen::VectorXd dz = (grad_out - y * y.dot(grad_out)) / cache.z_norm;
  if (model.arch == Arch::linear) {
    acc[0].noalias() += dz * cache.input.transpose();
    acc[1].col(0) += dz;
  } else {
    acc[2].noalias() += dz * cache.hidden.transpose();
    acc[3].col(0) += dz;
    const Eigen::VectorXd da =
        ((model.params[2].transpose() * dz).array() * (1.0 - cache.hidden.array().square())).matrix();
    acc[0].noalias() += da * cache.input.transpose();
    acc[1].col(0) += da;
  }
}

inline GradientBuffer backward(const EmbeddingModel& model, const ForwardCache& cache,
                               const Eigen::VectorXd& grad_out) {
  GradientBuffer g = zeros_like(model.params);
  accumulate_backward(model, cache, grad_out, g);
  return g;
}

// ---------------------------------------------------------------------------
// Optimization

// Step-wise decay: lr(t) = base * factor^floor(t / every).
struct LrSchedule {
  double base_lr = 1e-4;
  double decay_factor = 0.9;
  std::uint64_t decay_every = 50000;

  double multiplier(std::uint64_t step) const {
    if (decay_every == 0) return 1.0;
    return std::pow(decay_factor, double(step / decay_every));
  }
  double lr(std::uint64_t step) const { return base_lr * multiplier(step); }
};

enum class OptimizerKind { sgd, adam };

inline void check_finite_gradient(const GradientBuffer& grads) {
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!grads[i].allFinite()) throw NumericError("optimizer: non-finite gradient in parameter block " + std::to_string(i));
}

// Plain gradient descent, w -= lr * g.
inline void sgd_step(ParameterBlocks& params, const GradientBuffer& grads, double lr) {
  if (!(lr > 0.0)) throw ContractViolation("sgd_step: lr must be positive");
  if (grads.size() != params.size()) throw ContractViolation("sgd_step: gradient layout mismatch");
  check_finite_gradient(grads);
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
}

inline void sgd_step(ParameterBlocks& params, const GradientBuffer& grads, const LrSchedule& schedule,
                     std::uint64_t step) {
  sgd_step(params, grads, schedule.lr(step));
}

// SGD or Adam with a step-decay schedule. Owns the step counter and moments.
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(OptimizerKind kind, LrSchedule schedule, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : kind_(kind), schedule_(schedule), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (!(schedule.base_lr > 0.0)) throw ConfigError("optimizer: lr must be positive");
  }

  void step(ParameterBlocks& params, const GradientBuffer& grads) {
    if (grads.size() != params.size()) throw ContractViolation("optimizer: gradient layout mismatch");
    check_finite_gradient(grads);
    const double lr = schedule_.lr(t_);
    ++t_;
    if (kind_ == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
      return;
    }
    if (m_.empty()) {
      m_ = zeros_like(params);
      v_ = zeros_like(params);
    }
    const double c1 = 1.0 - std::pow(beta1_, double(t_));
    const double c2 = 1.0 - std::pow(beta2_, double(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i].cwiseAbs2();
      params[i].array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
    }
  }

  std::uint64_t steps_taken() const { return t_; }
  const LrSchedule& schedule() const { return schedule_; }
  OptimizerKind kind() const { return kind_; }

 private:
  OptimizerKind kind_ = OptimizerKind::adam;
  LrSchedule schedule_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::uint64_t t_ = 0;
  GradientBuffer m_, v_;
};

// ---------------------------------------------------------------------------
// BONMDL1 checkpoint: magic, u8 arch, u64 D, u64 H, u64 e, then every
// parameter block in layout order as little-endian f64 (column-major).

inline void save_model(const EmbeddingModel& model, std::ostream& os) {
  model.check_shapes();
  detail::put_magic(os, "BONMDL1");
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(model.arch));
  detail::put_le<std::uint64_t>(os, model.input_dim);
  detail::put_le<std::uint64_t>(os, model.hidden_dim);
  detail::put_le<std::uint64_t>(os, model.embed_dim);
  for (const auto& block : model.params)
    for (Eigen::Index i = 0; i < block.size(); ++i) detail::put_le<double>(os, block.data()[i]);
}

inline EmbeddingModel load_model(std::istream& is) {
  detail::expect_magic(is, "BONMDL1");
  EmbeddingModel m;
  const auto tag = detail::get_le<std::uint8_t>(is, "arch");
  if (tag > 1) throw ParseError("offset 7: unknown arch tag " + std::to_string(tag));
  m.arch = static_cast<Arch>(tag);
  m.input_dim = detail::get_le<std::uint64_t>(is, "D");
  m.hidden_dim = detail::get_le<std::uint64_t>(is, "H");
  m.embed_dim = detail::get_le<std::uint64_t>(is, "e");
  constexpr std::uint64_t kMaxDim = 1u << 20;
  if (m.input_dim == 0 || m.embed_dim == 0 || m.input_dim > kMaxDim || m.embed_dim > kMaxDim ||
      m.hidden_dim > kMaxDim || (m.arch == Arch::one_hidden_tanh && m.hidden_dim == 0))
    throw ParseError("offset 8: implausible model dimensions");
  auto block = [&](std::size_t r, std::size_t c) {
    Eigen::MatrixXd b(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = detail::get_le<double>(is, "parameter");
    return b;
  };
  if (m.arch == Arch::linear) {
    m.params.push_back(block(m.embed_dim, m.input_dim));
    m.params.push_back(block(m.embed_dim, 1));
  } else {
    m.params.push_back(block(m.hidden_dim, m.input_dim));
    m.params.push_back(block(m.hidden_dim, 1));
    m.params.push_back(block(m.embed_dim, m.hidden_dim));
    m.params.push_back(block(m.embed_dim, 1));
  }
  if (!all_finite(m.params)) throw ParseError("model checkpoint contains non-finite parameters");
  return m;
}

inline void save_model(const EmbeddingModel& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ParseError("cannot open '" + path + "' for writing");
  save_model(model, os);
}

inline EmbeddingModel load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open '" + path + "'");
  return load_model(is);
}

}  // namespace bon
