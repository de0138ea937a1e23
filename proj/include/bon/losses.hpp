#pragma once

#include <algorithm>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bon/dataset.hpp"
#include "bon/errors.hpp"

namespace bon {

struct Triplet {
  SampleIndex a = 0, p = 0, n = 0;
  friend bool operator==(const Triplet&, const Triplet&) = default;
};

inline constexpr double kDefaultMargin = 0.3;

inline double squared_distance(const Eigen::VectorXd& x, const Eigen::VectorXd& y) { return (x - y).squaredNorm(); }

// Loss value of one hinge term plus gradients w.r.t. its three embeddings.
struct LossReport {
  double value = 0.0;
  bool nonzero = false;
  Eigen::VectorXd grad_anchor, grad_positive, grad_negative;
};

// [ |a-p|^2 - |a-n|^2 + alpha ]_+
inline LossReport triplet_loss(const Eigen::VectorXd& fa, const Eigen::VectorXd& fp, const Eigen::VectorXd& fn,
                               double alpha) {
  detail::require(fa.size() == fp.size() && fa.size() == fn.size(), "triplet_loss: dimension mismatch");
  detail::require(alpha > 0.0, "triplet_loss: alpha must be positive");
  LossReport r;
  const double raw = squared_distance(fa, fp) - squared_distance(fa, fn) + alpha;
  r.value = std::max(raw, 0.0);
  r.nonzero = r.value > 0.0;
  if (r.nonzero) {
    r.grad_anchor = 2.0 * (fn - fp);
    r.grad_positive = 2.0 * (fp - fa);
    r.grad_negative = 2.0 * (fa - fn);
  } else {
    r.grad_anchor = r.grad_positive = r.grad_negative = Eigen::VectorXd::Zero(fa.size());
  }
  return r;
}

struct BatchHardReport {
  double value = 0.0;                    // sum over anchors
  std::vector<double> anchor_values;     // one hinge term per anchor
  std::vector<bool> anchor_nonzero;
  std::vector<std::size_t> hardest_positive, hardest_negative;
  Eigen::MatrixXd grads;                 // e x M, column j = dL/d(embedding j)

  std::size_t nonzero_count() const {
    return static_cast<std::size_t>(std::count(anchor_nonzero.begin(), anchor_nonzero.end(), true));
  }
};

// For every anchor: hardest (farthest) positive and hardest (closest) negative
// within the batch. Columns of `embeddings` are samples, `labels[j]` their IDs.
// Ties resolve to the lowest column index.
inline BatchHardReport batch_hard_loss(const Eigen::MatrixXd& embeddings, std::span<const Identity> labels,
                                       double alpha) {
  const auto M = static_cast<std::size_t>(embeddings.cols());
  detail::require(labels.size() == M, "batch_hard_loss: label count mismatch");
  detail::require(alpha > 0.0, "batch_hard_loss: alpha must be positive");
  {
    std::map<Identity, std::size_t> counts;
    for (Identity id : labels) ++counts[id];
    detail::require(counts.size() >= 2, "batch_hard_loss: need at least two identity groups");
    for (const auto& [id, c] : counts)
      detail::require(c >= 2, "batch_hard_loss: identity " + std::to_string(id) + " has fewer than 2 members");
  }

  const Eigen::VectorXd sq = embeddings.colwise().squaredNorm().transpose();
  Eigen::MatrixXd d2 = -2.0 * embeddings.transpose() * embeddings;
  d2.colwise() += sq;
  d2.rowwise() += sq.transpose();

  BatchHardReport r;
  r.anchor_values.assign(M, 0.0);
  r.anchor_nonzero.assign(M, false);
  r.hardest_positive.assign(M, 0);
  r.hardest_negative.assign(M, 0);
  r.grads = Eigen::MatrixXd::Zero(embeddings.rows(), embeddings.cols());

  for (std::size_t a = 0; a < M; ++a) {
    double dp = -std::numeric_limits<double>::infinity();
    double dn = std::numeric_limits<double>::infinity();
    std::size_t p = a, n = a;
    for (std::size_t j = 0; j < M; ++j) {
      if (j == a) continue;
      const double d = d2(Eigen::Index(a), Eigen::Index(j));
      if (labels[j] == labels[a]) {
        if (d > dp) dp = d, p = j;
      } else if (d < dn) {
        dn = d, n = j;
      }
    }
    r.hardest_positive[a] = p;
    r.hardest_negative[a] = n;
    const double term = std::max(dp - dn + alpha, 0.0);
    r.anchor_values[a] = term;
    r.anchor_nonzero[a] = term > 0.0;
    r.value += term;
    if (term > 0.0) {
      const auto fa = embeddings.col(Eigen::Index(a));
      const auto fp = embeddings.col(Eigen::Index(p));
      const auto fn = embeddings.col(Eigen::Index(n));
      r.grads.col(Eigen::Index(a)) += 2.0 * (fn - fp);
      r.grads.col(Eigen::Index(p)) += 2.0 * (fp - fa);
      r.grads.col(Eigen::Index(n)) += 2.0 * (fa - fn);
    }
  }
  return r;
}

// Index of the semi-hard negative: the closest candidate strictly farther than
// the positive. With no such candidate, the farthest candidate. Ties go to
// the lowest index. Distances may be plain or squared, as long as both
// arguments use the same one.
inline std::size_t semi_hard_select(double anchor_positive, std::span<const double> anchor_negatives) {
  detail::require(!anchor_negatives.empty(), "semi_hard_select: no candidate negatives");
  std::size_t best = anchor_negatives.size();
  for (std::size_t i = 0; i < anchor_negatives.size(); ++i) {
    const double d = anchor_negatives[i];
    if (d > anchor_positive && (best == anchor_negatives.size() || d < anchor_negatives[best])) best = i;
  }
  if (best != anchor_negatives.size()) return best;
  return static_cast<std::size_t>(std::max_element(anchor_negatives.begin(), anchor_negatives.end()) -
                                  anchor_negatives.begin());
}

inline std::size_t semi_hard_select(const Eigen::VectorXd& fa, const Eigen::VectorXd& fp,
                                    std::span<const Eigen::VectorXd> negatives) {
  std::vector<double> d(negatives.size());
  for (std::size_t i = 0; i < negatives.size(); ++i) d[i] = squared_distance(fa, negatives[i]);
  return semi_hard_select(squared_distance(fa, fp), d);
}

struct AeLoss {
  double value = 0.0;
  Eigen::VectorXd grad_reconstruction;  // d/d(fx_hat); f(x) itself receives no gradient
};

// |fx - fx_hat|^2
inline AeLoss ae_loss(const Eigen::VectorXd& fx, const Eigen::VectorXd& fx_hat) {
  detail::require(fx.size() == fx_hat.size(), "ae_loss: dimension mismatch");
  const Eigen::VectorXd diff = fx_hat - fx;
  return {diff.squaredNorm(), 2.0 * diff};
}

}  // namespace bon
