#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "bon/dataset.hpp"
#include "bon/embedding.hpp"
#include "bon/errors.hpp"
#include "bon/losses.hpp"

namespace bon {

struct MapResult {
  double value = 0.0;
  std::size_t queries_used = 0;
  std::size_t queries_without_positive = 0;
};

// Mean average precision. Each query ranks every other column of
// `embeddings` by descending dot product, ties broken by ascending index.
// AP is the mean precision at the ranks of the query's positives; queries
// without positives are skipped and counted.
inline MapResult mean_average_precision(const Eigen::MatrixXd& embeddings, std::span<const Identity> ids,
                                        std::span<const std::size_t> queries) {
  const auto n = static_cast<std::size_t>(embeddings.cols());
  detail::require(ids.size() == n, "mAP: label count mismatch");
  detail::require(n >= 2, "mAP: need at least two samples");
  MapResult r;
  double total = 0.0;
  std::vector<std::size_t> positives;
  std::vector<std::size_t> ranks;
  Eigen::VectorXd scores(static_cast<Eigen::Index>(n));
  for (std::size_t q : queries) {
    detail::require(q < n, "mAP: query out of range");
    positives.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (j != q && ids[j] == ids[q]) positives.push_back(j);
    if (positives.empty()) {
      ++r.queries_without_positive;
      continue;
    }
    scores.noalias() = embeddings.transpose() * embeddings.col(Eigen::Index(q));
    // Rank of a positive = 1 + number of items ordered before it.
    ranks.clear();
    for (std::size_t p : positives) {
      const double sp = scores[Eigen::Index(p)];
      std::size_t ahead = 0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == q || j == p) continue;
        const double sj = scores[Eigen::Index(j)];
        if (sj > sp || (sj == sp && j < p)) ++ahead;
      }
      ranks.push_back(ahead + 1);
    }
    std::sort(ranks.begin(), ranks.end());
    double ap = 0.0;
    for (std::size_t i = 0; i < ranks.size(); ++i) ap += double(i + 1) / double(ranks[i]);
    total += ap / double(ranks.size());
    ++r.queries_used;
  }
  r.value = r.queries_used ? total / double(r.queries_used) : 0.0;
  return r;
}

inline MapResult mean_average_precision(const Eigen::MatrixXd& embeddings, std::span<const Identity> ids) {
  std::vector<std::size_t> all(ids.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return mean_average_precision(embeddings, ids, all);
}

inline double nonzero_triplet_fraction(std::size_t nonzero, std::size_t total) {
  detail::require(total > 0, "nonzero_triplet_fraction: no hinge terms evaluated");
  return double(nonzero) / double(total);
}

inline double nonzero_triplet_fraction(std::span<const LossReport> reports) {
  std::size_t nz = 0;
  for (const auto& r : reports) nz += r.value > 0.0 ? 1 : 0;
  return nonzero_triplet_fraction(nz, reports.size());
}

// Fraction of the N - n_ID negatives of (anchor, positive) that give a
// non-zero triplet loss. `embeddings` holds one column per sample of `ds`.
inline double p_hat_bruteforce(const Dataset& ds, const Eigen::MatrixXd& embeddings, SampleIndex anchor,
                               SampleIndex positive, double alpha) {
  detail::require(static_cast<std::size_t>(embeddings.cols()) == ds.size(), "p_hat: embedding count mismatch");
  detail::require(ds.id_of(anchor) == ds.id_of(positive) && anchor != positive, "p_hat: invalid anchor-positive pair");
  const Identity id = ds.id_of(anchor);
  const auto fa = embeddings.col(Eigen::Index(anchor));
  const double dap = (fa - embeddings.col(Eigen::Index(positive))).squaredNorm();
  std::size_t hits = 0;
  for (std::size_t v = 0; v < ds.size(); ++v) {
    if (ds.id_of(static_cast<SampleIndex>(v)) == id) continue;
    const double dan = (fa - embeddings.col(Eigen::Index(v))).squaredNorm();
    if (dap - dan + alpha > 0.0) ++hits;
  }
  const std::size_t negatives = ds.size() - ds.members(id).size();
  detail::require(negatives > 0, "p_hat: dataset has a single identity");
  return double(hits) / double(negatives);
}

inline double p_hat_bruteforce(const Dataset& ds, const EmbeddingModel& model, SampleIndex anchor,
                               SampleIndex positive, double alpha) {
  Eigen::MatrixXd emb(static_cast<Eigen::Index>(model.embed_dim), static_cast<Eigen::Index>(ds.size()));
  for (std::size_t v = 0; v < ds.size(); ++v) emb.col(Eigen::Index(v)) = embed(model, ds.features(SampleIndex(v)));
  return p_hat_bruteforce(ds, emb, anchor, positive, alpha);
}

}  // namespace bon
