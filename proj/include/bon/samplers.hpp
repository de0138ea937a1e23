#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "bon/dataset.hpp"
#include "bon/embedding.hpp"
#include "bon/errors.hpp"
#include "bon/hash.hpp"
#include "bon/losses.hpp"

namespace bon {

enum class SamplerKind {
  vanilla,
  bon_random,
  semi_hard,
  batch_hard,
  bon_batch_hard,
  sh_oracle_batch_hard,
  static_cluster_batch_hard,
};

inline constexpr SamplerKind kAllSamplers[] = {
    SamplerKind::vanilla,        SamplerKind::bon_random,           SamplerKind::semi_hard,
    SamplerKind::batch_hard,     SamplerKind::bon_batch_hard,       SamplerKind::sh_oracle_batch_hard,
    SamplerKind::static_cluster_batch_hard,
};

inline std::string_view to_string(SamplerKind k) {
  switch (k) {
    case SamplerKind::vanilla: return "vanilla";
    case SamplerKind::bon_random: return "bon_random";
    case SamplerKind::semi_hard: return "semi_hard";
    case SamplerKind::batch_hard: return "batch_hard";
    case SamplerKind::bon_batch_hard: return "bon_batch_hard";
    case SamplerKind::sh_oracle_batch_hard: return "sh_oracle_batch_hard";
    case SamplerKind::static_cluster_batch_hard: return "static_cluster_batch_hard";
  }
  return "?";
}

inline SamplerKind parse_sampler(std::string_view name) {
  for (SamplerKind k : kAllSamplers)
    if (to_string(k) == name) return k;
  throw ConfigError("unknown sampler '" + std::string(name) + "'");
}

// Triplet samplers emit b = m/3 triplets; every other kind emits l x k groups.
inline bool is_triplet_sampler(SamplerKind k) { return k == SamplerKind::vanilla || k == SamplerKind::bon_random; }
inline bool uses_online_hash(SamplerKind k) { return k == SamplerKind::bon_random || k == SamplerKind::bon_batch_hard; }

struct TripletBatch {
  std::vector<Triplet> triplets;
};

// l identity groups of k samples each.
struct GroupBatch {
  std::vector<Identity> ids;
  std::vector<std::vector<SampleIndex>> members;

  std::vector<SampleIndex> flat() const {
    std::vector<SampleIndex> out;
    for (const auto& g : members) out.insert(out.end(), g.begin(), g.end());
    return out;
  }
  std::vector<Identity> labels() const {
    std::vector<Identity> out;
    for (std::size_t g = 0; g < ids.size(); ++g) out.insert(out.end(), members[g].size(), ids[g]);
    return out;
  }
};

// Empty string when the batch satisfies its invariants, otherwise a description.
inline std::string triplet_batch_violation(const Dataset& ds, const TripletBatch& batch, std::size_t b) {
  if (batch.triplets.size() != b) return "expected " + std::to_string(b) + " triplets";
  for (const Triplet& t : batch.triplets) {
    if (t.a >= ds.size() || t.p >= ds.size() || t.n >= ds.size()) return "index out of range";
    if (t.a == t.p) return "anchor equals positive";
    if (ds.id_of(t.a) != ds.id_of(t.p)) return "positive has a different identity";
    if (ds.id_of(t.a) == ds.id_of(t.n)) return "negative shares the anchor identity";
  }
  return {};
}

inline std::string group_batch_violation(const Dataset& ds, const GroupBatch& batch, std::size_t l, std::size_t k) {
  if (batch.ids.size() != l || batch.members.size() != l) return "expected " + std::to_string(l) + " groups";
  std::set<Identity> ids(batch.ids.begin(), batch.ids.end());
  if (ids.size() != l) return "duplicate identity";
  std::set<SampleIndex> seen;
  for (std::size_t g = 0; g < l; ++g) {
    if (batch.members[g].size() != k) return "group of wrong size";
    for (SampleIndex v : batch.members[g]) {
      if (v >= ds.size()) return "index out of range";
      if (ds.id_of(v) != batch.ids[g]) return "sample in wrong group";
      if (!seen.insert(v).second) return "duplicate sample";
    }
  }
  return {};
}

namespace detail {

// `count` distinct positions of [0, n) by partial Fisher-Yates.
inline std::vector<std::size_t> sample_positions(Rng& rng, std::size_t n, std::size_t count) {
  require(count <= n, "sampling more items than available");
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  for (std::size_t i = 0; i < count; ++i) std::swap(pool[i], pool[i + uniform_index(rng, n - i)]);
  pool.resize(count);
  return pool;
}

template <class T>
std::vector<T> sample_without_replacement(Rng& rng, const std::vector<T>& items, std::size_t count) {
  std::vector<T> out;
  out.reserve(count);
  for (std::size_t p : sample_positions(rng, items.size(), count)) out.push_back(items[p]);
  return out;
}

inline SampleIndex draw_positive(const Dataset& ds, SampleIndex anchor, Rng& rng) {
  const auto& members = ds.members(ds.id_of(anchor));
  require(members.size() >= 2, "sampler: identity " + std::to_string(ds.id_of(anchor)) + " has no positive");
  // Positives are the members minus the anchor, in ascending order.
  const std::size_t j = uniform_index(rng, members.size() - 1);
  const auto self = static_cast<std::size_t>(std::lower_bound(members.begin(), members.end(), anchor) - members.begin());
  return members[j < self ? j : j + 1];
}

// Uniform over all samples whose identity differs from `id`: draws the j-th
// such sample in ascending index order.
inline SampleIndex draw_other_identity(const Dataset& ds, Identity id, Rng& rng) {
  const auto& excluded = ds.members(id);
  require(ds.size() > excluded.size(), "sampler: dataset has a single identity");
  std::size_t v = uniform_index(rng, ds.size() - excluded.size());
  for (SampleIndex x : excluded) {
    if (x <= v) ++v;
    else break;
  }
  return static_cast<SampleIndex>(v);
}

inline void fill_random_ids(const Dataset& ds, Rng& rng, std::size_t l, std::vector<Identity>& chosen) {
  if (chosen.size() >= l) return;
  std::vector<Identity> pool;
  pool.reserve(ds.num_ids());
  for (Identity id : ds.ids())
    if (std::find(chosen.begin(), chosen.end(), id) == chosen.end()) pool.push_back(id);
  for (Identity id : sample_without_replacement(rng, pool, l - chosen.size())) chosen.push_back(id);
}

inline GroupBatch groups_from_ids(const Dataset& ds, Rng& rng, std::vector<Identity> ids, std::size_t k) {
  GroupBatch batch;
  for (Identity id : ids) {
    const auto& members = ds.members(id);
    require(members.size() >= k, "sampler: identity " + std::to_string(id) + " has fewer than k samples");
    batch.members.push_back(sample_without_replacement(rng, members, k));
  }
  batch.ids = std::move(ids);
  return batch;
}

inline void check_group_request(const Dataset& ds, std::size_t l, std::size_t k) {
  require(l >= 2 && k >= 2, "sampler: need l >= 2 and k >= 2");
  require(ds.num_ids() >= l, "sampler: dataset has fewer than l identities");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Triplet samplers

inline TripletBatch vanilla_batch(const Dataset& ds, Rng& rng, std::size_t b) {
  detail::require(ds.num_ids() >= 2, "vanilla_batch: dataset has fewer than two identities");
  TripletBatch batch;
  batch.triplets.reserve(b);
  for (std::size_t i = 0; i < b; ++i) {
    Triplet t;
    t.a = static_cast<SampleIndex>(uniform_index(rng, ds.size()));
    t.p = detail::draw_positive(ds, t.a, rng);
    t.n = detail::draw_other_identity(ds, ds.id_of(t.a), rng);
    batch.triplets.push_back(t);
  }
  return batch;
}

// Anchor/positive as vanilla; the negative comes from the anchor's bucket,
// falling back to the whole dataset when the anchor is unassigned or its
// bucket holds no other identity.
inline TripletBatch bon_random_batch(const Dataset& ds, const HashTable& table, Rng& rng, std::size_t b) {
  detail::require(ds.num_ids() >= 2, "bon_random_batch: dataset has fewer than two identities");
  detail::require(table.num_samples() == ds.size(), "bon_random_batch: table/dataset size mismatch");
  TripletBatch batch;
  batch.triplets.reserve(b);
  for (std::size_t i = 0; i < b; ++i) {
    Triplet t;
    t.a = static_cast<SampleIndex>(uniform_index(rng, ds.size()));
    t.p = detail::draw_positive(ds, t.a, rng);
    const Identity id = ds.id_of(t.a);
    const Codeword cw = table.entry_of(t.a);
    std::vector<SampleIndex> candidates;
    if (cw != HashTable::kUnassigned) candidates = negatives_in_bin(table, cw, id);
    t.n = candidates.empty() ? detail::draw_other_identity(ds, id, rng)
                             : candidates[uniform_index(rng, candidates.size())];
    batch.triplets.push_back(t);
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Group samplers

// l distinct random identities, k random samples each (semi-hard and
// batch-hard baselines).
inline GroupBatch random_group_batch(const Dataset& ds, Rng& rng, std::size_t l, std::size_t k) {
  detail::check_group_request(ds, l, k);
  return detail::groups_from_ids(ds, rng, detail::sample_without_replacement(rng, ds.ids(), l), k);
}

inline GroupBatch semi_hard_batch(const Dataset& ds, Rng& rng, std::size_t l, std::size_t k) {
  return random_group_batch(ds, rng, l, k);
}
inline GroupBatch batch_hard_batch(const Dataset& ds, Rng& rng, std::size_t l, std::size_t k) {
  return random_group_batch(ds, rng, l, k);
}

struct BinBatchOptions {
  std::size_t max_bin_draws = 16;
  // With a single-identity first bucket, pick all l identities at random
  // instead of keeping that identity.
  bool single_id_bin_all_random = false;
};

// Identity selection driven by a hash table:
//   r = distinct IDs in a random non-empty bucket
//   r == 1      -> that ID plus l-1 random IDs
//   r >= l      -> l random IDs from the bucket
//   1 < r < l   -> all r, then more random buckets (up to max_bin_draws,
//                  repeats allowed, IDs deduplicated), then random fill.
inline GroupBatch bin_group_batch(const Dataset& ds, const HashTable& table, Rng& rng, std::size_t l, std::size_t k,
                                  const BinBatchOptions& opt = {}) {
  detail::check_group_request(ds, l, k);
  if (table.nonempty_count() == 0) return random_group_batch(ds, rng, l, k);

  std::vector<Identity> chosen;
  const std::vector<Identity> first = table.ids_in_bucket(table.random_nonempty_bucket(rng));
  if (first.size() == 1) {
    if (!opt.single_id_bin_all_random) chosen.push_back(first.front());
  } else if (first.size() >= l) {
    chosen = detail::sample_without_replacement(rng, first, l);
  } else {
    chosen = first;
    for (std::size_t draw = 0; draw < opt.max_bin_draws && chosen.size() < l; ++draw) {
      std::vector<Identity> fresh;
      for (Identity id : table.ids_in_bucket(table.random_nonempty_bucket(rng)))
        if (std::find(chosen.begin(), chosen.end(), id) == chosen.end()) fresh.push_back(id);
      const std::size_t take = std::min(fresh.size(), l - chosen.size());
      for (Identity id : detail::sample_without_replacement(rng, fresh, take)) chosen.push_back(id);
    }
  }
  detail::fill_random_ids(ds, rng, l, chosen);
  return detail::groups_from_ids(ds, rng, std::move(chosen), k);
}

inline GroupBatch bon_batch_hard_batch(const Dataset& ds, const HashTable& table, Rng& rng, std::size_t l,
                                       std::size_t k, const BinBatchOptions& opt = {}) {
  return bin_group_batch(ds, table, rng, l, k, opt);
}

// ---------------------------------------------------------------------------
// Frozen tables for the offline baselines

// Unit embeddings of every sample as columns. Degenerate samples get a zero
// column and are reported through `degenerate`.
inline Eigen::MatrixXd embed_all(const EmbeddingModel& model, const Dataset& ds,
                                 std::vector<SampleIndex>* degenerate = nullptr) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(model.embed_dim), static_cast<Eigen::Index>(ds.size()));
  for (std::size_t v = 0; v < ds.size(); ++v) {
    try {
      out.col(Eigen::Index(v)) = embed(model, ds.features(static_cast<SampleIndex>(v)));
    } catch (const DegenerateEmbedding&) {
      out.col(Eigen::Index(v)).setZero();
      if (degenerate) degenerate->push_back(static_cast<SampleIndex>(v));
    }
  }
  return out;
}

// Top-`count` principal directions of the columns of `x` as rows, descending
// variance. Directions with negligible variance are zeroed; their number is
// stored in `deficient`.
inline Eigen::MatrixXd principal_directions(const Eigen::MatrixXd& x, std::size_t count, std::size_t& deficient) {
  const Eigen::VectorXd mean = x.rowwise().mean();
  const Eigen::MatrixXd centered = x.colwise() - mean;
  const Eigen::MatrixXd cov = centered * centered.transpose() / double(std::max<Eigen::Index>(x.cols(), 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::VectorXd& values = eig.eigenvalues();  // ascending
  const double top = values.size() ? std::max(values[values.size() - 1], 0.0) : 0.0;
  const double tol = std::max(top, 1.0) * 1e-12 * double(x.rows());
  Eigen::MatrixXd dirs = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(count), x.rows());
  deficient = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const Eigen::Index col = values.size() - 1 - static_cast<Eigen::Index>(i);
    if (col < 0 || values[col] <= tol) {
      ++deficient;
      continue;
    }
    dirs.row(Eigen::Index(i)) = eig.eigenvectors().col(col).transpose();
  }
  return dirs;
}

// Offline spectral-hashing table: embed everything, project the centered
// embeddings on the top-s principal components, threshold each at 0.
inline HashTable sh_oracle_rebuild(const Dataset& ds, const EmbeddingModel& model, unsigned bits,
                                   std::size_t* deficient_dims = nullptr) {
  detail::require(bits < model.embed_dim, "sh_oracle_rebuild: s must be smaller than e");
  std::vector<SampleIndex> degenerate;
  const Eigen::MatrixXd emb = embed_all(model, ds, &degenerate);
  std::size_t deficient = 0;
  const Eigen::MatrixXd dirs = principal_directions(emb, bits, deficient);
  if (deficient_dims) *deficient_dims = deficient;
  const Eigen::VectorXd mean = emb.rowwise().mean();
  const Eigen::MatrixXd proj = dirs * (emb.colwise() - mean);
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(bits));
  HashTable table(bits, ds.size());
  std::size_t next_bad = 0;
  for (std::size_t v = 0; v < ds.size(); ++v) {
    if (next_bad < degenerate.size() && degenerate[next_bad] == v) {
      ++next_bad;
      continue;
    }
    const auto sv = static_cast<SampleIndex>(v);
    table.update(sv, ds.id_of(sv), codeword(proj.col(Eigen::Index(v)), zero));
  }
  return table;
}

struct KMeansResult {
  Eigen::MatrixXd centroids;            // dim x clusters
  std::vector<std::size_t> assignment;  // per point
};

// Lloyd's k-means with k-means++ seeding over the columns of `points`. An
// empty cluster is re-seeded at the point farthest from its centroid.
inline KMeansResult kmeans(const Eigen::MatrixXd& points, std::size_t clusters, std::size_t iterations, Rng& rng) {
  const auto n = static_cast<std::size_t>(points.cols());
  detail::require(clusters >= 1 && clusters <= n, "kmeans: need 1 <= clusters <= points");
  KMeansResult r;
  r.centroids.resize(points.rows(), static_cast<Eigen::Index>(clusters));
  r.centroids.col(0) = points.col(Eigen::Index(uniform_index(rng, n)));
  Eigen::VectorXd nearest = (points.colwise() - r.centroids.col(0)).colwise().squaredNorm().transpose();
  for (std::size_t c = 1; c < clusters; ++c) {
    const double total = nearest.sum();
    std::size_t pick = 0;
    if (total > 0.0) {
      double target = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (pick = 0; pick + 1 < n; ++pick) {
        target -= nearest[Eigen::Index(pick)];
        if (target < 0.0) break;
      }
    } else {
      pick = uniform_index(rng, n);
    }
    r.centroids.col(Eigen::Index(c)) = points.col(Eigen::Index(pick));
    nearest = nearest.cwiseMin((points.colwise() - r.centroids.col(Eigen::Index(c))).colwise().squaredNorm().transpose());
  }

  r.assignment.assign(n, 0);
  std::vector<double> dist(n, 0.0);
  for (std::size_t it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < clusters; ++c) {
        const double d = (points.col(Eigen::Index(i)) - r.centroids.col(Eigen::Index(c))).squaredNorm();
        if (d < best) best = d, r.assignment[i] = c;
      }
      dist[i] = best;
    }
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(points.rows(), static_cast<Eigen::Index>(clusters));
    std::vector<std::size_t> counts(clusters, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.col(Eigen::Index(r.assignment[i])) += points.col(Eigen::Index(i));
      ++counts[r.assignment[i]];
    }
    for (std::size_t c = 0; c < clusters; ++c) {
      if (counts[c] > 0) {
        r.centroids.col(Eigen::Index(c)) = sums.col(Eigen::Index(c)) / double(counts[c]);
        continue;
      }
      const auto far = static_cast<std::size_t>(std::max_element(dist.begin(), dist.end()) - dist.begin());
      r.centroids.col(Eigen::Index(c)) = points.col(Eigen::Index(far));
      dist[far] = 0.0;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < clusters; ++c) {
      const double d = (points.col(Eigen::Index(i)) - r.centroids.col(Eigen::Index(c))).squaredNorm();
      if (d < best) best = d, r.assignment[i] = c;
    }
  }
  return r;
}

inline unsigned bits_for(std::size_t buckets) {
  unsigned bits = 0;
  while ((std::size_t{1} << bits) < buckets) ++bits;
  return bits;
}

inline constexpr std::size_t kStaticClusterDefault = 10;

// Static identity clusters: mean embedding per ID, k-means over the ID
// vectors, every sample keyed by its ID's cluster. Never updated afterwards.
inline HashTable static_cluster_table(const Dataset& ds, const EmbeddingModel& model, std::size_t num_clusters,
                                      Rng& rng, std::size_t iterations = 50) {
  detail::require(num_clusters >= 1, "static_cluster_table: need at least one cluster");
  detail::require(num_clusters <= ds.num_ids(), "static_cluster_table: more clusters than identities");
  const Eigen::MatrixXd emb = embed_all(model, ds);
  Eigen::MatrixXd id_vectors(emb.rows(), static_cast<Eigen::Index>(ds.num_ids()));
  for (std::size_t i = 0; i < ds.num_ids(); ++i) {
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(emb.rows());
    const auto& members = ds.members(ds.ids()[i]);
    for (SampleIndex v : members) mean += emb.col(Eigen::Index(v));
    id_vectors.col(Eigen::Index(i)) = mean / double(members.size());
  }
  const KMeansResult km = kmeans(id_vectors, num_clusters, iterations, rng);
  HashTable table(bits_for(num_clusters), ds.size());
  for (std::size_t i = 0; i < ds.num_ids(); ++i)
    for (SampleIndex v : ds.members(ds.ids()[i])) table.update(v, ds.ids()[i], static_cast<Codeword>(km.assignment[i]));
  return table;
}

}  // namespace bon
