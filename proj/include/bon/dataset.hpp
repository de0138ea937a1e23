#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "bon/errors.hpp"

namespace bon {

using SampleIndex = std::uint32_t;
using Identity = std::int32_t;
using Rng = std::mt19937_64;

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  detail::require(n > 0, "uniform_index: empty range");
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

struct Sample {
  SampleIndex v = 0;
  Identity id = 0;
  Eigen::VectorXd features;

  friend bool operator==(const Sample& a, const Sample& b) {
    return a.v == b.v && a.id == b.id && a.features.size() == b.features.size() &&
           a.features == b.features;
  }
};

// Immutable table of samples with an identity index.
class Dataset {
 public:
  Dataset() = default;

  Dataset(std::vector<Sample> samples, std::size_t dim) : samples_(std::move(samples)), dim_(dim) {
    for (std::size_t i = 0; i < samples_.size(); ++i) {
      const Sample& s = samples_[i];
      if (s.v != i) throw ConfigError("dataset: sample " + std::to_string(i) + " has index " + std::to_string(s.v));
      if (s.id < 0) throw ConfigError("dataset: negative identity at sample " + std::to_string(i));
      if (static_cast<std::size_t>(s.features.size()) != dim_)
        throw ConfigError("dataset: sample " + std::to_string(i) + " has wrong feature count");
      if (!s.features.allFinite()) throw ConfigError("dataset: non-finite feature at sample " + std::to_string(i));
      by_id_[s.id].push_back(s.v);
    }
    ids_.reserve(by_id_.size());
    for (const auto& [id, members] : by_id_) ids_.push_back(id);
  }

  std::size_t size() const { return samples_.size(); }
  std::size_t dim() const { return dim_; }
  std::size_t num_ids() const { return ids_.size(); }
  bool empty() const { return samples_.empty(); }

  const Sample& sample(SampleIndex v) const {
    check_index(v);
    return samples_[v];
  }
  const std::vector<Sample>& samples() const { return samples_; }
  Identity id_of(SampleIndex v) const { return sample(v).id; }
  const Eigen::VectorXd& features(SampleIndex v) const { return sample(v).features; }

  // Distinct identities, ascending.
  const std::vector<Identity>& ids() const { return ids_; }

  // Sample indices of one identity, ascending.
  const std::vector<SampleIndex>& members(Identity id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) throw ContractViolation("dataset: unknown identity " + std::to_string(id));
    return it->second;
  }

  const std::map<Identity, std::vector<SampleIndex>>& index_by_id() const { return by_id_; }

  double mean_per_id() const { return ids_.empty() ? 0.0 : double(size()) / double(num_ids()); }

  void check_index(SampleIndex v) const {
    if (v >= samples_.size())
      throw ContractViolation("sample index " + std::to_string(v) + " out of range (N=" +
                              std::to_string(samples_.size()) + ")");
  }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.dim_ == b.dim_ && a.samples_ == b.samples_;
  }

 private:
  std::vector<Sample> samples_;
  std::size_t dim_ = 0;
  std::map<Identity, std::vector<SampleIndex>> by_id_;
  std::vector<Identity> ids_;
};

// All u with ID(u) == ID(v), u != v, ascending.
inline std::vector<SampleIndex> positives_of(const Dataset& ds, SampleIndex v) {
  const Identity id = ds.id_of(v);
  std::vector<SampleIndex> out;
  for (SampleIndex u : ds.members(id))
    if (u != v) out.push_back(u);
  return out;
}

struct SynthConfig {
  std::size_t num_ids = 500;
  std::size_t images_per_id = 10;
  std::size_t input_dim = 64;
  double cluster_spread = 1.0;
  double noise_sigma = 0.3;
  // Identity centers occupy the first `signal_dims` coordinates (0 = all of
  // them); the remaining coordinates carry per-image noise of std
  // `nuisance_sigma` and no identity information.
  std::size_t signal_dims = 0;
  double nuisance_sigma = 0.0;
  std::uint64_t seed = 0;

  std::size_t effective_signal_dims() const { return signal_dims == 0 ? input_dim : signal_dims; }

  void validate() const {
    if (num_ids < 2) throw ConfigError("synth: num_ids must be >= 2");
    if (images_per_id < 2) throw ConfigError("synth: images_per_id must be >= 2");
    if (input_dim < 1) throw ConfigError("synth: input_dim must be >= 1");
    if (!(cluster_spread >= 0.0) || !std::isfinite(cluster_spread))
      throw ConfigError("synth: cluster_spread must be finite and >= 0");
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma))
      throw ConfigError("synth: noise_sigma must be finite and >= 0");
    if (signal_dims > input_dim) throw ConfigError("synth: signal_dims must be <= input_dim");
    if (!(nuisance_sigma >= 0.0) || !std::isfinite(nuisance_sigma))
      throw ConfigError("synth: nuisance_sigma must be finite and >= 0");
  }
};

// Desk-scale benchmark: identity lives in 16 of 64 coordinates, the other 48
// carry per-image nuisance noise the embedding has to learn to ignore.
inline SynthConfig benchmark_synth(std::uint64_t seed = 0) {
  SynthConfig c;
  c.num_ids = 500;
  c.images_per_id = 10;
  c.input_dim = 64;
  c.cluster_spread = 1.0;
  c.noise_sigma = 0.3;
  c.signal_dims = 16;
  c.nuisance_sigma = 2.0;
  c.seed = seed;
  return c;
}

// Identity centers ~ N(0, spread^2 I) on the signal coordinates; samples add
// N(0, sigma^2) there and N(0, nuisance^2) on the other coordinates.
// Samples are laid out identity-major: v = id * images_per_id + j.
inline Dataset generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const auto D = static_cast<Eigen::Index>(cfg.input_dim);
  const auto S = static_cast<Eigen::Index>(cfg.effective_signal_dims());

  std::vector<Eigen::VectorXd> centers(cfg.num_ids, Eigen::VectorXd::Zero(D));
  for (auto& c : centers)
    for (Eigen::Index d = 0; d < S; ++d) c[d] = cfg.cluster_spread * gauss(rng);

  std::vector<Sample> samples;
  samples.reserve(cfg.num_ids * cfg.images_per_id);
  for (std::size_t g = 0; g < cfg.num_ids; ++g) {
    for (std::size_t j = 0; j < cfg.images_per_id; ++j) {
      Sample s;
      s.v = static_cast<SampleIndex>(samples.size());
      s.id = static_cast<Identity>(g);
      s.features = centers[g];
      if (cfg.noise_sigma > 0.0)
        for (Eigen::Index d = 0; d < S; ++d) s.features[d] += cfg.noise_sigma * gauss(rng);
      if (cfg.nuisance_sigma > 0.0)
        for (Eigen::Index d = S; d < D; ++d) s.features[d] += cfg.nuisance_sigma * gauss(rng);
      samples.push_back(std::move(s));
    }
  }
  return Dataset(std::move(samples), cfg.input_dim);
}

// Copy of the samples belonging to `ids`, re-indexed 0..n-1 in original order.
// Identity labels are preserved.
inline Dataset subset_by_ids(const Dataset& ds, const std::vector<Identity>& ids) {
  std::set<Identity> keep(ids.begin(), ids.end());
  std::vector<Sample> out;
  for (const Sample& s : ds.samples()) {
    if (!keep.count(s.id)) continue;
    Sample c = s;
    c.v = static_cast<SampleIndex>(out.size());
    out.push_back(std::move(c));
  }
  return Dataset(std::move(out), ds.dim());
}

// Splits identities (not images) into train / validation.
inline std::pair<Dataset, Dataset> split_by_identity(const Dataset& ds, double train_fraction,
                                                     std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("split: train_fraction must be in (0,1)");
  std::vector<Identity> ids = ds.ids();
  Rng rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  auto n_train = static_cast<std::size_t>(std::llround(train_fraction * double(ids.size())));
  n_train = std::clamp<std::size_t>(n_train, 1, ids.size() - 1);
  std::vector<Identity> tr(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<Identity> va(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
  return {subset_by_ids(ds, tr), subset_by_ids(ds, va)};
}

// ---------------------------------------------------------------------------
// BONDATA v1 text format
//
//   BONDATA v1 N=<int> D=<int>
//   v,id,f_0,...,f_{D-1}        (one line per sample, ascending v, LF endings)
//
// Reals use the shortest decimal that round-trips a 64-bit double.

namespace detail {

inline std::string format_double(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

template <class T>
bool parse_number(std::string_view tok, T& out) {
  const char* first = tok.data();
  const char* last = tok.data() + tok.size();
  auto res = std::from_chars(first, last, out);
  return res.ec == std::errc() && res.ptr == last;
}

}  // namespace detail

inline void write_dataset(const Dataset& ds, std::ostream& os) {
  os << "BONDATA v1 N=" << ds.size() << " D=" << ds.dim() << '\n';
  for (const Sample& s : ds.samples()) {
    os << s.v << ',' << s.id;
    for (Eigen::Index d = 0; d < s.features.size(); ++d) os << ',' << detail::format_double(s.features[d]);
    os << '\n';
  }
}

inline void write_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ParseError("cannot open '" + path + "' for writing");
  write_dataset(ds, os);
  if (!os) throw ParseError("write failed for '" + path + "'");
}

inline Dataset read_dataset(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError("line 1: missing BONDATA header");
  std::size_t n = 0, dim = 0;
  {
    std::istringstream hs(line);
    std::string magic, version, ntok, dtok, extra;
    hs >> magic >> version >> ntok >> dtok;
    if (magic != "BONDATA" || version != "v1" || ntok.rfind("N=", 0) != 0 || dtok.rfind("D=", 0) != 0 ||
        (hs >> extra) || !detail::parse_number(std::string_view(ntok).substr(2), n) ||
        !detail::parse_number(std::string_view(dtok).substr(2), dim))
      throw ParseError("line 1: malformed header '" + line + "'");
    if (dim == 0) throw ParseError("line 1: D must be positive");
  }

  std::vector<Sample> samples;
  samples.reserve(n);
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() && is.peek() == std::char_traits<char>::eof()) break;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    if (samples.size() == n) throw ParseError(where + "more records than header N=" + std::to_string(n));
    if (!line.empty() && line.back() == '\r') throw ParseError(where + "CR line ending");

    std::vector<std::string_view> toks;
    std::string_view rest(line);
    while (true) {
      auto comma = rest.find(',');
      toks.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (toks.size() != dim + 2)
      throw ParseError(where + "expected " + std::to_string(dim + 2) + " fields, got " + std::to_string(toks.size()));

    Sample s;
    std::uint64_t v = 0;
    std::int64_t id = 0;
    if (!detail::parse_number(toks[0], v)) throw ParseError(where + "bad sample index");
    if (v != samples.size()) throw ParseError(where + "sample index " + std::to_string(v) + " out of order");
    if (!detail::parse_number(toks[1], id) || id < 0 || id > std::numeric_limits<Identity>::max())
      throw ParseError(where + "bad identity");
    s.v = static_cast<SampleIndex>(v);
    s.id = static_cast<Identity>(id);
    s.features.resize(static_cast<Eigen::Index>(dim));
    for (std::size_t d = 0; d < dim; ++d) {
      double x = 0.0;
      if (!detail::parse_number(toks[d + 2], x))
        throw ParseError(where + "field " + std::to_string(d + 2) + " is not a number");
      if (!std::isfinite(x)) throw ParseError(where + "field " + std::to_string(d + 2) + " is not finite");
      s.features[static_cast<Eigen::Index>(d)] = x;
    }
    samples.push_back(std::move(s));
  }
  if (samples.size() != n)
    throw ParseError("line " + std::to_string(lineno) + ": header declares N=" + std::to_string(n) + " but found " +
                     std::to_string(samples.size()) + " records");
  return Dataset(std::move(samples), dim);
}

inline Dataset read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open '" + path + "'");
  return read_dataset(is);
}

}  // namespace bon
