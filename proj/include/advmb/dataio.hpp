#pragma once

// Labeled feature-vector datasets: CSV / binary I/O, a synthetic generator,
// min-max normalization and stratified splitting.

#include "advmb/core.hpp"

#include <array>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

namespace advmb {

struct Dataset {
  Matrix features;                    // n_samples x n_features
  std::vector<std::uint8_t> labels;   // 1 = malware
  std::string name;

  std::size_t size() const { return labels.size(); }
  std::size_t feature_dim() const { return static_cast<std::size_t>(features.cols()); }

  Dataset() = default;
  Dataset(Matrix f, std::vector<std::uint8_t> y, std::string n = {})
      : features(std::move(f)), labels(std::move(y)), name(std::move(n)) {
    validate();
  }

  void validate() const {
    if (static_cast<std::size_t>(features.rows()) != labels.size()) {
      throw DimensionError("dataset: " + std::to_string(labels.size()) + " labels for " +
                           std::to_string(features.rows()) + " rows");
    }
    for (auto y : labels) {
      if (y > 1) throw ValueError("dataset: label " + std::to_string(y) + " outside {0,1}");
    }
  }

  Vector labels_as_vector() const {
    Vector y(static_cast<Eigen::Index>(labels.size()));
    for (std::size_t i = 0; i < labels.size(); ++i) y[static_cast<Eigen::Index>(i)] = labels[i];
    return y;
  }

  std::size_t count_malware() const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
  }
};

inline Dataset gather_rows(const Dataset& d, std::span<const std::size_t> rows) {
  Matrix f(static_cast<Eigen::Index>(rows.size()), d.features.cols());
  std::vector<std::uint8_t> y(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    f.row(static_cast<Eigen::Index>(i)) = d.features.row(static_cast<Eigen::Index>(rows[i]));
    y[i] = d.labels[rows[i]];
  }
  return Dataset(std::move(f), std::move(y), d.name);
}

struct NormStats {
  Vector min;
  Vector max;

  static NormStats identity(std::size_t dim) {
    return {Vector::Zero(static_cast<Eigen::Index>(dim)), Vector::Ones(static_cast<Eigen::Index>(dim))};
  }
  std::size_t dim() const { return static_cast<std::size_t>(min.size()); }
};

enum class DataFormat { csv, bin };

inline DataFormat format_from_path(const std::string& path) {
  const auto dot = path.rfind('.');
  if (dot != std::string::npos && path.substr(dot) == ".csv") return DataFormat::csv;
  return DataFormat::bin;
}

// ---------------------------------------------------------------------------
// Binary layout (all little-endian):
//   "MB01" | u32 version=1 | u64 n_samples | u32 n_features
//   | n_samples x u8 label | n_samples*n_features x f32, row-major
// ---------------------------------------------------------------------------
inline constexpr std::array<char, 4> kDatasetMagic = {'M', 'B', '0', '1'};
inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::size_t kDatasetHeaderBytes = 4 + 4 + 8 + 4;

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>(u & 0xFF));
    u = static_cast<U>(u >> 8);
  }
}

template <typename T>
T get_le(const unsigned char* p) {
  using U = std::make_unsigned_t<T>;
  U u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
  return static_cast<T>(u);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

inline std::vector<std::string_view> split_view(std::string_view s, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    parts.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

inline double parse_double(std::string_view tok, std::size_t line) {
  while (!tok.empty() && (tok.front() == ' ' || tok.front() == '\t')) tok.remove_prefix(1);
  while (!tok.empty() && (tok.back() == ' ' || tok.back() == '\t' || tok.back() == '\r')) tok.remove_suffix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc{} || ptr != tok.data() + tok.size()) {
    throw FormatError("csv line " + std::to_string(line) + ": cannot parse '" + std::string(tok) + "'");
  }
  return v;
}

}  // namespace detail

inline std::string encode_dataset_bin(const Dataset& d) {
  std::string out;
  out.reserve(kDatasetHeaderBytes + d.size() * (1 + 4 * d.feature_dim()));
  out.append(kDatasetMagic.data(), kDatasetMagic.size());
  detail::put_le<std::uint32_t>(out, kDatasetVersion);
  detail::put_le<std::uint64_t>(out, d.size());
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d.feature_dim()));
  for (auto y : d.labels) out.push_back(static_cast<char>(y));
  for (Eigen::Index r = 0; r < d.features.rows(); ++r) {
    for (Eigen::Index c = 0; c < d.features.cols(); ++c) {
      detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(d.features(r, c))));
    }
  }
  return out;
}

inline Dataset decode_dataset_bin(std::string_view bytes, std::string name = {}) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < kDatasetHeaderBytes || std::memcmp(p, kDatasetMagic.data(), 4) != 0) {
    throw FormatError("dataset: bad magic");
  }
  const auto version = detail::get_le<std::uint32_t>(p + 4);
  if (version != kDatasetVersion) throw FormatError("dataset: unsupported version " + std::to_string(version));
  const auto n = detail::get_le<std::uint64_t>(p + 8);
  const auto dim = detail::get_le<std::uint32_t>(p + 16);
  const std::uint64_t expect = kDatasetHeaderBytes + n + n * dim * 4ULL;
  if (bytes.size() != expect) {
    throw DimensionError("dataset: payload is " + std::to_string(bytes.size()) + " bytes, header implies " +
                         std::to_string(expect));
  }
  std::vector<std::uint8_t> labels(p + kDatasetHeaderBytes, p + kDatasetHeaderBytes + n);
  Matrix f(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  const unsigned char* q = p + kDatasetHeaderBytes + n;
  for (Eigen::Index r = 0; r < f.rows(); ++r) {
    for (Eigen::Index c = 0; c < f.cols(); ++c, q += 4) {
      f(r, c) = static_cast<double>(std::bit_cast<float>(detail::get_le<std::uint32_t>(q)));
    }
  }
  return Dataset(std::move(f), std::move(labels), std::move(name));
}

inline std::string encode_dataset_csv(const Dataset& d) {
  std::string out;
  for (std::size_t c = 0; c < d.feature_dim(); ++c) out += "f" + std::to_string(c) + ",";
  out += "label\n";
  std::array<char, 32> buf{};
  for (Eigen::Index r = 0; r < d.features.rows(); ++r) {
    for (Eigen::Index c = 0; c < d.features.cols(); ++c) {
      const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), d.features(r, c));
      out.append(buf.data(), res.ptr);
      out.push_back(',');
    }
    out += std::to_string(d.labels[static_cast<std::size_t>(r)]);
    out.push_back('\n');
  }
  return out;
}

inline Dataset decode_dataset_csv(std::string_view text, std::string name = {}) {
  auto lines = detail::split_view(text, '\n');
  while (!lines.empty() && (lines.back().empty() || lines.back() == "\r")) lines.pop_back();
  if (lines.empty()) throw FormatError("csv: missing header");
  auto header = detail::split_view(lines[0], ',');
  auto last = header.back();
  if (!last.empty() && last.back() == '\r') last.remove_suffix(1);
  if (last != "label") throw FormatError("csv: last header column must be 'label'");
  const std::size_t dim = header.size() - 1;
  const std::size_t n = lines.size() - 1;
  Matrix f(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  std::vector<std::uint8_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto cells = detail::split_view(lines[i + 1], ',');
    if (cells.size() != dim + 1) {
      throw DimensionError("csv line " + std::to_string(i + 2) + ": " + std::to_string(cells.size()) +
                           " columns, header has " + std::to_string(dim + 1));
    }
    for (std::size_t c = 0; c < dim; ++c) {
      f(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = detail::parse_double(cells[c], i + 2);
    }
    const double y = detail::parse_double(cells[dim], i + 2);
    if (y != 0.0 && y != 1.0) throw ValueError("csv line " + std::to_string(i + 2) + ": label outside {0,1}");
    labels[i] = static_cast<std::uint8_t>(y);
  }
  return Dataset(std::move(f), std::move(labels), std::move(name));
}

inline Dataset load_dataset(const std::string& path, DataFormat fmt) {
  const auto bytes = detail::read_file(path);
  return fmt == DataFormat::csv ? decode_dataset_csv(bytes, path) : decode_dataset_bin(bytes, path);
}

inline Dataset load_dataset(const std::string& path) { return load_dataset(path, format_from_path(path)); }

inline void save_dataset(const Dataset& d, const std::string& path, DataFormat fmt) {
  detail::write_file(path, fmt == DataFormat::csv ? encode_dataset_csv(d) : encode_dataset_bin(d));
}

inline void save_dataset(const Dataset& d, const std::string& path) { save_dataset(d, path, format_from_path(path)); }

// ---------------------------------------------------------------------------
// Synthetic two-class data.
// ---------------------------------------------------------------------------
struct SynthConfig {
  std::size_t n_samples = 10000;
  std::size_t n_features = 64;
  double class_separation = 3.0;
  double sparsity = 0.1;
  std::uint64_t seed = 0;
};

/// Sparse, non-negative features. Every feature is active with probability
/// 1 - sparsity; an active value is max(0, 1 + y * gap_j + N(0,1)). A small
/// block of "strong" features (1/32 of the columns, at least one) carries
/// gap_j = class_separation, the rest carry gap_j = class_separation / 4.
/// Values are rounded to float32 so the binary format stores them losslessly.
inline Dataset synth_gen(const SynthConfig& cfg) {
  if (cfg.n_samples == 0 || cfg.n_features == 0) throw ValueError("synth_gen: n_samples and n_features must be > 0");
  if (!(cfg.class_separation >= 0.0)) throw ValueError("synth_gen: class_separation must be >= 0");
  if (!(cfg.sparsity >= 0.0 && cfg.sparsity <= 1.0)) throw ValueError("synth_gen: sparsity must be in [0,1]");

  std::mt19937_64 layout_rng(mix_seed(cfg.seed, 0));
  std::vector<std::size_t> perm(cfg.n_features);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), layout_rng);
  const std::size_t n_strong = std::max<std::size_t>(1, cfg.n_features / 32);
  std::vector<double> gap(cfg.n_features, cfg.class_separation / 4.0);
  for (std::size_t k = 0; k < n_strong; ++k) gap[perm[k]] = cfg.class_separation;

  std::vector<std::uint8_t> labels(cfg.n_samples);
  for (std::size_t i = 0; i < cfg.n_samples; ++i) labels[i] = static_cast<std::uint8_t>(i < cfg.n_samples / 2 ? 0 : 1);
  std::shuffle(labels.begin(), labels.end(), layout_rng);

  std::mt19937_64 rng(mix_seed(cfg.seed, 1));
  std::normal_distribution<double> noise(0.0, 1.0);
  std::bernoulli_distribution active(1.0 - cfg.sparsity);
  Matrix f(static_cast<Eigen::Index>(cfg.n_samples), static_cast<Eigen::Index>(cfg.n_features));
  for (std::size_t i = 0; i < cfg.n_samples; ++i) {
    for (std::size_t j = 0; j < cfg.n_features; ++j) {
      const bool on = active(rng);
      const double z = noise(rng);
      const double v = on ? std::max(0.0, 1.0 + labels[i] * gap[j] + z) : 0.0;
      f(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = static_cast<double>(static_cast<float>(v));
    }
  }
  return Dataset(std::move(f), std::move(labels), "synth");
}

// ---------------------------------------------------------------------------
// Min-max normalization into [0,1]; constant columns map to 0; values outside
// the fitted range are clamped.
// ---------------------------------------------------------------------------
inline Dataset apply_normalize(const Dataset& d, const NormStats& s) {
  require_dim(d.feature_dim(), s.dim(), "apply_normalize");
  Matrix f(d.features.rows(), d.features.cols());
  for (Eigen::Index c = 0; c < f.cols(); ++c) {
    const double lo = s.min[c];
    const double range = s.max[c] - lo;
    for (Eigen::Index r = 0; r < f.rows(); ++r) {
      f(r, c) = range > 0.0 ? std::clamp((d.features(r, c) - lo) / range, 0.0, 1.0) : 0.0;
    }
  }
  return Dataset(std::move(f), d.labels, d.name);
}

inline std::pair<Dataset, NormStats> fit_normalize(const Dataset& d) {
  if (d.size() == 0) throw ValueError("fit_normalize: empty dataset");
  NormStats s{d.features.colwise().minCoeff().transpose(), d.features.colwise().maxCoeff().transpose()};
  return {apply_normalize(d, s), std::move(s)};
}

// ---------------------------------------------------------------------------
// Stratified split. Within each class rows are shuffled with `seed`, then cut
// by rounded fractions; each split keeps original row order.
// ---------------------------------------------------------------------------
inline std::tuple<Dataset, Dataset, Dataset> split(const Dataset& d, std::array<double, 3> fractions,
                                                   std::uint64_t seed) {
  for (double f : fractions) {
    if (!(f > 0.0)) throw ValueError("split: fractions must be positive");
  }
  if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9) {
    throw ValueError("split: fractions must sum to 1");
  }
  std::array<std::vector<std::size_t>, 3> parts;
  std::mt19937_64 rng(mix_seed(seed, 2));
  for (std::uint8_t cls : {std::uint8_t{0}, std::uint8_t{1}}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (d.labels[i] == cls) idx.push_back(i);
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n = static_cast<double>(idx.size());
    const auto n_train = std::min(idx.size(), static_cast<std::size_t>(std::llround(n * fractions[0])));
    const auto n_val = std::min(idx.size() - n_train, static_cast<std::size_t>(std::llround(n * fractions[1])));
    parts[0].insert(parts[0].end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    parts[1].insert(parts[1].end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                    idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    parts[2].insert(parts[2].end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
  }
  for (auto& p : parts) std::sort(p.begin(), p.end());
  return {gather_rows(d, parts[0]), gather_rows(d, parts[1]), gather_rows(d, parts[2])};
}

}  // namespace advmb
