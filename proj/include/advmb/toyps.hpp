#pragma once

// A miniature problem space: programs made of named byte sections plus an
// opaque payload tag, a fixed feature map into [0,1]^259, and padding
// transforms that never touch the tag.

#include "advmb/attacks.hpp"

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace advmb::toy {

inline constexpr std::size_t kFeatureDim = 259;
inline constexpr std::size_t kSectionCountIndex = 256;
inline constexpr std::size_t kLogSizeIndex = 257;
inline constexpr std::size_t kTagIndex = 258;
inline constexpr double kSectionScale = 32.0;
inline constexpr double kLogSizeScale = 20.0;
inline constexpr std::size_t kDefaultMaxSize = std::size_t{1} << 20;

struct Section {
  std::string name;
  std::vector<std::uint8_t> bytes;

  bool operator==(const Section&) const = default;
};

struct ToyProgram {
  std::vector<Section> sections;
  std::vector<std::uint8_t> payload_tag;

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& s : sections) n += s.bytes.size();
    return n;
  }

  void validate(std::size_t max_size = kDefaultMaxSize) const {
    if (sections.empty()) throw ConstraintError("toy program needs at least one section");
    if (total_size() > max_size) throw ConstraintError("toy program exceeds size limit");
    for (const auto& s : sections) {
      if (s.name.size() > 255) throw ConstraintError("section name longer than 255 bytes");
    }
    if (payload_tag.size() > 0xFFFF) throw ConstraintError("payload tag longer than 65535 bytes");
  }

  bool operator==(const ToyProgram&) const = default;
};

/// The functionality-preservation check: a transform is valid iff the payload tag is intact.
inline bool omega_valid(const ToyProgram& original, const ToyProgram& transformed) {
  return original.payload_tag == transformed.payload_tag && !transformed.sections.empty();
}

inline double size_feature(std::size_t total) {
  if (total == 0) return 0.0;
  return std::clamp(std::log2(static_cast<double>(total)) / kLogSizeScale, 0.0, 1.0);
}

inline double section_feature(std::size_t count) {
  return std::min(static_cast<double>(count) / kSectionScale, 1.0);
}

/// Byte histogram (sums to 1), section count / 32, log2(size) / 20, tag presence.
inline Vector phi(const ToyProgram& z) {
  Vector x = Vector::Zero(static_cast<Eigen::Index>(kFeatureDim));
  std::array<std::uint64_t, 256> counts{};
  for (const auto& s : z.sections) {
    for (auto b : s.bytes) ++counts[b];
  }
  const auto total = z.total_size();
  if (total > 0) {
    for (std::size_t b = 0; b < 256; ++b) {
      x[static_cast<Eigen::Index>(b)] = static_cast<double>(counts[b]) / static_cast<double>(total);
    }
  }
  x[kSectionCountIndex] = section_feature(z.sections.size());
  x[kLogSizeIndex] = size_feature(total);
  x[kTagIndex] = z.payload_tag.empty() ? 0.0 : 1.0;
  return x;
}

inline Dataset phi_dataset(std::span<const ToyProgram> programs, std::span<const std::uint8_t> labels) {
  require_dim(labels.size(), programs.size(), "phi_dataset");
  Matrix f(static_cast<Eigen::Index>(programs.size()), static_cast<Eigen::Index>(kFeatureDim));
  for (std::size_t i = 0; i < programs.size(); ++i) f.row(static_cast<Eigen::Index>(i)) = phi(programs[i]).transpose();
  return Dataset(std::move(f), std::vector<std::uint8_t>(labels.begin(), labels.end()), "toy");
}

/// Appends a new section holding n_bytes copies of byte_val.
inline ToyProgram pad_attack(const ToyProgram& z, std::size_t n_bytes, std::uint8_t byte_val,
                             std::size_t max_size = kDefaultMaxSize) {
  if (z.total_size() + n_bytes > max_size) throw ConstraintError("pad_attack: result exceeds size limit");
  ToyProgram out = z;
  out.sections.push_back({".pad" + std::to_string(z.sections.size()), std::vector<std::uint8_t>(n_bytes, byte_val)});
  return out;
}

/// Upper bound on |phi(T(z)) - phi(z)|_inf when T appends `new_sections`
/// sections holding `added` bytes in total to a program of `size` bytes and
/// `sections` sections. Every histogram entry moves by at most
/// added / (size + added); the other terms are the exact feature shifts.
inline double padding_displacement_bound(std::size_t size, std::size_t sections, std::size_t added,
                                         std::size_t new_sections) {
  const double hist = added == 0 ? 0.0 : static_cast<double>(added) / static_cast<double>(size + added);
  const double sec = section_feature(sections + new_sections) - section_feature(sections);
  const double log_size = size_feature(size + added) - size_feature(size);
  return std::max({hist, sec, log_size});
}

/// Model input for a program: phi followed by the ensemble's normalization.
inline Vector model_input(const Ensemble& e, const ToyProgram& z) {
  const Vector x = phi(z);
  const Dataset one(Matrix(x.transpose()), {0});
  return apply_normalize(one, e.norm_stats).features.row(0).transpose();
}

inline double score(const Ensemble& e, const ToyProgram& z) { return posterior_predict(e, model_input(e, z)); }

struct GreedyResult {
  ToyProgram program;
  bool evaded = false;
  std::size_t bytes_added = 0;
};

/// Gradient-free search: each move appends the (byte_val, step) padding block
/// that lowers the malware score most (ties go to the lowest byte value).
/// Stops on evasion, when the budget is spent, or when no block helps.
inline GreedyResult greedy_pad_search(const Ensemble& e, const ToyProgram& z, std::size_t budget, std::size_t step,
                                      std::span<const std::uint8_t> byte_candidates,
                                      std::size_t max_size = kDefaultMaxSize) {
  GreedyResult r{z, false, 0};
  double current = score(e, z);
  if (current < kThreshold) {
    r.evaded = true;
    return r;
  }
  if (step == 0 || byte_candidates.empty()) return r;
  std::vector<std::uint8_t> cands(byte_candidates.begin(), byte_candidates.end());
  std::sort(cands.begin(), cands.end());
  while (r.bytes_added + step <= budget && r.program.total_size() + step <= max_size) {
    double best = current;
    std::optional<ToyProgram> best_prog;
    for (auto b : cands) {
      auto cand = pad_attack(r.program, step, b, max_size);
      const double s = score(e, cand);
      if (s < best) {
        best = s;
        best_prog = std::move(cand);
      }
    }
    if (!best_prog) break;
    r.program = std::move(*best_prog);
    r.bytes_added += step;
    current = best;
    if (current < kThreshold) {
      r.evaded = true;
      break;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Subset check: every problem-space evasion must map to a feature-space
// evasion inside the feature-space constraint set.
// ---------------------------------------------------------------------------
enum class TransformKind { pad, greedy };

struct Lemma1Config {
  TransformKind kind = TransformKind::pad;
  std::size_t pad_bytes = 1000;
  std::uint8_t byte_val = 0xA9;
  std::size_t greedy_budget = 1000;
  std::size_t greedy_step = 250;
  std::vector<std::uint8_t> greedy_candidates{0x00, 0xA9, 0xFF};
  // Feature-space constraint set: |delta|_inf <= upsilon_eps and
  // delta_lb <= delta <= delta_ub (single value = all features).
  double upsilon_eps = 0.0;
  std::vector<double> delta_lb{-1.0};
  std::vector<double> delta_ub{1.0};
  std::size_t max_size = kDefaultMaxSize;
};

struct Lemma1Report {
  std::size_t programs = 0;
  std::size_t omega_invalid = 0;
  std::size_t detected_clean = 0;
  std::size_t detected_after = 0;
  std::size_t evasions = 0;
  std::size_t violations = 0;
  double max_linf = 0.0;
  double upsilon_eps = 0.0;

  double detection_rate_after() const {
    return programs == 0 ? 0.0 : static_cast<double>(detected_after) / static_cast<double>(programs);
  }
};

inline ToyProgram apply_transform(const Ensemble& e, const ToyProgram& z, const Lemma1Config& cfg) {
  if (cfg.kind == TransformKind::pad) return pad_attack(z, cfg.pad_bytes, cfg.byte_val, cfg.max_size);
  return greedy_pad_search(e, z, cfg.greedy_budget, cfg.greedy_step, cfg.greedy_candidates, cfg.max_size).program;
}

/// Worst-case displacement of the configured transform over `programs`.
inline double analytic_bound(std::span<const ToyProgram> programs, const Lemma1Config& cfg) {
  double bound = 0.0;
  for (const auto& z : programs) {
    const std::size_t added = cfg.kind == TransformKind::pad ? cfg.pad_bytes : cfg.greedy_budget;
    const std::size_t new_sections =
        cfg.kind == TransformKind::pad ? 1 : (cfg.greedy_step == 0 ? 0 : cfg.greedy_budget / cfg.greedy_step);
    bound = std::max(bound, padding_displacement_bound(z.total_size(), z.sections.size(), added, new_sections));
  }
  return bound;
}

/// Programs are all labeled malware.
inline Lemma1Report lemma1_check(const Ensemble& e, std::span<const ToyProgram> programs, const Lemma1Config& cfg) {
  Lemma1Report rep;
  rep.upsilon_eps = cfg.upsilon_eps;
  constexpr double tol = 1e-12;
  auto lower = [&](std::size_t j) { return cfg.delta_lb.size() == 1 ? cfg.delta_lb[0] : cfg.delta_lb.at(j); };
  auto upper = [&](std::size_t j) { return cfg.delta_ub.size() == 1 ? cfg.delta_ub[0] : cfg.delta_ub.at(j); };
  for (const auto& z : programs) {
    ++rep.programs;
    const Vector x = model_input(e, z);
    if (posterior_predict(e, x) >= kThreshold) ++rep.detected_clean;
    const ToyProgram zp = apply_transform(e, z, cfg);
    if (!omega_valid(z, zp)) {
      ++rep.omega_invalid;
      continue;
    }
    const Vector xp = model_input(e, zp);
    const Vector delta = xp - x;
    const double linf = delta.size() > 0 ? delta.cwiseAbs().maxCoeff() : 0.0;
    rep.max_linf = std::max(rep.max_linf, linf);
    const bool evaded = posterior_predict(e, xp) < kThreshold;
    if (!evaded) {
      ++rep.detected_after;
      continue;
    }
    ++rep.evasions;
    bool inside = linf <= cfg.upsilon_eps + tol;
    for (Eigen::Index j = 0; inside && j < delta.size(); ++j) {
      const auto ju = static_cast<std::size_t>(j);
      inside = delta[j] >= lower(ju) - tol && delta[j] <= upper(ju) + tol;
    }
    const Vector x_feature = x + delta;
    const bool feature_evades = posterior_predict(e, x_feature) < kThreshold;
    if (!inside || !feature_evades) ++rep.violations;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// TPRG container: "TPRG" | u32 version | u32 n_sections |
//   per section: u8 name_len | name | u64 len | bytes
//   | u16 tag_len | tag            (integers little-endian)
// ---------------------------------------------------------------------------
inline constexpr std::uint32_t kProgramVersion = 1;

inline std::string encode_program(const ToyProgram& z) {
  z.validate(std::numeric_limits<std::size_t>::max());
  std::string out = "TPRG";
  advmb::detail::put_le<std::uint32_t>(out, kProgramVersion);
  advmb::detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(z.sections.size()));
  for (const auto& s : z.sections) {
    out.push_back(static_cast<char>(s.name.size()));
    out += s.name;
    advmb::detail::put_le<std::uint64_t>(out, s.bytes.size());
    out.append(reinterpret_cast<const char*>(s.bytes.data()), s.bytes.size());
  }
  advmb::detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(z.payload_tag.size()));
  out.append(reinterpret_cast<const char*>(z.payload_tag.data()), z.payload_tag.size());
  return out;
}

inline ToyProgram decode_program(std::string_view bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (bytes.size() - pos < n) throw FormatError("toy program: truncated");
  };
  need(12);
  if (bytes.substr(0, 4) != "TPRG") throw FormatError("toy program: bad magic");
  if (advmb::detail::get_le<std::uint32_t>(p + 4) != kProgramVersion) throw FormatError("toy program: unsupported version");
  const auto n_sections = advmb::detail::get_le<std::uint32_t>(p + 8);
  pos = 12;
  ToyProgram z;
  for (std::uint32_t s = 0; s < n_sections; ++s) {
    need(1);
    const std::size_t name_len = p[pos++];
    need(name_len + 8);
    Section sec;
    sec.name.assign(bytes.substr(pos, name_len));
    pos += name_len;
    const auto len = advmb::detail::get_le<std::uint64_t>(p + pos);
    pos += 8;
    need(len);
    sec.bytes.assign(p + pos, p + pos + len);
    pos += len;
    z.sections.push_back(std::move(sec));
  }
  need(2);
  const auto tag_len = advmb::detail::get_le<std::uint16_t>(p + pos);
  pos += 2;
  need(tag_len);
  z.payload_tag.assign(p + pos, p + pos + tag_len);
  pos += tag_len;
  if (pos != bytes.size()) throw FormatError("toy program: trailing bytes");
  return z;
}

inline void save_program(const ToyProgram& z, const std::string& path) { advmb::detail::write_file(path, encode_program(z)); }

inline ToyProgram load_program(const std::string& path) { return decode_program(advmb::detail::read_file(path)); }

// ---------------------------------------------------------------------------
// Toy corpus. Every program has a ".text" section of code-like bytes
// (0x00-0x7F) and a 4-byte payload tag.
//   malware: a ".pack" section of 0xCC filling 15-45% of the program.
//   benign:  a ".rsrc" section of 0xA9 filling 0.5-2% and a ".cc" section of
//            0xCC filling 0-18%.
// The 0xA9 filler separates the classes perfectly but is cheap to imitate
// by padding; the 0xCC mass overlaps between classes but padding barely moves it.
// ---------------------------------------------------------------------------
struct ToyCorpusConfig {
  std::size_t n_programs = 1000;
  std::size_t min_size = 4000;
  std::size_t max_size = 8000;
  double malware_fraction = 0.5;
  std::uint64_t seed = 0;
};

struct ToyCorpus {
  std::vector<ToyProgram> programs;
  std::vector<std::uint8_t> labels;
};

inline ToyCorpus make_toy_corpus(const ToyCorpusConfig& cfg) {
  if (cfg.min_size == 0 || cfg.min_size > cfg.max_size) throw ConfigError("toy corpus: need 0 < min_size <= max_size");
  ToyCorpus c;
  std::mt19937_64 rng(mix_seed(cfg.seed, 7));
  std::uniform_int_distribution<std::size_t> size_dist(cfg.min_size, cfg.max_size);
  std::uniform_int_distribution<int> code_byte(0x00, 0x7F);
  std::uniform_int_distribution<int> any_byte(0x00, 0xFF);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto n_mal = static_cast<std::size_t>(std::llround(cfg.malware_fraction * static_cast<double>(cfg.n_programs)));
  for (std::size_t i = 0; i < cfg.n_programs; ++i) c.labels.push_back(i < n_mal ? 1 : 0);
  std::shuffle(c.labels.begin(), c.labels.end(), rng);
  for (auto y : c.labels) {
    const std::size_t size = size_dist(rng);
    ToyProgram z;
    std::size_t used = 0;
    auto constant_section = [&](const char* name, double frac, std::uint8_t b) {
      const auto n = static_cast<std::size_t>(frac * static_cast<double>(size));
      z.sections.push_back({name, std::vector<std::uint8_t>(n, b)});
      used += n;
    };
    if (y == 1) {
      constant_section(".pack", 0.15 + 0.30 * unit(rng), 0xCC);
    } else {
      constant_section(".rsrc", 0.005 + 0.015 * unit(rng), 0xA9);
      constant_section(".cc", 0.18 * unit(rng), 0xCC);
    }
    Section text{".text", std::vector<std::uint8_t>(size - used)};
    for (auto& b : text.bytes) b = static_cast<std::uint8_t>(code_byte(rng));
    z.sections.insert(z.sections.begin(), std::move(text));
    for (int k = 0; k < 4; ++k) z.payload_tag.push_back(static_cast<std::uint8_t>(any_byte(rng)));
    c.programs.push_back(std::move(z));
  }
  return c;
}

}  // namespace advmb::toy
