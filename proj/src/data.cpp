// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include "speechmoe/data.hpp"

#include <cstdio>
#include <fstream>
#include <numeric>

#include "speechmoe/binary_io.hpp"
#include "speechmoe/errors.hpp"
#include "speechmoe/rng.hpp"

namespace speechmoe {

namespace {

constexpr char kCorpusMagic[9] = "SMOECORP";
constexpr std::uint32_t kCorpusVersion = 1;

void check_prior(const std::vector<double>& prior, std::size_t n, const char* name) {
  if (prior.empty()) return;
  if (prior.size() != n) {
    throw ConfigError(std::string(name) + " has " + std::to_string(prior.size()) +
                      " entries, expected " + std::to_string(n));
  }
  double s = 0.0;
  for (double p : prior) {
    if (!(p >= 0.0)) throw ConfigError(std::string(name) + " entries must be >= 0");
    s += p;
  }
  if (!(s > 0.0)) throw ConfigError(std::string(name) + " must have positive mass");
}

std::size_t sample_categorical(Rng& rng, const std::vector<double>& prior, std::size_t n) {
  if (prior.empty()) return uniform_index(rng, n);
  const double total = std::accumulate(prior.begin(), prior.end(), 0.0);
  double u = uniform01(rng) * total;
  for (std::size_t i = 0; i < n; ++i) {
    if (u < prior[i]) return i;
    u -= prior[i];
  }
  return n - 1;
}

struct Acoustics {
  std::vector<Tensor> pattern;                    // per grapheme [d_feat]
  Tensor silence;                                 // [d_feat]
  std::vector<std::vector<Tensor>> accent_shift;  // [accent][grapheme]
  std::vector<Tensor> domain_bias;                // per domain
};

Tensor random_vector(Rng& rng, std::size_t d, double scale) {
  Tensor v({d});
  for (auto& x : v.data()) x = scale * normal(rng);
  return v;
}

Acoustics make_acoustics(const SynthConfig& cfg) {
  Rng rng(cfg.seed);
  Acoustics a;
  for (std::size_t g = 0; g < cfg.vocab; ++g) a.pattern.push_back(random_vector(rng, cfg.d_feat, cfg.pattern_scale));
  a.silence = random_vector(rng, cfg.d_feat, cfg.pattern_scale);
  a.accent_shift.resize(cfg.n_accents);
  for (auto& per_g : a.accent_shift) {
    for (std::size_t g = 0; g < cfg.vocab; ++g) {
      per_g.push_back(random_vector(rng, cfg.d_feat, cfg.accent_shift_scale));
    }
  }
  for (std::size_t d = 0; d < cfg.n_domains; ++d) {
    a.domain_bias.push_back(random_vector(rng, cfg.d_feat, cfg.domain_bias_scale));
  }
  return a;
}

// Frame -> label index (or -1 for silence). Segments get one frame each,
// repeated labels get a separating silence frame, and the remaining frames
// are spread evenly over the 2n+1 slots (leading gap, seg, gap, ..., seg, gap).
std::vector<int> alignment(const std::vector<std::int32_t>& labels, std::size_t t_len) {
  const std::size_t n = labels.size();
  const std::size_t slots = 2 * n + 1;
  std::vector<std::size_t> len(slots, 0);
  for (std::size_t i = 0; i < n; ++i) len[2 * i + 1] = 1;
  for (std::size_t i = 1; i < n; ++i) {
    if (labels[i] == labels[i - 1]) len[2 * i] = 1;
  }
  const std::size_t used = std::accumulate(len.begin(), len.end(), std::size_t{0});
  const std::size_t rest = t_len - used;
  for (std::size_t s = 0; s < slots; ++s) len[s] += rest / slots + (s < rest % slots ? 1 : 0);
  std::vector<int> out;
  out.reserve(t_len);
  for (std::size_t s = 0; s < slots; ++s) {
    const int tag = (s % 2 == 1) ? static_cast<int>(s / 2) : -1;
    out.insert(out.end(), len[s], tag);
  }
  return out;
}

}  // namespace

void SynthConfig::validate() const {
  if (vocab < 1) throw ConfigError("vocab must be >= 1");
  if (n_domains < 1 || n_accents < 1) throw ConfigError("n_domains and n_accents must be >= 1");
  if (d_feat < 1) throw ConfigError("d_feat must be >= 1");
  if (labels_min < 1 || labels_max < labels_min) throw ConfigError("need 1 <= labels_min <= labels_max");
  if (t_max < t_min) throw ConfigError("t_max must be >= t_min");
  if (t_min < 2 * labels_min + 1) throw ConfigError("t_min must be >= 2*labels_min+1 for CTC feasibility");
  if (noise_scale < 0 || pattern_scale < 0 || domain_bias_scale < 0 || accent_shift_scale < 0) {
    throw ConfigError("synthesis scales must be >= 0");
  }
  check_prior(domain_prior, n_domains, "domain_prior");
  check_prior(accent_prior, n_accents, "accent_prior");
}

std::vector<Utterance> generate(const SynthConfig& config, std::size_t count, std::uint64_t stream) {
  config.validate();
  if (count < 1) throw ConfigError("generate: count must be >= 1");
  const Acoustics ac = make_acoustics(config);
  Rng rng(config.seed * 0x9E3779B97F4A7C15ull + 0x632BE59BD9B4E019ull * (stream + 1));
  std::vector<Utterance> out;
  out.reserve(count);
  for (std::size_t u = 0; u < count; ++u) {
    Utterance utt;
    const std::size_t t_len = config.t_min + uniform_index(rng, config.t_max - config.t_min + 1);
    const std::size_t max_labels = std::min(config.labels_max, (t_len - 1) / 2);
    const std::size_t n_labels =
        config.labels_min + uniform_index(rng, max_labels - config.labels_min + 1);
    for (std::size_t i = 0; i < n_labels; ++i) {
      utt.labels.push_back(static_cast<std::int32_t>(uniform_index(rng, config.vocab)));
    }
    utt.domain_id = static_cast<std::uint32_t>(sample_categorical(rng, config.domain_prior, config.n_domains));
    utt.accent_id = static_cast<std::uint32_t>(sample_categorical(rng, config.accent_prior, config.n_accents));
    char id[64];
    std::snprintf(id, sizeof id, "s%llu-%llu-%06zu", static_cast<unsigned long long>(config.seed),
                  static_cast<unsigned long long>(stream), u);
    utt.utt_id = id;

    const auto align = alignment(utt.labels, t_len);
    utt.frames = Tensor({t_len, config.d_feat});
    const Tensor& bias = ac.domain_bias[utt.domain_id];
    for (std::size_t t = 0; t < t_len; ++t) {
      double* row = utt.frames.row(t);
      const int seg = align[t];
      for (std::size_t j = 0; j < config.d_feat; ++j) {
        double v = bias[j];
        if (seg < 0) {
          v += ac.silence[j];
        } else {
          const auto g = static_cast<std::size_t>(utt.labels[static_cast<std::size_t>(seg)]);
          v += ac.pattern[g][j] + ac.accent_shift[utt.accent_id][g][j];
        }
        row[j] = v;
      }
      if (config.noise_scale > 0.0) {
        for (std::size_t j = 0; j < config.d_feat; ++j) row[j] += config.noise_scale * normal(rng);
      }
    }
    out.push_back(std::move(utt));
  }
  return out;
}

bool is_held_out(const std::string& utt_id, double fraction) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : utt_id) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return static_cast<double>(h % 1000000ull) < fraction * 1e6;
}

// ---- serialization -----------------------------------------------------------------

void write_corpus(std::ostream& os, const std::vector<Utterance>& corpus) {
  os.write(kCorpusMagic, 8);
  binio::write<std::uint32_t>(os, kCorpusVersion);
  binio::write<std::uint64_t>(os, corpus.size());
  for (const auto& u : corpus) {
    binio::write_string(os, u.utt_id);
    binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(u.frames.rows()));
    binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(u.frames.cols()));
    binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(u.labels.size()));
    binio::write<std::uint32_t>(os, u.domain_id);
    binio::write<std::uint32_t>(os, u.accent_id);
    for (double v : u.frames.data()) binio::write<double>(os, v);
    for (auto l : u.labels) binio::write<std::int32_t>(os, l);
  }
  if (!os) throw IoError("failed writing corpus");
}

std::vector<Utterance> read_corpus(std::istream& is) {
  binio::expect_magic(is, kCorpusMagic);
  const auto version = binio::read<std::uint32_t>(is);
  if (version != kCorpusVersion) throw FormatError("unsupported corpus version " + std::to_string(version));
  const auto count = binio::read<std::uint64_t>(is);
  std::vector<Utterance> corpus;
  for (std::uint64_t i = 0; i < count; ++i) {
    Utterance u;
    u.utt_id = binio::read_string(is);
    const auto t_len = binio::read<std::uint32_t>(is);
    const auto d = binio::read<std::uint32_t>(is);
    const auto n_labels = binio::read<std::uint32_t>(is);
    u.domain_id = binio::read<std::uint32_t>(is);
    u.accent_id = binio::read<std::uint32_t>(is);
    if (t_len == 0 || d == 0) throw FormatError("utterance " + u.utt_id + " has an empty frame matrix");
    std::vector<double> frames(static_cast<std::size_t>(t_len) * d);
    for (auto& v : frames) v = binio::read<double>(is);
    u.frames = Tensor({t_len, d}, std::move(frames));
    u.labels.resize(n_labels);
    for (auto& l : u.labels) l = binio::read<std::int32_t>(is);
    corpus.push_back(std::move(u));
  }
  return corpus;
}

void write_corpus(const std::filesystem::path& path, const std::vector<Utterance>& corpus) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_corpus(os, corpus);
}

std::vector<Utterance> read_corpus(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_corpus(is);
}

}  // namespace speechmoe
