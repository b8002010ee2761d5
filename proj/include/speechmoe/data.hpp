// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "speechmoe/tensor.hpp"

namespace speechmoe {

struct Utterance {
  Tensor frames;  // [T x d_feat]
  std::vector<std::int32_t> labels;
  std::uint32_t domain_id = 0;
  std::uint32_t accent_id = 0;
  std::string utt_id;

  std::size_t num_frames() const { return frames.rows(); }
  friend bool operator==(const Utterance&, const Utterance&) = default;
};

// Synthetic multi-domain, multi-accent corpus.
//   frame = pattern[grapheme] + accent_shift[accent][grapheme] + domain_bias[domain] + noise
// Silence frames (between and around graphemes) use a shared silence
// pattern, the domain bias, and noise.
struct SynthConfig {
  std::size_t n_domains = 6;
  std::size_t n_accents = 4;
  std::size_t vocab = 8;
  std::size_t d_feat = 24;
  std::size_t t_min = 20;
  std::size_t t_max = 40;
  std::size_t labels_min = 3;
  std::size_t labels_max = 8;
  double pattern_scale = 1.0;
  double domain_bias_scale = 1.0;
  double accent_shift_scale = 0.8;
  double noise_scale = 0.3;
  std::vector<double> domain_prior;  // empty = uniform
  std::vector<double> accent_prior;  // empty = uniform
  std::uint64_t seed = 1;

  void validate() const;
};

// Deterministic in (config, count). The fixed patterns/biases come from
// `config.seed` so corpora generated with different `stream` values share
// the same acoustic conditions (used for train/test pairs).
std::vector<Utterance> generate(const SynthConfig& config, std::size_t count,
                                std::uint64_t stream = 0);

// Deterministic split by FNV-1a hash of utt_id.
bool is_held_out(const std::string& utt_id, double fraction);

// Corpus file: "SMOECORP", u32 version, u64 count, then per utterance:
// u32 id length + bytes, u32 T, u32 d_feat, u32 label count, u32 domain,
// u32 accent, T*d_feat f64 frames, label-count i32 labels (all little-endian).
void write_corpus(const std::filesystem::path& path, const std::vector<Utterance>& corpus);
std::vector<Utterance> read_corpus(const std::filesystem::path& path);
void write_corpus(std::ostream& os, const std::vector<Utterance>& corpus);
std::vector<Utterance> read_corpus(std::istream& is);

}  // namespace speechmoe
