// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "speechmoe/errors.hpp"
#include "speechmoe/trainer.hpp"

namespace speechmoe {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::vector<double> parse_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_double(key, trim(item)));
  return out;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void RunConfig::sync_data_dims() {
  synth.vocab = model.vocab;
  synth.d_feat = model.d_feat;
  synth.n_domains = model.n_domains;
  synth.n_accents = model.n_accents;
}

void apply_config_line(RunConfig& cfg, const std::string& key, const std::string& v) {
  ModelConfig& m = cfg.model;
  SynthConfig& s = cfg.synth;
  if (key == "n_moe_layers") m.n_moe_layers = parse_size(key, v);
  else if (key == "n_memory_layers") m.n_memory_layers = parse_size(key, v);
  else if (key == "attention_every") m.attention_every = parse_size(key, v);
  else if (key == "n_experts") m.n_experts = parse_size(key, v);
  else if (key == "d_model") m.d_model = parse_size(key, v);
  else if (key == "expert_hidden") m.expert_hidden = parse_size(key, v);
  else if (key == "d_att") m.d_att = parse_size(key, v);
  else if (key == "memory_order") m.memory_order = parse_size(key, v);
  else if (key == "embed_memory_layers") m.embed_memory_layers = parse_size(key, v);
  else if (key == "d_c") m.d_c = parse_size(key, v);
  else if (key == "d_a") m.d_a = parse_size(key, v);
  else if (key == "d_d") m.d_d = parse_size(key, v);
  else if (key == "router") {
    if (v == "moe1") m.router = RouterVariant::kBaseline;
    else if (v == "moe2") m.router = RouterVariant::kAugmented;
    else throw ConfigError("router: expected moe1 or moe2, got '" + v + "'");
  }
  else if (key == "moe_residual") m.moe_residual = parse_bool(key, v);
  else if (key == "vocab") m.vocab = parse_size(key, v);
  else if (key == "d_feat") m.d_feat = parse_size(key, v);
  else if (key == "n_domains") m.n_domains = parse_size(key, v);
  else if (key == "n_accents") m.n_accents = parse_size(key, v);
  else if (key == "alpha") m.weights.alpha = parse_double(key, v);
  else if (key == "beta") m.weights.beta = parse_double(key, v);
  else if (key == "gamma") m.weights.gamma = parse_double(key, v);
  else if (key == "eta") m.weights.eta = parse_double(key, v);
  else if (key == "theta") m.weights.theta = parse_double(key, v);
  else if (key == "detach_embeddings") m.detach_embeddings = parse_bool(key, v);
  else if (key == "aux_loss_scope") {
    if (v == "global") m.aux_scope = AuxLossScope::kGlobal;
    else if (v == "per_worker") m.aux_scope = AuxLossScope::kPerWorker;
    else throw ConfigError("aux_loss_scope: expected global or per_worker, got '" + v + "'");
  }
  else if (key == "n_workers") m.n_workers = parse_size(key, v);
  else if (key == "seed") m.seed = parse_u64(key, v);
  else if (key == "learning_rate") m.learning_rate = parse_double(key, v);
  else if (key == "max_grad_norm") m.max_grad_norm = parse_double(key, v);
  else if (key == "batch_size") m.batch_size = parse_size(key, v);
  else if (key == "steps") m.steps = parse_size(key, v);
  else if (key == "frames_per_second") m.frames_per_second = parse_size(key, v);
  else if (key == "t_min") s.t_min = parse_size(key, v);
  else if (key == "t_max") s.t_max = parse_size(key, v);
  else if (key == "labels_min") s.labels_min = parse_size(key, v);
  else if (key == "labels_max") s.labels_max = parse_size(key, v);
  else if (key == "pattern_scale") s.pattern_scale = parse_double(key, v);
  else if (key == "domain_bias_scale") s.domain_bias_scale = parse_double(key, v);
  else if (key == "accent_shift_scale") s.accent_shift_scale = parse_double(key, v);
  else if (key == "noise_scale") s.noise_scale = parse_double(key, v);
  else if (key == "domain_prior") s.domain_prior = parse_list(key, v);
  else if (key == "accent_prior") s.accent_prior = parse_list(key, v);
  else if (key == "data_seed") s.seed = parse_u64(key, v);
  else if (key == "corpus_size") cfg.corpus_size = parse_size(key, v);
  else if (key == "test_fraction") cfg.test_fraction = parse_double(key, v);
  else throw ConfigError("unknown config key '" + key + "'");
}

RunConfig parse_config(std::istream& is, RunConfig base) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    }
    apply_config_line(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  base.sync_data_dims();
  return base;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  return parse_config(is);
}

std::string model_config_text(const ModelConfig& m) {
  std::ostringstream os;
  os << "n_moe_layers=" << m.n_moe_layers << "\n"
     << "n_memory_layers=" << m.n_memory_layers << "\n"
     << "attention_every=" << m.attention_every << "\n"
     << "n_experts=" << m.n_experts << "\n"
     << "d_model=" << m.d_model << "\n"
     << "expert_hidden=" << m.expert_hidden << "\n"
     << "d_att=" << m.d_att << "\n"
     << "memory_order=" << m.memory_order << "\n"
     << "embed_memory_layers=" << m.embed_memory_layers << "\n"
     << "d_c=" << m.d_c << "\n"
     << "d_a=" << m.d_a << "\n"
     << "d_d=" << m.d_d << "\n"
     << "router=" << (m.augmented() ? "moe2" : "moe1") << "\n"
     << "moe_residual=" << (m.moe_residual ? "true" : "false") << "\n"
     << "vocab=" << m.vocab << "\n"
     << "d_feat=" << m.d_feat << "\n"
     << "n_domains=" << m.n_domains << "\n"
     << "n_accents=" << m.n_accents << "\n"
     << "alpha=" << fmt_double(m.weights.alpha) << "\n"
     << "beta=" << fmt_double(m.weights.beta) << "\n"
     << "gamma=" << fmt_double(m.weights.gamma) << "\n"
     << "eta=" << fmt_double(m.weights.eta) << "\n"
     << "theta=" << fmt_double(m.weights.theta) << "\n"
     << "detach_embeddings=" << (m.detach_embeddings ? "true" : "false") << "\n"
     << "aux_loss_scope=" << (m.aux_scope == AuxLossScope::kGlobal ? "global" : "per_worker") << "\n"
     << "n_workers=" << m.n_workers << "\n"
     << "seed=" << m.seed << "\n"
     << "learning_rate=" << fmt_double(m.learning_rate) << "\n"
     << "max_grad_norm=" << fmt_double(m.max_grad_norm) << "\n"
     << "batch_size=" << m.batch_size << "\n"
     << "steps=" << m.steps << "\n"
     << "frames_per_second=" << m.frames_per_second << "\n";
  return os.str();
}

ModelConfig parse_model_config_text(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is).model;
}

}  // namespace speechmoe
