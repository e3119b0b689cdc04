// Copyright 2026 The DAFed Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "dafed/harness.hpp"

#include <fmt/format.h>
#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "dafed/disentangle.hpp"
#include "dafed/rng.hpp"

namespace dafed::harness {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, std::string_view what) {
  throw ConfigError("invalid value '" + value + "' for key '" + key + "': " + std::string(what));
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "expected a nonnegative integer");
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) {
    bad_value(key, v, "expected a finite number");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "expected true or false");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(v);
  while (std::getline(in, cur, ',')) out.push_back(trim(cur));
  return out;
}

template <typename T, typename F>
std::vector<T> to_list(const std::string& key, const std::string& v, F conv) {
  std::vector<T> out;
  for (const auto& item : split_list(v)) {
    if (item.empty()) bad_value(key, v, "empty list element");
    out.push_back(conv(key, item));
  }
  if (out.empty()) bad_value(key, v, "empty list");
  return out;
}

double nonneg(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  if (d < 0.0) bad_value(key, v, "must be >= 0");
  return d;
}

double rate(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  if (d < 0.0 || d >= 1.0) bad_value(key, v, "must be in [0, 1)");
  return d;
}

std::size_t positive(const std::string& key, const std::string& v) {
  const auto n = to_u64(key, v);
  if (n == 0) bad_value(key, v, "must be positive");
  return static_cast<std::size_t>(n);
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& v)>;

const std::vector<std::pair<std::string, Setter>>& setters() {
  static const std::vector<std::pair<std::string, Setter>> table = {
      {"seed", [](RunConfig& c, auto& k, auto& v) { c.seed = to_u64(k, v); }},
      {"mode",
       [](RunConfig& c, auto& k, auto& v) {
         if (v == "dafed_u") c.mode = Mode::kUnlabeled;
         else if (v == "dafed_l") c.mode = Mode::kLabeled;
         else bad_value(k, v, "expected dafed_u or dafed_l");
       }},
      {"data",
       [](RunConfig& c, auto& k, auto& v) {
         if (v == "synth") c.data = DataSource::kSynth;
         else if (v == "manifest") c.data = DataSource::kManifest;
         else bad_value(k, v, "expected synth or manifest");
       }},
      {"manifest", [](RunConfig& c, auto&, auto& v) { c.manifest = v; }},
      {"source_site", [](RunConfig& c, auto&, auto& v) { c.source_site = v; }},
      {"synth.sites",
       [](RunConfig& c, auto& k, auto& v) {
         c.synth.sites = positive(k, v);
         if (c.synth.sites < 2) bad_value(k, v, "need a source and at least one local site");
       }},
      {"synth.shifts", [](RunConfig& c, auto& k, auto& v) { c.synth.shifts = to_list<double>(k, v, nonneg); }},
      {"synth.subjects", [](RunConfig& c, auto& k, auto& v) { c.synth.subjects = positive(k, v); }},
      {"synth.length", [](RunConfig& c, auto& k, auto& v) { c.synth.length = positive(k, v); }},
      {"synth.rois", [](RunConfig& c, auto& k, auto& v) { c.synth.rois = positive(k, v); }},
      {"synth.class_balance",
       [](RunConfig& c, auto& k, auto& v) {
         c.synth.class_balance = to_double(k, v);
         if (c.synth.class_balance <= 0.0 || c.synth.class_balance >= 1.0) bad_value(k, v, "must be in (0, 1)");
       }},
      {"synth.separation", [](RunConfig& c, auto& k, auto& v) { c.synth.separation = rate(k, v); }},
      {"synth.signal_fraction",
       [](RunConfig& c, auto& k, auto& v) {
         c.synth.signal_fraction = to_double(k, v);
         if (c.synth.signal_fraction <= 0.0 || c.synth.signal_fraction > 1.0) bad_value(k, v, "must be in (0, 1]");
       }},
      {"synth.ar_coefficient", [](RunConfig& c, auto& k, auto& v) { c.synth.ar_coefficient = rate(k, v); }},
      {"synth.labeled_targets", [](RunConfig& c, auto& k, auto& v) { c.synth.labeled_targets = to_bool(k, v); }},
      {"window", [](RunConfig& c, auto& k, auto& v) { c.pipeline.window = positive(k, v); }},
      {"stride", [](RunConfig& c, auto& k, auto& v) { c.pipeline.stride = positive(k, v); }},
      {"top_k", [](RunConfig& c, auto& k, auto& v) { c.pipeline.top_k = positive(k, v); }},
      {"model.gcn_widths",
       [](RunConfig& c, auto& k, auto& v) {
         c.model.gcn_widths = to_list<std::size_t>(k, v, positive);
       }},
      {"model.gcn_dropout", [](RunConfig& c, auto& k, auto& v) { c.model.gcn_dropout = to_list<double>(k, v, rate); }},
      {"model.dis_hidden", [](RunConfig& c, auto& k, auto& v) { c.model.dis_hidden = positive(k, v); }},
      {"model.dis_out", [](RunConfig& c, auto& k, auto& v) { c.model.dis_out = positive(k, v); }},
      {"model.dis_dropout", [](RunConfig& c, auto& k, auto& v) { c.model.dis_dropout = rate(k, v); }},
      {"model.heads", [](RunConfig& c, auto& k, auto& v) { c.model.heads = positive(k, v); }},
      {"model.cls_hidden", [](RunConfig& c, auto& k, auto& v) { c.model.cls_hidden = positive(k, v); }},
      {"model.cls_dropout", [](RunConfig& c, auto& k, auto& v) { c.model.cls_dropout = rate(k, v); }},
      {"model.di_hidden", [](RunConfig& c, auto& k, auto& v) { c.model.di_hidden = positive(k, v); }},
      {"model.di_dropout", [](RunConfig& c, auto& k, auto& v) { c.model.di_dropout = rate(k, v); }},
      {"model.mine_hidden", [](RunConfig& c, auto& k, auto& v) { c.model.mine_hidden = positive(k, v); }},
      {"model.mine_input",
       [](RunConfig& c, auto& k, auto& v) {
         if (v == "sum") c.model.mine_input = MineInput::kSum;
         else if (v == "concat") c.model.mine_input = MineInput::kConcat;
         else bad_value(k, v, "expected sum or concat");
       }},
      {"lambda1", [](RunConfig& c, auto& k, auto& v) { c.train.weights.lambda1 = nonneg(k, v); }},
      {"lambda2", [](RunConfig& c, auto& k, auto& v) { c.train.weights.lambda2 = nonneg(k, v); }},
      {"gamma", [](RunConfig& c, auto& k, auto& v) { c.train.weights.gamma = nonneg(k, v); }},
      {"tau",
       [](RunConfig& c, auto& k, auto& v) {
         c.train.tau = to_double(k, v);
         if (c.train.tau <= 0.0) bad_value(k, v, "must be > 0");
       }},
      {"queue", [](RunConfig& c, auto& k, auto& v) { c.train.queue_length = static_cast<std::size_t>(to_u64(k, v)); }},
      {"alpha", [](RunConfig& c, auto& k, auto& v) { c.train.noise_alpha = nonneg(k, v); }},
      {"lr.profile",
       [](RunConfig& c, auto& k, auto& v) {
         if (v == "decay") c.train.lr.kind = LrSchedule::Kind::kDecay;
         else if (v == "warmup_decay") c.train.lr.kind = LrSchedule::Kind::kWarmupDecay;
         else bad_value(k, v, "expected decay or warmup_decay");
       }},
      {"lr.base",
       [](RunConfig& c, auto& k, auto& v) {
         c.train.lr.base = to_double(k, v);
         if (c.train.lr.base <= 0.0) bad_value(k, v, "must be > 0");
       }},
      {"lr.warmup", [](RunConfig& c, auto& k, auto& v) { c.train.lr.warmup_rounds = static_cast<std::size_t>(to_u64(k, v)); }},
      {"lr.decay",
       [](RunConfig& c, auto& k, auto& v) {
         c.train.lr.decay_rate = to_double(k, v);
         if (c.train.lr.decay_rate <= 0.0 || c.train.lr.decay_rate > 1.0) bad_value(k, v, "must be in (0, 1]");
       }},
      {"rounds", [](RunConfig& c, auto& k, auto& v) { c.train.rounds = positive(k, v); }},
      {"batch_divisor", [](RunConfig& c, auto& k, auto& v) { c.train.batch_divisor = positive(k, v); }},
      {"use_stfg", [](RunConfig& c, auto& k, auto& v) { c.model.use_stfg = to_bool(k, v); }},
      {"use_rd", [](RunConfig& c, auto& k, auto& v) { c.model.use_rd = to_bool(k, v); }},
      {"use_dat", [](RunConfig& c, auto& k, auto& v) { c.train.use_dat = to_bool(k, v); }},
      {"use_cl", [](RunConfig& c, auto& k, auto& v) { c.train.use_cl = to_bool(k, v); }},
      {"source_gradient", [](RunConfig& c, auto& k, auto& v) { c.train.broadcast_source_gradient = to_bool(k, v); }},
      {"local_bn", [](RunConfig& c, auto& k, auto& v) { c.train.local_bn = to_bool(k, v); }},
      {"gradient_reversal", [](RunConfig& c, auto& k, auto& v) { c.train.gradient_reversal = to_bool(k, v); }},
      {"checkpoint_every", [](RunConfig& c, auto& k, auto& v) { c.checkpoint_every = positive(k, v); }},
      {"explain.windows", [](RunConfig& c, auto& k, auto& v) { c.explain_windows = positive(k, v); }},
      {"folds",
       [](RunConfig& c, auto& k, auto& v) {
         c.folds = positive(k, v);
         if (c.folds < 2) bad_value(k, v, "need at least 2 folds");
       }},
  };
  return table;
}

std::string role_label(const data::SiteDataset& ds) { return ds.site_id; }

void put_bytes(std::vector<std::uint8_t>& out, const void* p, std::size_t n) {
  const auto* b = static_cast<const std::uint8_t*>(p);
  out.insert(out.end(), b, b + n);
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) { put_bytes(out, &v, sizeof v); }

void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  put_bytes(out, s.data(), s.size());
}

constexpr char kCheckpointMagic[4] = {'D', 'F', 'C', 'K'};

}  // namespace

// --- config -------------------------------------------------------------------------

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& [name, fn] : setters()) {
    if (name == key) {
      fn(*this, key, value);
      entries[key] = value;
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, fn] : setters()) k.push_back(name);
    return k;
  }();
  return keys;
}

RunConfig parse_config(std::string_view text, const std::filesystem::path& base_dir) {
  RunConfig cfg;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (cfg.entries.count(key)) throw ConfigError("duplicate config key '" + key + "'");
    cfg.set(key, value);
  }
  if (!cfg.manifest.empty() && cfg.manifest.is_relative() && !base_dir.empty()) {
    cfg.manifest = base_dir / cfg.manifest;
  }
  if (cfg.data == DataSource::kManifest) {
    if (cfg.manifest.empty()) throw ConfigError("data = manifest needs key 'manifest'");
    if (!std::filesystem::exists(cfg.manifest)) {
      throw ConfigError("manifest '" + cfg.manifest.string() + "' does not exist");
    }
    if (cfg.source_site.empty()) throw ConfigError("data = manifest needs key 'source_site'");
  }
  if (cfg.model.gcn_dropout.size() != cfg.model.gcn_widths.size()) {
    throw ConfigError("model.gcn_dropout needs one rate per entry of model.gcn_widths");
  }
  if (cfg.model.dis_out % cfg.model.heads != 0) {
    throw ConfigError("model.dis_out must be divisible by model.heads");
  }
  cfg.train.seed = cfg.seed;
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.parent_path());
}

std::string canonical_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [k, v] : cfg.entries) out += k + "=" + v + "\n";
  return out;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 failed");
  }
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", md[i]);
  return hex;
}

std::string config_digest(const RunConfig& cfg) { return sha256_hex(canonical_config(cfg)); }

// --- data ---------------------------------------------------------------------------

data::SynthConfig synth_config(const RunConfig& cfg) {
  const SynthSection& s = cfg.synth;
  if (s.shifts.size() != s.sites) {
    throw ConfigError("synth.shifts has " + std::to_string(s.shifts.size()) + " entries for " +
                      std::to_string(s.sites) + " sites");
  }
  data::SynthConfig out;
  out.separation = s.separation;
  out.signal_fraction = s.signal_fraction;
  out.ar_coefficient = s.ar_coefficient;
  for (std::size_t i = 0; i < s.sites; ++i) {
    data::SiteSpec spec;
    spec.id = "site" + std::to_string(i);
    spec.subjects = s.subjects;
    spec.class_balance = s.class_balance;
    spec.length = s.length;
    spec.rois = s.rois;
    spec.shift = s.shifts[i];
    spec.labeled = i == 0 || s.labeled_targets;
    out.sites.push_back(spec);
  }
  return out;
}

std::vector<data::SiteDataset> load_datasets(const RunConfig& cfg) {
  if (cfg.data == DataSource::kSynth) return data::synth_multisite(synth_config(cfg), cfg.pipeline, cfg.seed);
  return data::ingest_csv(cfg.manifest, cfg.pipeline);
}

std::size_t source_index(const RunConfig& cfg, const std::vector<data::SiteDataset>& sites) {
  if (sites.size() < 2) throw ConfigError("need a source site and at least one local site");
  if (cfg.data == DataSource::kSynth && cfg.source_site.empty()) return 0;
  for (std::size_t i = 0; i < sites.size(); ++i) {
    if (role_label(sites[i]) == cfg.source_site) {
      if (!sites[i].labeled) throw ConfigError("source site '" + cfg.source_site + "' is unlabeled");
      return i;
    }
  }
  throw ConfigError("source_site '" + cfg.source_site + "' not found in the data");
}

// --- federation ---------------------------------------------------------------------

namespace {

ModelConfig model_for(const RunConfig& cfg, const std::vector<data::SiteDataset>& sites) {
  ModelConfig m = cfg.model;
  m.rois = sites.front().rois();
  m.validate();
  return m;
}

fed::TrainOptions options_for(const RunConfig& cfg) {
  fed::TrainOptions o = cfg.train;
  o.seed = cfg.seed;
  o.labeled_targets = cfg.mode == Mode::kLabeled;
  return o;
}

void restrict(fed::SiteState& s, const std::vector<std::vector<std::size_t>>& idx, std::size_t i) {
  if (idx.empty()) return;
  if (idx.size() <= i) throw Error("train index list missing for site " + s.id);
  s.train_indices = idx[i];
}

}  // namespace

Federation make_federation(const RunConfig& cfg, const std::vector<data::SiteDataset>& sites,
                           const std::vector<std::vector<std::size_t>>& train_indices) {
  Federation f;
  f.model = model_for(cfg, sites);
  f.opts = options_for(cfg);
  const std::size_t src = source_index(cfg, sites);
  for (std::size_t i = 0; i < sites.size(); ++i) {
    if (i == src) {
      f.source = fed::SiteState(sites[i].site_id, i, fed::SiteRole::kSource, &sites[i], f.opts);
      restrict(f.source, train_indices, i);
    } else {
      const auto role = sites[i].labeled ? fed::SiteRole::kLabeledTarget : fed::SiteRole::kUnlabeledTarget;
      f.locals.emplace_back(sites[i].site_id, i, role, &sites[i], f.opts);
      restrict(f.locals.back(), train_indices, i);
    }
  }
  f.global = init_theta(f.model, cfg.seed);
  return f;
}

std::vector<fed::SiteMetrics> run_round(Federation& f) {
  auto res = fed::multi_site_round(f.model, f.global, f.source, f.locals, f.round, f.opts);
  f.global = std::move(res.theta);
  ++f.round;
  return std::move(res.metrics);
}

Baseline make_baseline(const RunConfig& cfg, const std::vector<data::SiteDataset>& sites,
                       const std::vector<std::vector<std::size_t>>& train_indices) {
  Baseline b;
  b.model = model_for(cfg, sites);
  b.opts = options_for(cfg);
  const std::size_t src = source_index(cfg, sites);
  b.source = fed::SiteState(sites[src].site_id, src, fed::SiteRole::kSource, &sites[src], b.opts);
  restrict(b.source, train_indices, src);
  b.source.theta = init_theta(b.model, cfg.seed);
  return b;
}

std::vector<fed::SiteMetrics> run_round(Baseline& b) {
  auto res = fed::source_only_round(b.model, b.source, b.round, b.opts);
  ++b.round;
  return std::move(res.metrics);
}

std::string role_name(fed::SiteRole role) {
  switch (role) {
    case fed::SiteRole::kSource: return "source";
    case fed::SiteRole::kLabeledTarget: return "target_labeled";
    case fed::SiteRole::kUnlabeledTarget: return "target_unlabeled";
  }
  return "unknown";
}

void write_metrics_header(std::ostream& out) {
  out << "round,site,role,L_C,L_MI,L_CL,L_DI,lambda_p,lr,acc,bytes_up,bytes_down\n";
}

void write_metrics_rows(std::ostream& out, std::size_t round, const std::vector<fed::SiteMetrics>& rows) {
  for (const auto& m : rows) {
    out << fmt::format("{},{},{},{},{},{},{},{},{},{},{},{}\n", round, m.site, role_name(m.role), m.parts.c,
                       m.parts.mi, m.parts.cl, m.parts.di, m.lambda_p, m.lr,
                       m.accuracy ? fmt::format("{}", *m.accuracy) : std::string(), m.bytes_up,
                       m.bytes_down);
  }
}

// --- cross-validation ---------------------------------------------------------------

std::vector<std::vector<std::string>> subject_folds(const data::SiteDataset& site, std::size_t k,
                                                    std::uint64_t seed) {
  if (k < 2) throw ConfigError("need at least 2 folds");
  std::array<std::vector<std::string>, 2> by_class;
  for (const auto& [subject, idx] : site.subjects) {
    const auto c = site.samples.at(idx.front()).known_class();
    if (!c) throw ConfigError("site " + site.site_id + " has no labels to stratify folds");
    by_class[static_cast<std::size_t>(*c)].push_back(subject);
  }
  std::vector<std::vector<std::string>> folds(k);
  auto gen = make_stream({seed, tag(StreamTag::kFolds), hash_id(site.site_id)});
  std::size_t next = 0;
  for (std::size_t c = 0; c < 2; ++c) {
    auto& subjects = by_class[c];
    if (subjects.size() < k) {
      throw ConfigError("site " + site.site_id + " has " + std::to_string(subjects.size()) +
                        " subjects of class " + std::to_string(c) + ", fewer than " +
                        std::to_string(k) + " folds");
    }
    for (std::size_t i = subjects.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform01(gen) * static_cast<double>(i));
      std::swap(subjects[i - 1], subjects[std::min(j, i - 1)]);
    }
    for (const auto& s : subjects) folds[next++ % k].push_back(s);
  }
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

std::vector<std::size_t> samples_of(const data::SiteDataset& site, const std::vector<std::string>& subjects) {
  std::vector<std::size_t> out;
  for (const auto& s : subjects) {
    auto it = site.subjects.find(s);
    if (it == site.subjects.end()) throw Error("unknown subject " + s + " at site " + site.site_id);
    out.insert(out.end(), it->second.begin(), it->second.end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

double subject_accuracy(const data::SiteDataset& site, std::span<const std::size_t> indices,
                        std::span<const double> p1) {
  if (indices.size() != p1.size()) throw Error("subject_accuracy: length mismatch");
  std::map<std::string, std::pair<std::size_t, std::size_t>> votes;  // subject -> (ones, total)
  std::map<std::string, int> truth;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& g = site.samples.at(indices[i]);
    const auto c = g.known_class();
    if (!c) continue;
    auto& v = votes[g.subject_id];
    v.first += p1[i] > 0.5;
    ++v.second;
    truth[g.subject_id] = *c;
  }
  if (votes.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& [subject, v] : votes) {
    const int pred = 2 * v.first >= v.second ? 1 : 0;
    hits += pred == truth[subject];
  }
  return static_cast<double>(hits) / static_cast<double>(votes.size());
}

std::vector<FoldScore> cross_validate(const RunConfig& cfg, const std::vector<data::SiteDataset>& sites,
                                      std::size_t k, const ParamStore* fixed) {
  // folds[i] is empty for sites that cannot be evaluated; they train on everything
  std::vector<std::vector<std::vector<std::string>>> folds(sites.size());
  bool any = false;
  for (std::size_t i = 0; i < sites.size(); ++i) {
    const auto& s = sites[i];
    const bool known = !s.samples.empty() &&
                       std::all_of(s.samples.begin(), s.samples.end(), [](const data::FCGraph& g) {
                         return g.known_class().has_value();
                       });
    if (!known) {
      spdlog::warn("site {} has no labels or truth, not evaluated", s.site_id);
      continue;
    }
    folds[i] = subject_folds(s, k, cfg.seed);
    any = true;
  }
  if (!any) throw ConfigError("no site has labels to evaluate");

  std::vector<FoldScore> out;
  for (std::size_t f = 0; f < k; ++f) {
    std::optional<Federation> trained;
    if (!fixed) {
      std::vector<std::vector<std::size_t>> train(sites.size());
      for (std::size_t i = 0; i < sites.size(); ++i) {
        if (folds[i].empty()) {
          train[i].resize(sites[i].samples.size());
          std::iota(train[i].begin(), train[i].end(), 0);
          continue;
        }
        std::vector<std::string> keep;
        for (std::size_t g = 0; g < k; ++g) {
          if (g != f) keep.insert(keep.end(), folds[i][g].begin(), folds[i][g].end());
        }
        train[i] = samples_of(sites[i], keep);
      }
      trained.emplace(make_federation(cfg, sites, train));
      spdlog::info("fold {}/{}: training {} rounds", f + 1, k, cfg.train.rounds);
      for (std::size_t r = 0; r < cfg.train.rounds; ++r) run_round(*trained);
    }
    for (std::size_t i = 0; i < sites.size(); ++i) {
      if (folds[i].empty()) continue;
      const auto idx = samples_of(sites[i], folds[i][f]);
      ModelConfig model = cfg.model;
      model.rois = sites[i].rois();
      const ParamStore& theta = fixed ? *fixed : trained->global;
      const auto p1 = fed::predict(fixed ? model : trained->model, theta, sites[i], idx);
      std::size_t hits = 0;
      for (std::size_t j = 0; j < idx.size(); ++j) {
        hits += (p1[j] > 0.5 ? 1 : 0) == *sites[i].samples[idx[j]].known_class();
      }
      FoldScore score;
      score.site = sites[i].site_id;
      score.fold = f;
      score.window_accuracy = static_cast<double>(hits) / static_cast<double>(idx.size());
      score.subject_accuracy = subject_accuracy(sites[i], idx, p1);
      out.push_back(score);
    }
  }
  return out;
}

std::vector<FoldSummary> summarize_folds(std::span<const FoldScore> scores) {
  std::vector<FoldSummary> out;
  std::vector<std::vector<const FoldScore*>> groups;
  for (const auto& s : scores) {
    auto it = std::find_if(out.begin(), out.end(), [&](const FoldSummary& f) { return f.site == s.site; });
    if (it == out.end()) {
      out.push_back({s.site});
      groups.emplace_back();
      it = out.end() - 1;
    }
    groups[static_cast<std::size_t>(it - out.begin())].push_back(&s);
  }
  auto pop_std = [](const std::vector<double>& v) {
    const double m = mean(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(v.size()));
  };
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::vector<double> w, s;
    for (const auto* f : groups[i]) {
      w.push_back(f->window_accuracy);
      s.push_back(f->subject_accuracy);
    }
    out[i].folds = w.size();
    out[i].window_mean = mean(w);
    out[i].window_std = pop_std(w);
    out[i].subject_mean = mean(s);
    out[i].subject_std = pop_std(s);
  }
  return out;
}

// --- checkpoints --------------------------------------------------------------------

std::string optimizer_digest(const Adam& adam) {
  std::vector<std::uint8_t> bytes;
  const std::uint64_t steps = adam.steps();
  put_bytes(bytes, &steps, sizeof steps);
  for (const auto* moments : {&adam.first_moments(), &adam.second_moments()}) {
    for (const auto& [name, t] : *moments) {
      put_string(bytes, name);
      put_bytes(bytes, t.data(), t.size() * sizeof(double));
    }
  }
  return sha256_hex(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  std::vector<std::uint8_t> out;
  put_bytes(out, kCheckpointMagic, sizeof kCheckpointMagic);
  out.push_back(ck.version);
  put_string(out, ck.config_digest);
  put_u32(out, ck.round);
  put_u32(out, static_cast<std::uint32_t>(ck.optimizer_digests.size()));
  for (const auto& [site, digest] : ck.optimizer_digests) {
    put_string(out, site);
    put_string(out, digest);
  }
  fed::RoundMessage msg;
  msg.direction = fed::Direction::kUpload;
  msg.round = ck.round;
  msg.params = ck.theta.params;
  msg.buffers = ck.theta.buffers;
  const auto body = fed::serialize(msg);
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (bytes.size() - pos < n) throw Error("checkpoint: truncated");
  };
  auto get_u32 = [&] {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + pos, 4);
    pos += 4;
    return v;
  };
  auto get_string = [&] {
    const auto n = get_u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  };
  need(5);
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw Error("checkpoint: bad magic");
  pos = 4;
  Checkpoint ck;
  ck.version = bytes[pos++];
  if (ck.version != 1) throw Error("checkpoint: unsupported version " + std::to_string(ck.version));
  ck.config_digest = get_string();
  ck.round = get_u32();
  const auto n = get_u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string site = get_string();
    ck.optimizer_digests[site] = get_string();
  }
  auto msg = fed::deserialize(bytes.subspan(pos));
  if (msg.round != ck.round) throw Error("checkpoint: round mismatch between header and body");
  ck.theta.params = std::move(msg.params);
  ck.theta.buffers = std::move(msg.buffers);
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto bytes = encode_checkpoint(ck);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

Checkpoint make_checkpoint(const RunConfig& cfg, const Federation& f) {
  Checkpoint ck;
  ck.config_digest = config_digest(cfg);
  ck.round = static_cast<std::uint32_t>(f.round);
  ck.theta = f.global;
  for (const auto& s : f.locals) ck.optimizer_digests[s.id] = optimizer_digest(s.optimizer);
  return ck;
}

// --- gradient check -------------------------------------------------------------------

GradCheckReport gradcheck_toy(const RunConfig& cfg, std::size_t coords_per_param) {
  constexpr std::size_t kRois = 6;
  data::SynthConfig sc;
  data::SiteSpec spec;
  spec.id = "toy";
  spec.subjects = 4;
  spec.length = cfg.pipeline.window + 1;  // two windows per subject
  spec.rois = kRois;
  spec.labeled = true;
  sc.sites = {spec};
  data::PipelineOptions pipe = cfg.pipeline;
  pipe.stride = 1;
  pipe.top_k = std::min<std::size_t>(pipe.top_k, kRois - 1);
  sc.signal_fraction = 0.5;
  auto sites = data::synth_multisite(sc, pipe, cfg.seed);
  const data::SiteDataset& ds = sites.front();
  if (ds.samples.size() != 8) throw Error("gradcheck toy expected 8 samples");

  ModelConfig model = cfg.model;
  model.rois = kRois;
  model.use_rd = true;
  model.validate();

  fed::TrainOptions opts = cfg.train;
  opts.use_dat = true;
  opts.use_cl = true;
  opts.labeled_targets = true;
  opts.gradient_reversal = false;  // backward then equals the true derivative
  opts.seed = cfg.seed;
  opts.queue_length = 2;

  fed::SiteState site("toy", 1, fed::SiteRole::kLabeledTarget, &ds, opts);
  const ParamStore theta = init_theta(model, cfg.seed);
  site.previous_global = init_theta(model, cfg.seed + 1);
  fed::update_queue(site, fed::encoder_snapshot(init_theta(model, cfg.seed + 2)));
  fed::update_queue(site, fed::encoder_snapshot(init_theta(model, cfg.seed + 3)));

  std::vector<std::size_t> batch(ds.samples.size());
  std::iota(batch.begin(), batch.end(), 0);

  ParamStore checked, fixed;
  for (const auto& [name, t] : theta.params) (is_mine_param(name) ? fixed : checked).params[name] = t;
  checked.buffers = theta.buffers;

  const double lp = 0.5;
  LossFn fn = [&](const ParamStore& p, GradMap* grads) {
    ParamStore full = p;
    for (const auto& [name, t] : fixed.params) full.params[name] = t;
    auto res = fed::site_objective(model, full, site, batch, 0, lp, opts);
    if (grads) {
      grads->clear();
      for (auto& [name, g] : res.grads) {
        if (!is_mine_param(name)) grads->emplace(name, std::move(g));
      }
    }
    return res.total;
  };
  GradCheckReport report;
  report.loss = fn(checked, nullptr);
  GradCheckOptions go;
  go.coords_per_param = coords_per_param;
  go.seed = cfg.seed;
  report.result = grad_check(fn, checked, go);
  report.params = checked.num_scalars();
  return report;
}

void draw_gaussian_pairs(double rho, std::size_t n, std::mt19937_64& gen, Tensor& x, Tensor& y) {
  if (!(std::fabs(rho) < 1.0)) throw Error("gaussian pairs: |rho| must be below 1");
  std::normal_distribution<double> normal(0.0, 1.0);
  const double rest = std::sqrt(1.0 - rho * rho);
  x = Tensor({n, 1});
  y = Tensor({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    const double a = normal(gen);
    const double b = normal(gen);
    x[i] = a;
    y[i] = rho * a + rest * b;
  }
}

MineToy train_mine_gaussian(double rho, std::uint64_t seed, const MineToyOptions& opts) {
  MineToy toy;
  toy.cfg.rois = 2;
  toy.cfg.dis_out = 1;
  toy.cfg.heads = 1;
  toy.cfg.mine_input = MineInput::kConcat;
  const ParamStore full = init_theta(toy.cfg, seed);
  for (const auto& [name, t] : full.params) {
    if (is_mine_param(name)) toy.theta.params[name] = t;
  }
  for (const auto& [name, t] : full.buffers) {
    if (is_mine_param(name)) toy.theta.buffers[name] = t;
  }
  auto gen = make_stream({seed, tag(StreamTag::kSynth), 0x6d696e65});
  Adam adam;
  for (std::size_t step = 0; step < opts.steps; ++step) {
    Tensor x, y;
    draw_gaussian_pairs(rho, opts.batch, gen, x, y);
    ad::Tape tape;
    ForwardContext ctx(tape, toy.theta, ad::Mode::kTrain);
    ParamStore sink;
    ctx.set_buffer_sink(&sink);
    const auto perm =
        disentangle::marginal_permutation(opts.batch, stream_seed({seed, tag(StreamTag::kMinePerm), step}));
    ad::Var dv = disentangle::mine_estimate(ctx, toy.cfg, tape.constant(x), tape.constant(y), perm);
    adam.step(toy.theta, tape.backward(ad::scale(dv, -1.0)), opts.lr);
    for (auto& [name, t] : sink.buffers) toy.theta.buffers[name] = std::move(t);
  }
  return toy;
}

double mine_gaussian(double rho, std::uint64_t seed, const MineToyOptions& opts) {
  const MineToy toy = train_mine_gaussian(rho, seed, opts);
  auto gen = make_stream({seed, tag(StreamTag::kSynth), 0x6576616c});
  double total = 0.0;
  for (std::size_t r = 0; r < opts.eval_repeats; ++r) {
    Tensor x, y;
    draw_gaussian_pairs(rho, opts.eval_samples, gen, x, y);
    ad::Tape tape;
    ForwardContext ctx(tape, toy.theta, ad::Mode::kEval);
    const auto perm = disentangle::marginal_permutation(
        opts.eval_samples, stream_seed({seed, tag(StreamTag::kMinePerm), opts.steps + r}));
    total += disentangle::mine_estimate(ctx, toy.cfg, tape.constant(x), tape.constant(y), perm).value().item();
  }
  return total / static_cast<double>(opts.eval_repeats);
}

}  // namespace dafed::harness
