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

#ifndef DAFED_HARNESS_HPP_
#define DAFED_HARNESS_HPP_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "dafed/data.hpp"
#include "dafed/fedsim.hpp"
#include "dafed/model.hpp"

// Run configuration, experiment orchestration and persistence.
namespace dafed::harness {

/// Bad or unknown configuration; the CLI maps it to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

struct SynthSection {
  std::size_t sites = 4;
  std::vector<double> shifts{0.0, 0.6, 0.9, 1.2};
  std::size_t subjects = 40;
  std::size_t length = 40;
  std::size_t rois = 32;
  double class_balance = 0.5;
  double separation = 0.7;
  double signal_fraction = 0.2;
  double ar_coefficient = 0.5;
  bool labeled_targets = false;
};

enum class DataSource { kSynth, kManifest };
enum class Mode { kUnlabeled, kLabeled };  // dafed_u / dafed_l

struct RunConfig {
  std::uint64_t seed = 0;
  Mode mode = Mode::kUnlabeled;
  DataSource data = DataSource::kSynth;
  std::filesystem::path manifest;
  std::string source_site;  // manifest runs; synthetic runs use the first site
  SynthSection synth;
  data::PipelineOptions pipeline;
  ModelConfig model;
  fed::TrainOptions train;
  std::size_t checkpoint_every = 10;
  std::size_t explain_windows = 3;
  std::size_t folds = 5;
  std::map<std::string, std::string> entries;  // as given, after overrides

  /// Re-applies `key = value` over the current settings.
  void set(const std::string& key, const std::string& value);
};

/// Keys understood by the parser, in documentation order.
const std::vector<std::string>& config_keys();

/// Parses `key = value` lines; `#` starts a comment. Paths are resolved
/// against `base_dir`. Throws ConfigError naming the offending key.
RunConfig parse_config(std::string_view text, const std::filesystem::path& base_dir = {});
RunConfig load_config(const std::filesystem::path& path);

/// Sorted `key=value` lines of the explicit entries.
std::string canonical_config(const RunConfig& cfg);
std::string sha256_hex(std::string_view bytes);
std::string config_digest(const RunConfig& cfg);

// --- data ------------------------------------------------------------------------

data::SynthConfig synth_config(const RunConfig& cfg);
std::vector<data::SiteDataset> load_datasets(const RunConfig& cfg);
std::size_t source_index(const RunConfig& cfg, const std::vector<data::SiteDataset>& sites);

// --- federation --------------------------------------------------------------------

struct Federation {
  ModelConfig model;
  fed::TrainOptions opts;
  fed::SiteState source;
  std::vector<fed::SiteState> locals;
  ParamStore global;
  std::size_t round = 0;
};

/// Sites keep `train_indices[i]` (all samples when empty) of dataset i.
Federation make_federation(const RunConfig& cfg, const std::vector<data::SiteDataset>& sites,
                           const std::vector<std::vector<std::size_t>>& train_indices = {});

std::vector<fed::SiteMetrics> run_round(Federation& fed);

/// Source-only model trained with the same number of steps.
struct Baseline {
  ModelConfig model;
  fed::TrainOptions opts;
  fed::SiteState source;
  std::size_t round = 0;
};
Baseline make_baseline(const RunConfig& cfg, const std::vector<data::SiteDataset>& sites,
                       const std::vector<std::vector<std::size_t>>& train_indices = {});
std::vector<fed::SiteMetrics> run_round(Baseline& base);

std::string role_name(fed::SiteRole role);

/// round,site,role,L_C,L_MI,L_CL,L_DI,lambda_p,lr,acc,bytes_up,bytes_down
void write_metrics_header(std::ostream& out);
void write_metrics_rows(std::ostream& out, std::size_t round, const std::vector<fed::SiteMetrics>& rows);

// --- cross-validation ----------------------------------------------------------------

/// Subjects of each fold, classes dealt round-robin after a seeded shuffle.
/// Throws ConfigError when a class has fewer than `k` subjects.
std::vector<std::vector<std::string>> subject_folds(const data::SiteDataset& site, std::size_t k,
                                                    std::uint64_t seed);
std::vector<std::size_t> samples_of(const data::SiteDataset& site,
                                    const std::vector<std::string>& subjects);

struct FoldScore {
  std::string site;
  std::size_t fold = 0;
  double window_accuracy = 0.0;
  double subject_accuracy = 0.0;
};

/// Majority vote over each subject's windows (ties count as class 1).
double subject_accuracy(const data::SiteDataset& site, std::span<const std::size_t> indices,
                        std::span<const double> p1);

struct FoldSummary {
  std::string site;
  std::size_t folds = 0;
  double window_mean = 0.0;
  double window_std = 0.0;
  double subject_mean = 0.0;
  double subject_std = 0.0;
};

/// Subject-stratified k-fold evaluation of every site with labels or truth.
/// With `fixed` the given model is scored on each held-out fold; otherwise a
/// fresh federation is trained on the remaining folds first.
std::vector<FoldScore> cross_validate(const RunConfig& cfg, const std::vector<data::SiteDataset>& sites,
                                      std::size_t k, const ParamStore* fixed = nullptr);
/// Per-site mean and population std over folds, in first-seen site order.
std::vector<FoldSummary> summarize_folds(std::span<const FoldScore> scores);

// --- checkpoints -------------------------------------------------------------------

struct Checkpoint {
  std::uint8_t version = 1;
  std::string config_digest;
  std::uint32_t round = 0;
  ParamStore theta;
  std::map<std::string, std::string> optimizer_digests;  // site id -> SHA-256 of Adam state

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

std::string optimizer_digest(const Adam& adam);
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);
Checkpoint make_checkpoint(const RunConfig& cfg, const Federation& fed);

// --- gradient check ---------------------------------------------------------------------

struct GradCheckReport {
  GradCheckResult result;
  double loss = 0.0;
  std::size_t params = 0;
};

/// Full weighted objective of a labeled target site on a 6-ROI, 8-sample toy,
/// with every loss term active. MINE parameters are held fixed.
GradCheckReport gradcheck_toy(const RunConfig& cfg, std::size_t coords_per_param = 6);

// --- MINE on Gaussians -----------------------------------------------------------------

struct MineToyOptions {
  std::size_t steps = 3000;
  std::size_t batch = 256;
  double lr = 1e-3;
  std::size_t eval_samples = 2000;
  std::size_t eval_repeats = 20;
};

struct MineToy {
  ModelConfig cfg;  // 1-d halves fed to T as a concatenated pair
  ParamStore theta;
};

/// Pairs (x, rho x + sqrt(1 - rho^2) e) of standard normals, one per row.
void draw_gaussian_pairs(double rho, std::size_t n, std::mt19937_64& gen, Tensor& x, Tensor& y);
MineToy train_mine_gaussian(double rho, std::uint64_t seed, const MineToyOptions& opts = {});

/// Trains the statistics network alone on pairs (x, rho x + sqrt(1 - rho^2) e)
/// of standard normals and returns the held-out DV estimate in nats.
double mine_gaussian(double rho, std::uint64_t seed, const MineToyOptions& opts = {});

}  // namespace dafed::harness

#endif  // DAFED_HARNESS_HPP_
