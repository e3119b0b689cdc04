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

#ifndef DAFED_DATA_HPP_
#define DAFED_DATA_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dafed/tensor.hpp"

namespace dafed::data {

/// One subject's ROI time series, T rows x R columns.
struct TimeSeries {
  std::string subject_id;
  std::string site_id;
  std::optional<int> label;  // 0 = patient, 1 = control; empty on unlabeled sites
  std::optional<int> truth;  // evaluation-only ground truth, never used for training
  Tensor values;

  std::size_t length() const { return values.dim(0); }
  std::size_t rois() const { return values.dim(1); }
};

/// One sliding-window connectivity sample.
struct FCGraph {
  Tensor adjacency;       // R x R, nonnegative, symmetric, zero diagonal
  Tensor node_features;   // R x R Fisher-z rows
  Tensor norm_adjacency;  // D^-1/2 (A + I) D^-1/2, cached for the GCN
  std::optional<int> label;
  std::optional<int> truth;
  std::string site_id;
  std::string subject_id;
  std::size_t window = 0;

  std::size_t rois() const { return node_features.dim(0); }
  /// Label if present, otherwise the evaluation-only truth.
  std::optional<int> known_class() const { return label ? label : truth; }
};

struct SiteDataset {
  std::string site_id;
  std::vector<FCGraph> samples;
  bool labeled = false;
  std::map<std::string, std::vector<std::size_t>> subjects;

  std::size_t rois() const { return samples.empty() ? 0 : samples.front().rois(); }
  /// Rebuilds `subjects` from the samples.
  void index_subjects();
};

struct WindowRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  friend bool operator==(const WindowRange&, const WindowRange&) = default;
};

/// Windows [start, start + w) at the given stride; floor((T - w) / stride) + 1 of them.
std::vector<WindowRange> sliding_windows(std::size_t length, std::size_t window, std::size_t stride);

/// Raised by pearson_matrix when a column is constant within the window.
class ZeroVarianceError : public Error {
 public:
  explicit ZeroVarianceError(std::size_t roi);
  std::size_t roi() const { return roi_; }

 private:
  std::size_t roi_;
};

/// Pearson correlation of the columns of a w x R window.
Tensor pearson_matrix(const Tensor& window);

inline constexpr double kCorrelationClip = 0.999;

double fisher_z(double r, double r_max = kCorrelationClip);
Tensor fisher_z_matrix(const Tensor& correlation, double r_max = kCorrelationClip);

/// D^-1/2 (A + I) D^-1/2 with D the row sums of A + I.
Tensor normalized_adjacency(const Tensor& adjacency);

/// Node features are the rows of `fc`; edges keep the k largest |fc|
/// off-diagonal entries per row (first index wins ties), symmetrized by max.
FCGraph build_graph(const Tensor& fc, std::size_t k);

struct PipelineOptions {
  std::size_t window = 20;
  std::size_t stride = 1;
  std::size_t top_k = 10;
  double r_max = kCorrelationClip;
};

/// Window -> Pearson -> Fisher-z -> graph for one subject. Windows with a
/// constant ROI are skipped and logged.
std::vector<FCGraph> featurize(const TimeSeries& series, const PipelineOptions& opts);

/// Groups subjects by site in first-seen order and featurizes them.
std::vector<SiteDataset> build_sites(const std::vector<TimeSeries>& series,
                                     const PipelineOptions& opts);

// --- synthetic multi-site generator ------------------------------------------

struct SiteSpec {
  std::string id;
  std::size_t subjects = 40;
  double class_balance = 0.5;  // fraction of class-0 subjects
  std::size_t length = 40;     // T
  std::size_t rois = 32;       // R
  double shift = 0.0;          // strength of the site's orthogonal mixing
  bool labeled = false;
};

struct SynthConfig {
  std::vector<SiteSpec> sites;
  double separation = 0.5;  // within-block innovation correlation for class 0
  double signal_fraction = 0.2;
  double ar_coefficient = 0.5;
};

/// ROIs carrying the class signal; fixed per (R, fraction, seed).
std::vector<std::size_t> signal_rois(std::size_t rois, double fraction, std::uint64_t seed);

/// Orthogonal site mixing (I - s/2 S)^-1 (I + s/2 S) for a seeded skew-symmetric S.
Tensor site_mixing(const std::string& site_id, std::size_t rois, double shift, std::uint64_t seed);

std::vector<TimeSeries> synth_series(const SynthConfig& cfg, std::uint64_t seed);
std::vector<SiteDataset> synth_multisite(const SynthConfig& cfg, const PipelineOptions& opts,
                                         std::uint64_t seed);

// --- CSV ingestion -------------------------------------------------------------

/// Reads a headerless CSV of T rows x R reals. Rejects ragged rows and
/// non-numeric cells with the file and line.
Tensor read_series_csv(const std::filesystem::path& path);
void write_series_csv(const std::filesystem::path& path, const Tensor& values);

/// Manifest header: subject_id,site_id,label,path[,truth]. Relative paths are
/// resolved against the manifest's directory.
std::vector<TimeSeries> read_manifest(const std::filesystem::path& manifest);
std::vector<SiteDataset> ingest_csv(const std::filesystem::path& manifest,
                                    const PipelineOptions& opts);

}  // namespace dafed::data

#endif  // DAFED_DATA_HPP_
