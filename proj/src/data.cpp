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

#include "dafed/data.hpp"

#include <spdlog/spdlog.h>

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "dafed/rng.hpp"

namespace dafed::data {

void SiteDataset::index_subjects() {
  subjects.clear();
  for (std::size_t i = 0; i < samples.size(); ++i) subjects[samples[i].subject_id].push_back(i);
}

std::vector<WindowRange> sliding_windows(std::size_t length, std::size_t window, std::size_t stride) {
  if (window < 2) throw Error("sliding_windows: window must be >= 2");
  if (stride < 1) throw Error("sliding_windows: stride must be >= 1");
  if (length < window) {
    throw Error("sliding_windows: series of length " + std::to_string(length) +
                " is shorter than the window; need at least " + std::to_string(window));
  }
  std::vector<WindowRange> out;
  for (std::size_t s = 0; s + window <= length; s += stride) out.push_back({s, s + window});
  return out;
}

ZeroVarianceError::ZeroVarianceError(std::size_t roi)
    : Error("zero-variance ROI column " + std::to_string(roi)), roi_(roi) {}

Tensor pearson_matrix(const Tensor& window) {
  if (window.rank() != 2) throw Error("pearson_matrix: expected a w x R matrix");
  const std::size_t w = window.dim(0), r = window.dim(1);
  std::vector<double> mu(r, 0.0), sd(r, 0.0);
  for (std::size_t t = 0; t < w; ++t) {
    for (std::size_t j = 0; j < r; ++j) mu[j] += window.at(t, j);
  }
  for (auto& m : mu) m /= static_cast<double>(w);
  Tensor centered({w, r});
  for (std::size_t t = 0; t < w; ++t) {
    for (std::size_t j = 0; j < r; ++j) {
      const double c = window.at(t, j) - mu[j];
      centered.at(t, j) = c;
      sd[j] += c * c;
    }
  }
  for (std::size_t j = 0; j < r; ++j) {
    if (sd[j] / static_cast<double>(w) <= 1e-12) throw ZeroVarianceError(j);
    sd[j] = std::sqrt(sd[j]);
  }
  Tensor corr({r, r});
  for (std::size_t a = 0; a < r; ++a) {
    corr.at(a, a) = 1.0;
    for (std::size_t b = a + 1; b < r; ++b) {
      double acc = 0.0;
      for (std::size_t t = 0; t < w; ++t) acc += centered.at(t, a) * centered.at(t, b);
      const double v = std::clamp(acc / (sd[a] * sd[b]), -1.0, 1.0);
      corr.at(a, b) = v;
      corr.at(b, a) = v;
    }
  }
  return corr;
}

double fisher_z(double r, double r_max) { return std::atanh(std::clamp(r, -r_max, r_max)); }

Tensor fisher_z_matrix(const Tensor& correlation, double r_max) {
  Tensor out = correlation;
  for (auto& v : out.values()) v = fisher_z(v, r_max);
  return out;
}

Tensor normalized_adjacency(const Tensor& adjacency) {
  const std::size_t n = adjacency.dim(0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (adjacency.at(i, j) != adjacency.at(j, i)) throw Error("adjacency is not symmetric");
    }
  }
  Tensor a = adjacency;
  for (std::size_t i = 0; i < n; ++i) a.at(i, i) += 1.0;
  std::vector<double> inv_sqrt(n);
  for (std::size_t i = 0; i < n; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < n; ++j) deg += a.at(i, j);
    inv_sqrt[i] = 1.0 / std::sqrt(deg);
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) a.at(i, j) *= inv_sqrt[i] * inv_sqrt[j];
  }
  return a;
}

FCGraph build_graph(const Tensor& fc, std::size_t k) {
  if (fc.rank() != 2 || fc.dim(0) != fc.dim(1)) throw Error("build_graph: fc must be square");
  const std::size_t r = fc.dim(0);
  if (k < 1 || k >= r) {
    throw Error("build_graph: k=" + std::to_string(k) + " outside [1, " + std::to_string(r - 1) + "]");
  }
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = i + 1; j < r; ++j) {
      if (fc.at(i, j) != fc.at(j, i)) throw Error("build_graph: fc must be symmetric");
    }
  }
  Tensor adj({r, r});
  std::vector<std::size_t> order(r - 1);
  for (std::size_t i = 0; i < r; ++i) {
    order.clear();
    for (std::size_t j = 0; j < r; ++j) {
      if (j != i) order.push_back(j);
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return std::fabs(fc.at(i, a)) > std::fabs(fc.at(i, b));
    });
    for (std::size_t n = 0; n < k; ++n) adj.at(i, order[n]) = std::fabs(fc.at(i, order[n]));
  }
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = i + 1; j < r; ++j) {
      const double v = std::max(adj.at(i, j), adj.at(j, i));
      adj.at(i, j) = v;
      adj.at(j, i) = v;
    }
  }
  FCGraph g;
  g.norm_adjacency = normalized_adjacency(adj);
  g.adjacency = std::move(adj);
  g.node_features = fc;
  return g;
}

std::vector<FCGraph> featurize(const TimeSeries& series, const PipelineOptions& opts) {
  const std::size_t r = series.rois();
  std::vector<FCGraph> out;
  const auto windows = sliding_windows(series.length(), opts.window, opts.stride);
  for (std::size_t wi = 0; wi < windows.size(); ++wi) {
    const auto [b, e] = windows[wi];
    Tensor win({e - b, r});
    std::copy_n(series.values.data() + b * r, (e - b) * r, win.data());
    Tensor corr;
    try {
      corr = pearson_matrix(win);
    } catch (const ZeroVarianceError& err) {
      spdlog::warn("skipping window: subject={} window={} roi={} has zero variance",
                   series.subject_id, wi, err.roi());
      continue;
    }
    FCGraph g = build_graph(fisher_z_matrix(corr, opts.r_max), opts.top_k);
    g.label = series.label;
    g.truth = series.truth;
    g.site_id = series.site_id;
    g.subject_id = series.subject_id;
    g.window = wi;
    out.push_back(std::move(g));
  }
  return out;
}

std::vector<SiteDataset> build_sites(const std::vector<TimeSeries>& series,
                                     const PipelineOptions& opts) {
  std::vector<SiteDataset> sites;
  std::map<std::string, std::size_t> index;
  std::map<std::string, std::size_t> rois;
  for (const auto& s : series) {
    auto [it, inserted] = index.try_emplace(s.site_id, sites.size());
    if (inserted) {
      SiteDataset ds;
      ds.site_id = s.site_id;
      ds.labeled = s.label.has_value();
      sites.push_back(std::move(ds));
      rois[s.site_id] = s.rois();
    }
    SiteDataset& ds = sites[it->second];
    if (ds.labeled != s.label.has_value()) {
      throw Error("site " + s.site_id + " mixes labeled and unlabeled subjects (subject " +
                  s.subject_id + ")");
    }
    if (rois[s.site_id] != s.rois()) {
      throw Error("site " + s.site_id + " has inconsistent ROI count at subject " + s.subject_id);
    }
    auto graphs = featurize(s, opts);
    for (auto& g : graphs) ds.samples.push_back(std::move(g));
  }
  for (auto& ds : sites) ds.index_subjects();
  return sites;
}

std::vector<std::size_t> signal_rois(std::size_t rois, double fraction, std::uint64_t seed) {
  const auto count = std::max<std::size_t>(
      2, static_cast<std::size_t>(std::lround(fraction * static_cast<double>(rois))));
  if (count > rois) throw Error("signal_rois: fraction too large");
  std::vector<std::size_t> all(rois);
  std::iota(all.begin(), all.end(), 0);
  auto gen = make_stream({seed, tag(StreamTag::kSynth), 0x5151, rois});
  std::shuffle(all.begin(), all.end(), gen);
  all.resize(count);
  std::sort(all.begin(), all.end());
  return all;
}

Tensor site_mixing(const std::string& site_id, std::size_t rois, double shift, std::uint64_t seed) {
  using Eigen::MatrixXd;
  const auto n = static_cast<Eigen::Index>(rois);
  MatrixXd s = MatrixXd::Zero(n, n);
  auto gen = make_stream({seed, tag(StreamTag::kSynth), hash_id(site_id), 0x313});
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(rois)));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = normal(gen);
      s(i, j) = v;
      s(j, i) = -v;
    }
  }
  const MatrixXd eye = MatrixXd::Identity(n, n);
  const MatrixXd m = (eye - 0.5 * shift * s).partialPivLu().solve(eye + 0.5 * shift * s);
  Tensor out({rois, rois});
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) out.at(i, j) = m(i, j);
  }
  return out;
}

namespace {

void validate(const SynthConfig& cfg) {
  if (cfg.sites.empty()) throw Error("synth: no sites configured");
  if (!(cfg.separation > 0.0) || cfg.separation >= 1.0) {
    throw Error("synth: separation must be in (0, 1)");
  }
  if (!(cfg.signal_fraction > 0.0) || cfg.signal_fraction > 1.0) {
    throw Error("synth: signal_fraction must be in (0, 1]");
  }
  if (std::fabs(cfg.ar_coefficient) >= 1.0) throw Error("synth: AR coefficient must be in (-1, 1)");
  for (const auto& s : cfg.sites) {
    if (s.id.empty()) throw Error("synth: site id must not be empty");
    if (s.subjects == 0) throw Error("synth: site " + s.id + " has no subjects");
    if (s.rois < 2) throw Error("synth: site " + s.id + " needs at least 2 ROIs");
    if (s.length < 2) throw Error("synth: site " + s.id + " series too short");
    if (s.shift < 0.0) throw Error("synth: site " + s.id + " has negative shift");
    if (s.class_balance < 0.0 || s.class_balance > 1.0) {
      throw Error("synth: site " + s.id + " class_balance outside [0, 1]");
    }
  }
}

}  // namespace

std::vector<TimeSeries> synth_series(const SynthConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  std::vector<TimeSeries> out;
  for (const auto& site : cfg.sites) {
    const std::size_t r = site.rois;
    const auto signal = signal_rois(r, cfg.signal_fraction, seed);
    const Tensor mixing = site_mixing(site.id, r, site.shift, seed);

    // Innovation covariance per class: identity, plus equicorrelation on the
    // signal block for class 0.
    std::array<Eigen::MatrixXd, 2> chol;
    for (int cls = 0; cls < 2; ++cls) {
      Eigen::MatrixXd cov = Eigen::MatrixXd::Identity(r, r);
      if (cls == 0) {
        for (auto a : signal) {
          for (auto b : signal) {
            if (a != b) cov(a, b) = cfg.separation;
          }
        }
      }
      chol[cls] = cov.llt().matrixL();
    }

    const auto n0 = static_cast<std::size_t>(
        std::lround(site.class_balance * static_cast<double>(site.subjects)));
    constexpr std::size_t kBurnIn = 20;
    for (std::size_t i = 0; i < site.subjects; ++i) {
      TimeSeries ts;
      ts.subject_id = site.id + "_s" + std::to_string(1000 + i).substr(1);
      ts.site_id = site.id;
      const int cls = i < n0 ? 0 : 1;
      ts.truth = cls;
      if (site.labeled) ts.label = cls;
      auto gen = make_stream({seed, tag(StreamTag::kSynth), hash_id(ts.subject_id)});
      std::normal_distribution<double> normal(0.0, 1.0);
      Eigen::VectorXd state = Eigen::VectorXd::Zero(r);
      Eigen::VectorXd z(r);
      ts.values = Tensor({site.length, r});
      for (std::size_t t = 0; t < site.length + kBurnIn; ++t) {
        for (std::size_t j = 0; j < r; ++j) z(j) = normal(gen);
        state = cfg.ar_coefficient * state + chol[cls] * z;
        if (t < kBurnIn) continue;
        for (std::size_t a = 0; a < r; ++a) {
          double v = 0.0;
          for (std::size_t b = 0; b < r; ++b) v += mixing.at(a, b) * state(b);
          ts.values.at(t - kBurnIn, a) = v;
        }
      }
      out.push_back(std::move(ts));
    }
  }
  return out;
}

std::vector<SiteDataset> synth_multisite(const SynthConfig& cfg, const PipelineOptions& opts,
                                         std::uint64_t seed) {
  return build_sites(synth_series(cfg, seed), opts);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::optional<double> parse_real(const std::string& cell) {
  const std::string t = trim(cell);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty() || !std::isfinite(v)) {
    return std::nullopt;
  }
  return v;
}

}  // namespace

Tensor read_series_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<double> values;
  std::size_t cols = 0, rows = 0, line_no = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    if (rows == 0) {
      cols = cells.size();
    } else if (cells.size() != cols) {
      throw Error(path.string() + ":" + std::to_string(line_no) + ": ragged row (" +
                  std::to_string(cells.size()) + " cells, expected " + std::to_string(cols) + ")");
    }
    for (const auto& c : cells) {
      auto v = parse_real(c);
      if (!v) {
        throw Error(path.string() + ":" + std::to_string(line_no) + ": non-numeric cell '" + c + "'");
      }
      values.push_back(*v);
    }
    ++rows;
  }
  if (rows == 0) throw Error(path.string() + ": empty series");
  return Tensor({rows, cols}, std::move(values));
}

void write_series_csv(const std::filesystem::path& path, const Tensor& values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  char buf[64];
  for (std::size_t t = 0; t < values.dim(0); ++t) {
    for (std::size_t j = 0; j < values.dim(1); ++j) {
      if (j) out << ',';
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), values.at(t, j));
      out.write(buf, ptr - buf);
    }
    out << '\n';
  }
}

std::vector<TimeSeries> read_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw Error("cannot open manifest " + manifest.string());
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) throw Error(manifest.string() + ": empty manifest");
  const auto header = split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[trim(header[i])] = i;
  for (const char* need : {"subject_id", "site_id", "label", "path"}) {
    if (!col.count(need)) {
      throw Error(manifest.string() + ":1: missing column '" + std::string(need) + "'");
    }
  }
  const bool has_truth = col.count("truth") > 0;
  const auto base = manifest.parent_path();
  auto parse_class = [&](const std::string& cell) -> std::optional<int> {
    const std::string t = trim(cell);
    if (t.empty()) return std::nullopt;
    if (t == "0") return 0;
    if (t == "1") return 1;
    throw Error(manifest.string() + ":" + std::to_string(line_no) + ": label must be 0, 1 or empty");
  };
  std::vector<TimeSeries> out;
  std::map<std::string, std::size_t> site_rois;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw Error(manifest.string() + ":" + std::to_string(line_no) + ": ragged row");
    }
    TimeSeries ts;
    ts.subject_id = trim(cells[col["subject_id"]]);
    ts.site_id = trim(cells[col["site_id"]]);
    ts.label = parse_class(cells[col["label"]]);
    ts.truth = has_truth ? parse_class(cells[col["truth"]]) : ts.label;
    if (!ts.truth) ts.truth = ts.label;
    std::filesystem::path p = trim(cells[col["path"]]);
    if (p.is_relative()) p = base / p;
    ts.values = read_series_csv(p);
    if (ts.rois() < 2) throw Error(p.string() + ": need at least 2 ROI columns");
    const auto [it, fresh] = site_rois.try_emplace(ts.site_id, ts.rois());
    if (!fresh && it->second != ts.rois()) {
      throw Error(manifest.string() + ":" + std::to_string(line_no) + ": " + p.string() + " has " +
                  std::to_string(ts.rois()) + " ROIs, site " + ts.site_id + " has " +
                  std::to_string(it->second));
    }
    out.push_back(std::move(ts));
  }
  return out;
}

std::vector<SiteDataset> ingest_csv(const std::filesystem::path& manifest,
                                    const PipelineOptions& opts) {
  return build_sites(read_manifest(manifest), opts);
}

}  // namespace dafed::data
