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

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include "dafed/explain.hpp"
#include "dafed/harness.hpp"

namespace fs = std::filesystem;
using namespace dafed;

namespace {

struct Args {
  fs::path config;
  fs::path out = "dafed_out";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> layer;
  int cls = 1;
  std::optional<std::size_t> folds;
  fs::path checkpoint;
};

harness::RunConfig load(const Args& a) {
  harness::RunConfig cfg = a.config.empty() ? harness::parse_config("") : harness::load_config(a.config);
  if (a.seed) {
    cfg.set("seed", std::to_string(*a.seed));
    cfg.train.seed = cfg.seed;
  }
  return cfg;
}

void log_windows(const std::vector<data::SiteDataset>& sites) {
  for (const auto& s : sites) {
    std::size_t lo = SIZE_MAX, hi = 0;
    for (const auto& [subject, idx] : s.subjects) {
      lo = std::min(lo, idx.size());
      hi = std::max(hi, idx.size());
    }
    if (lo == hi) {
      spdlog::info("site {}: {} subjects, {} windows/subject", s.site_id, s.subjects.size(), lo);
    } else {
      spdlog::info("site {}: {} subjects, {}..{} windows/subject", s.site_id, s.subjects.size(), lo, hi);
    }
  }
}

int cmd_synth(const Args& a) {
  const auto cfg = load(a);
  const auto series = data::synth_series(harness::synth_config(cfg), cfg.seed);
  fs::create_directories(a.out / "series");
  std::ofstream manifest(a.out / "manifest.csv");
  if (!manifest) throw Error("cannot write " + (a.out / "manifest.csv").string());
  manifest << "subject_id,site_id,label,path,truth\n";
  for (const auto& s : series) {
    const fs::path rel = fs::path("series") / (s.site_id + "_" + s.subject_id + ".csv");
    data::write_series_csv(a.out / rel, s.values);
    manifest << s.subject_id << ',' << s.site_id << ',' << (s.label ? std::to_string(*s.label) : "") << ','
             << rel.generic_string() << ',' << (s.truth ? std::to_string(*s.truth) : "") << '\n';
  }
  spdlog::info("wrote {} series to {}", series.size(), a.out.string());
  return 0;
}

fs::path checkpoint_path(const fs::path& dir, std::size_t round) {
  return dir / fmt::format("checkpoint_{:04d}.bin", round);
}

int cmd_train(const Args& a) {
  const auto cfg = load(a);
  const auto sites = harness::load_datasets(cfg);
  log_windows(sites);
  fs::create_directories(a.out);
  auto fed = harness::make_federation(cfg, sites);
  std::ofstream metrics(a.out / "metrics.csv");
  if (!metrics) throw Error("cannot write " + (a.out / "metrics.csv").string());
  harness::write_metrics_header(metrics);
  for (std::size_t r = 0; r < cfg.train.rounds; ++r) {
    const auto rows = harness::run_round(fed);
    harness::write_metrics_rows(metrics, r, rows);
    metrics.flush();
    if (fed.round % cfg.checkpoint_every == 0 || fed.round == cfg.train.rounds) {
      harness::save_checkpoint(checkpoint_path(a.out, fed.round), harness::make_checkpoint(cfg, fed));
    }
    spdlog::info("round {}: source L_C {:.4f}", r, rows.front().parts.c);
  }
  harness::save_checkpoint(a.out / "checkpoint_final.bin", harness::make_checkpoint(cfg, fed));
  spdlog::info("metrics and checkpoints in {}", a.out.string());
  return 0;
}

// Warns when the checkpoint was written under a different config.
ParamStore checkpoint_theta(const Args& a, const harness::RunConfig& cfg) {
  if (a.checkpoint.empty()) throw harness::ConfigError("--checkpoint is required");
  const auto ck = harness::load_checkpoint(a.checkpoint);
  if (ck.config_digest != harness::config_digest(cfg)) {
    spdlog::warn("checkpoint was written under a different config digest");
  }
  return ck.theta;
}

int cmd_eval(const Args& a) {
  const auto cfg = load(a);
  const auto sites = harness::load_datasets(cfg);
  const std::size_t k = a.folds.value_or(cfg.folds);
  std::optional<ParamStore> theta;
  if (!a.checkpoint.empty()) theta = checkpoint_theta(a, cfg);
  const auto scores = harness::cross_validate(cfg, sites, k, theta ? &*theta : nullptr);
  fs::create_directories(a.out);
  std::ofstream out(a.out / "eval.csv");
  out.precision(17);
  out << "site,fold,window_acc,subject_acc\n";
  for (const auto& s : scores) out << s.site << ',' << s.fold << ',' << s.window_accuracy << ',' << s.subject_accuracy << '\n';
  for (const auto& s : harness::summarize_folds(scores)) {
    out << s.site << ",mean," << s.window_mean << ',' << s.subject_mean << '\n';
    out << s.site << ",std," << s.window_std << ',' << s.subject_std << '\n';
    std::cout << fmt::format("{}: window acc {:.4f} +/- {:.4f}, subject acc {:.4f} +/- {:.4f} ({} folds)\n",
                             s.site, s.window_mean, s.window_std, s.subject_mean, s.subject_std, s.folds);
  }
  return 0;
}

int cmd_explain(const Args& a) {
  const auto cfg = load(a);
  const auto sites = harness::load_datasets(cfg);
  const ParamStore theta = checkpoint_theta(a, cfg);
  ModelConfig model = cfg.model;
  model.rois = sites.front().rois();
  model.validate();
  if (a.cls != 0 && a.cls != 1) throw harness::ConfigError("--class must be 0 or 1");

  std::vector<std::size_t> layers;
  if (a.layer) {
    if (*a.layer < 1 || *a.layer > model.gcn_widths.size()) {
      throw harness::ConfigError(fmt::format("--layer must be in 1..{}", model.gcn_widths.size()));
    }
    layers = {*a.layer};
  } else {
    for (std::size_t l = 1; l <= model.gcn_widths.size(); ++l) layers.push_back(l);
  }

  // a few evenly spaced windows per subject
  struct Subject {
    std::vector<const data::FCGraph*> windows;
    Tensor mean_fc;
    std::optional<int> group;
  };
  std::vector<Subject> subjects;
  std::vector<const data::FCGraph*> all_windows;
  for (const auto& s : sites) {
    for (const auto& [id, idx] : s.subjects) {
      Subject sub;
      const std::size_t n = std::min(cfg.explain_windows, idx.size());
      for (std::size_t j = 0; j < n; ++j) sub.windows.push_back(&s.samples[idx[j * idx.size() / n]]);
      sub.mean_fc = Tensor({model.rois, model.rois});
      for (auto i : idx) sub.mean_fc += s.samples[i].node_features;
      sub.mean_fc *= 1.0 / static_cast<double>(idx.size());
      sub.group = s.samples[idx.front()].known_class();
      all_windows.insert(all_windows.end(), sub.windows.begin(), sub.windows.end());
      subjects.push_back(std::move(sub));
    }
  }

  fs::create_directories(a.out);
  std::vector<std::vector<explain::RoiScore>> rankings;
  std::vector<std::vector<double>> edge_scores;  // per subject, last layer listed
  std::ofstream faith(a.out / "faithfulness.csv");
  faith.precision(17);
  faith << "layer,drop_saliency,drop_random,increase_saliency,increase_random\n";
  for (std::size_t layer : layers) {
    std::vector<std::vector<double>> per_subject;
    for (const auto& sub : subjects) {
      std::vector<double> acc(model.rois, 0.0);
      for (const auto* g : sub.windows) {
        const auto map = explain::score_cam(model, theta, *g, layer, a.cls);
        for (std::size_t i = 0; i < model.rois; ++i) acc[i] += map.scores[i] / static_cast<double>(sub.windows.size());
      }
      per_subject.push_back(std::move(acc));
    }
    rankings.push_back(explain::roi_ranking(per_subject));
    edge_scores = per_subject;
    const auto f = explain::faithfulness(model, theta, all_windows, layer, cfg.seed);
    faith << layer << ',' << f.drop_saliency << ',' << f.drop_random << ',' << f.increase_saliency << ','
          << f.increase_random << '\n';
    std::cout << fmt::format("layer {}: average drop {:.2f} (random {:.2f}), average increase {:.2f} (random {:.2f})\n",
                             layer, f.drop_saliency, f.drop_random, f.increase_saliency, f.increase_random);
    std::cout << "  top ROIs:";
    for (const auto& e : explain::top_k(rankings.back())) std::cout << ' ' << e.roi;
    std::cout << '\n';
  }
  explain::write_saliency_csv(a.out / "saliency.csv", rankings, layers, a.cls);

  std::vector<std::vector<double>> scores;
  std::vector<Tensor> fc;
  std::vector<int> groups;
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    if (!subjects[i].group) continue;
    scores.push_back(edge_scores[i]);
    fc.push_back(subjects[i].mean_fc);
    groups.push_back(*subjects[i].group);
  }
  std::vector<explain::Edge> edges;
  const auto ones = static_cast<std::size_t>(std::count(groups.begin(), groups.end(), 1));
  if (ones >= 3 && groups.size() - ones >= 3) {
    edges = explain::significant_edges(scores, fc, groups);
  } else {
    spdlog::warn("fewer than 3 labeled subjects per group, edge list left empty");
  }
  explain::write_edges_csv(a.out / "edges.csv", edges);
  std::cout << edges.size() << " significant edges\n";
  return 0;
}

int cmd_gradcheck(const Args& a) {
  const auto cfg = load(a);
  const auto report = harness::gradcheck_toy(cfg);
  const auto& r = report.result;
  std::cout << fmt::format("loss {:.6f} over {} parameters\n", report.loss, report.params);
  if (r.nan) {
    std::cout << fmt::format("non-finite value at {}[{}]\nFAIL\n", r.nan_param, r.nan_index);
    return 1;
  }
  std::cout << fmt::format("max relative error {:.3e} at {}[{}] ({} coordinates)\n", r.max_rel_error,
                           r.worst_param, r.worst_index, r.coords_checked);
  const bool ok = r.passed(1e-4);
  std::cout << (ok ? "PASS" : "FAIL") << '\n';
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain-adversarial federated learning on functional connectivity graphs"};
  app.require_subcommand(1);
  Args a;
  std::string level = "info";

  auto common = [&](CLI::App* c) {
    c->add_option("--config", a.config, "key = value config file")->check(CLI::ExistingFile);
    c->add_option("--out", a.out, "output directory")->capture_default_str();
    c->add_option("--seed", a.seed, "overrides the config seed");
    c->add_option("--log-level", level, "trace, debug, info, warn, error")->capture_default_str();
  };
  auto* synth = app.add_subcommand("synth", "write a synthetic multi-site dataset and manifest");
  common(synth);
  auto* train = app.add_subcommand("train", "run federated training");
  common(train);
  auto* eval = app.add_subcommand("eval", "subject-stratified cross-validation");
  common(eval);
  eval->add_option("--folds", a.folds, "number of folds");
  eval->add_option("--checkpoint", a.checkpoint, "score this model instead of training per fold")
      ->check(CLI::ExistingFile);
  auto* expl = app.add_subcommand("explain", "saliency maps, faithfulness and significant edges");
  common(expl);
  expl->add_option("--checkpoint", a.checkpoint, "trained model")->required()->check(CLI::ExistingFile);
  expl->add_option("--layer", a.layer, "GCN layer (default: all)");
  expl->add_option("--class", a.cls, "class to explain")->capture_default_str();
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the full objective");
  common(grad);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  spdlog::set_level(spdlog::level::from_str(level));

  try {
    if (*synth) return cmd_synth(a);
    if (*train) return cmd_train(a);
    if (*eval) return cmd_eval(a);
    if (*expl) return cmd_explain(a);
    return cmd_gradcheck(a);
  } catch (const harness::ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
}
