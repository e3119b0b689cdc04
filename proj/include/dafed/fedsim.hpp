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

#ifndef DAFED_FEDSIM_HPP_
#define DAFED_FEDSIM_HPP_

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dafed/data.hpp"
#include "dafed/fusion.hpp"
#include "dafed/model.hpp"
#include "dafed/optim.hpp"

namespace dafed::fed {

using fusion::SiteRole;

// --- parameter noise and aggregation ------------------------------------------

struct NoiseSpec {
  double alpha = 0.01;
  std::uint64_t stream = 0;
};

/// Adds N(0, (alpha * sd(w))^2) to every parameter tensor w, sd being the
/// tensor's population standard deviation. alpha = 0 returns the input.
ParamStore add_noise(const ParamStore& theta, const NoiseSpec& spec);

/// Unweighted elementwise mean of parameters and buffers.
ParamStore aggregate(std::span<const ParamStore> uploads);

// --- contrastive module --------------------------------------------------------

/// Fixed-capacity FIFO; pushing beyond capacity evicts the oldest entry.
template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity = 0) : capacity_(capacity) {}

  void push(T item) {
    if (capacity_ == 0) return;
    items_.push_back(std::move(item));
    while (items_.size() > capacity_) items_.pop_front();
  }
  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return items_.empty(); }
  const T& operator[](std::size_t i) const { return items_[i]; }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

 private:
  std::size_t capacity_;
  std::deque<T> items_;
};

/// Mean over rows of -log(e^{s_p/tau} / (e^{s_p/tau} + sum_j e^{s_j/tau})) with
/// s = cosine similarity to the positive / j-th negative row. Zero when there
/// are no negatives.
ad::Var contrastive_loss(ad::Var anchor, const Tensor& positive,
                         const std::vector<Tensor>& negatives, double tau);

// --- configuration and per-site state ----------------------------------------

struct TrainOptions {
  fusion::LossWeights weights;  // lambda_p is recomputed every round
  double tau = 0.5;
  std::size_t queue_length = 5;
  double noise_alpha = 0.01;
  LrSchedule lr{LrSchedule::Kind::kDecay, 0.01, std::nullopt, 0.99};
  AdamOptions adam;
  std::size_t rounds = 50;
  std::size_t batch_divisor = 16;
  bool use_dat = true;
  bool use_cl = true;
  bool labeled_targets = false;      // DAFed_L: labeled target sites add L_C
  bool broadcast_source_gradient = true;
  bool local_bn = false;             // keep BN running statistics local (FedBN-style)
  bool gradient_reversal = true;
  std::uint64_t seed = 0;
};

/// Snapshot of the parameters the domain-invariant feature depends on.
ParamStore encoder_snapshot(const ParamStore& theta);

struct SiteState {
  std::string id;
  std::uint64_t index = 0;  // position in the run, folded into RNG keys
  SiteRole role = SiteRole::kUnlabeledTarget;
  const data::SiteDataset* dataset = nullptr;
  std::vector<std::size_t> train_indices;
  ParamStore theta;
  Adam optimizer;
  Adam mine_optimizer;
  BoundedQueue<ParamStore> queue;  // previous local encoders
  std::optional<ParamStore> previous_global;

  SiteState() = default;
  SiteState(std::string id, std::uint64_t index, SiteRole role, const data::SiteDataset* dataset,
            const TrainOptions& opts);
};

void update_queue(SiteState& site, ParamStore snapshot);

std::size_t batch_size_for(std::size_t n_train, std::size_t divisor);
std::vector<std::size_t> sample_batch(const SiteState& site, std::size_t round,
                                      const TrainOptions& opts);

// --- messages ------------------------------------------------------------------

enum class Direction : std::uint8_t { kBroadcast = 1, kUpload = 2 };

struct RoundMessage {
  Direction direction = Direction::kUpload;
  std::uint32_t round = 0;
  std::map<std::string, Tensor> params;
  std::map<std::string, Tensor> buffers;
  std::map<std::string, Tensor> grads;
  std::optional<double> source_loss;

  friend bool operator==(const RoundMessage&, const RoundMessage&) = default;
};

inline constexpr std::uint8_t kWireVersion = 1;

/// version u8 | round u32 | kind u8 | [source loss f64] | sections u8 |
/// per section: tag u8 ('P','B','G') | count u32 | entries of
/// (name_len u32, name, rank u32, dims u64..., f64 data). Little-endian.
std::vector<std::uint8_t> serialize(const RoundMessage& msg);
RoundMessage deserialize(std::span<const std::uint8_t> bytes);

/// In-process transport of length-prefixed frames.
class Channel {
 public:
  /// Returns the frame size in bytes, prefix included.
  std::size_t send(const RoundMessage& msg);
  RoundMessage receive();
  bool empty() const { return frames_.empty(); }
  std::span<const std::uint8_t> peek_frame() const { return frames_.front(); }

 private:
  std::deque<std::vector<std::uint8_t>> frames_;
};

// --- local computation -----------------------------------------------------------

struct SiteMetrics {
  std::string site;
  SiteRole role = SiteRole::kUnlabeledTarget;
  fusion::LossParts<double> parts;
  double total = 0.0;
  double lambda_p = 0.0;
  double lr = 0.0;
  std::optional<double> accuracy;  // batch accuracy against labels or truth
  std::size_t bytes_up = 0;
  std::size_t bytes_down = 0;
};

struct ObjectiveResult {
  double total = 0.0;
  fusion::LossParts<double> parts;
  GradMap grads;
  ParamStore bn_updates;  // buffers only
  Tensor f_di;
  Tensor f_ds;
  std::vector<std::size_t> perm;
  std::optional<double> accuracy;
};

/// Forward + backward of the site's weighted objective on one batch, MINE
/// parameters frozen.
ObjectiveResult site_objective(const ModelConfig& cfg, const ParamStore& theta,
                               const SiteState& site, std::span<const std::size_t> batch,
                               std::size_t round, double lambda_p, const TrainOptions& opts);

/// One ascent step of the DV bound for the statistics network.
double mine_step(const ModelConfig& cfg, ParamStore& theta, Adam& optimizer, const Tensor& f_di,
                 const Tensor& f_ds, std::span<const std::size_t> perm, double lr,
                 std::uint64_t dropout_stream);

/// Eval-mode domain-invariant features of the given samples.
Tensor encode_invariant(const ModelConfig& cfg, const ParamStore& theta,
                        const data::SiteDataset& dataset, std::span<const std::size_t> indices);

/// Eval-mode class-1 probabilities.
std::vector<double> predict(const ModelConfig& cfg, const ParamStore& theta,
                            const data::SiteDataset& dataset, std::span<const std::size_t> indices);

/// Window accuracy against labels, falling back to truth; nullopt if neither.
std::optional<double> accuracy(const ModelConfig& cfg, const ParamStore& theta,
                               const data::SiteDataset& dataset,
                               std::span<const std::size_t> indices);

double round_lambda_p(std::size_t round, const TrainOptions& opts);

/// What the central site broadcasts each round.
struct SourcePass {
  ObjectiveResult result;
  SiteMetrics metrics;
};

SourcePass source_pass(const ModelConfig& cfg, const ParamStore& global, const SiteState& source,
                       std::size_t round, const TrainOptions& opts);

/// Steps 3-4 at a local site: adopt the received parameters, backpropagate
/// the local objective plus the transmitted source gradient, one Adam step,
/// one MINE step, queue the new encoder.
SiteMetrics local_update(const ModelConfig& cfg, SiteState& site, const RoundMessage& broadcast,
                         std::size_t round, const TrainOptions& opts);

// --- protocols -------------------------------------------------------------------

struct RoundResult {
  ParamStore theta;
  std::vector<SiteMetrics> metrics;
};

/// Two-site protocol: the returned theta replaces the source parameters.
RoundResult two_site_round(const ModelConfig& cfg, const ParamStore& theta_source,
                           const SiteState& source, SiteState& target, std::size_t round,
                           const TrainOptions& opts);

/// Multi-site protocol with noise and FedAvg. Throws if any site fails; no
/// partial aggregation.
RoundResult multi_site_round(const ModelConfig& cfg, const ParamStore& global,
                             const SiteState& source, std::vector<SiteState>& sites,
                             std::size_t round, const TrainOptions& opts);

/// Source-only training with the same per-round step budget (no federation).
RoundResult source_only_round(const ModelConfig& cfg, SiteState& source, std::size_t round,
                              const TrainOptions& opts);

}  // namespace dafed::fed

#endif  // DAFED_FEDSIM_HPP_
