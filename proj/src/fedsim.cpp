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

#include "dafed/fedsim.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "dafed/disentangle.hpp"
#include "dafed/rng.hpp"
#include "dafed/stfg.hpp"

namespace dafed::fed {

namespace {

constexpr std::size_t kEvalChunk = 128;

std::vector<const data::FCGraph*> graphs_of(const data::SiteDataset& ds,
                                            std::span<const std::size_t> indices) {
  std::vector<const data::FCGraph*> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= ds.samples.size()) throw Error("sample index out of range for site " + ds.site_id);
    out.push_back(&ds.samples[i]);
  }
  return out;
}

SiteRole effective_role(const SiteState& site, const TrainOptions& opts) {
  if (site.role == SiteRole::kLabeledTarget && !opts.labeled_targets) return SiteRole::kUnlabeledTarget;
  return site.role;
}

bool is_target(SiteRole role) { return role != SiteRole::kSource; }

std::uint64_t round_key(const TrainOptions& opts, const SiteState& site, std::size_t round) {
  return stream_seed({opts.seed, site.index, round});
}

int argmax2(const Tensor& probs, std::size_t row) {
  return probs.at(row, 1) > probs.at(row, 0) ? 1 : 0;
}

// Little-endian byte writer/reader for the wire format.
class Writer {
 public:
  template <typename T>
  void put(T v) {
    static_assert(std::endian::native == std::endian::little, "wire format assumes little-endian host");
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out_.insert(out_.end(), p, p + sizeof(T));
  }
  void put_bytes(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw Error("deserialize: truncated message");
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

void put_section(Writer& w, char tag, const std::map<std::string, Tensor>& entries) {
  w.put<std::uint8_t>(static_cast<std::uint8_t>(tag));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.put_bytes(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.put<std::uint64_t>(d);
    for (double v : t.values()) w.put<double>(v);
  }
}

std::map<std::string, Tensor> get_section(Reader& r) {
  const auto count = r.get<std::uint32_t>();
  std::map<std::string, Tensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    std::string name = r.get_string(len);
    const auto rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > 8) throw Error("deserialize: bad rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = r.get<double>();
    out.emplace(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return out;
}

}  // namespace

// --- noise / aggregation ------------------------------------------------------------

ParamStore add_noise(const ParamStore& theta, const NoiseSpec& spec) {
  if (spec.alpha < 0.0) throw Error("add_noise: alpha must be nonnegative");
  ParamStore out = theta;
  if (spec.alpha == 0.0) return out;
  for (auto& [name, t] : out.params) {
    const double sd = stddev(t.values());
    if (sd == 0.0) continue;
    auto gen = make_stream({spec.stream, tag(StreamTag::kNoise), hash_id(name)});
    std::normal_distribution<double> normal(0.0, spec.alpha * sd);
    for (double& v : t.values()) v += normal(gen);
  }
  return out;
}

ParamStore aggregate(std::span<const ParamStore> uploads) {
  if (uploads.empty()) throw Error("aggregate: no uploads");
  const ParamStore& first = uploads.front();
  auto check = [](const std::map<std::string, Tensor>& a, const std::map<std::string, Tensor>& b,
                  std::size_t k) {
    for (const auto& [name, t] : b) {
      if (!a.count(name)) throw Error("aggregate: upload " + std::to_string(k) + " has extra tensor " + name);
    }
    for (const auto& [name, t] : a) {
      auto it = b.find(name);
      if (it == b.end()) throw Error("aggregate: upload " + std::to_string(k) + " is missing tensor " + name);
      if (it->second.shape() != t.shape()) {
        throw Error("aggregate: shape mismatch for " + name + " in upload " + std::to_string(k) + ": " +
                    shape_str(t.shape()) + " vs " + shape_str(it->second.shape()));
      }
    }
  };
  for (std::size_t k = 1; k < uploads.size(); ++k) {
    check(first.params, uploads[k].params, k);
    check(first.buffers, uploads[k].buffers, k);
  }
  // mean = first + sum_k (u_k - first) / K, so identical uploads come back bit-exact
  ParamStore out = first;
  const double k = static_cast<double>(uploads.size());
  auto fold = [&](std::map<std::string, Tensor> ParamStore::*member) {
    for (auto& [name, t] : out.*member) {
      const auto base = (first.*member).at(name).values();
      std::vector<double> delta(t.size(), 0.0);
      for (const auto& u : uploads.subspan(1)) {
        const auto v = (u.*member).at(name).values();
        for (std::size_t i = 0; i < delta.size(); ++i) delta[i] += v[i] - base[i];
      }
      auto dst = t.values();
      for (std::size_t i = 0; i < delta.size(); ++i) dst[i] = base[i] + delta[i] / k;
    }
  };
  fold(&ParamStore::params);
  fold(&ParamStore::buffers);
  return out;
}

// --- contrastive --------------------------------------------------------------------

ad::Var contrastive_loss(ad::Var anchor, const Tensor& positive, const std::vector<Tensor>& negatives,
                         double tau) {
  ad::Tape& tape = *anchor.tape();
  if (negatives.empty()) return tape.constant(Tensor::scalar(0.0));
  if (tau <= 0.0) throw Error("contrastive_loss: tau must be positive");
  const std::size_t n = anchor.shape()[0];
  std::vector<ad::Var> cols;
  cols.reserve(negatives.size() + 1);
  auto column = [&](const Tensor& other) {
    if (other.shape() != anchor.shape()) {
      throw Error("contrastive_loss: shape " + shape_str(other.shape()) + " does not match anchor " +
                  shape_str(anchor.shape()));
    }
    cols.push_back(ad::reshape(ad::cosine_similarity(anchor, tape.constant(other)), {n, 1}));
  };
  column(positive);
  for (const auto& neg : negatives) column(neg);
  ad::Var logits = ad::scale(ad::concat(cols, 1), 1.0 / tau);
  ad::Var p_pos = ad::slice(ad::softmax(logits, 1), 1, 0, 1);
  return ad::scale(ad::mean_all(ad::log(p_pos)), -1.0);
}

// --- site state ---------------------------------------------------------------------

ParamStore encoder_snapshot(const ParamStore& theta) {
  auto keep = [](const std::string& name) {
    return name.starts_with("stfg.") || name.starts_with("dis.di.");
  };
  ParamStore out;
  for (const auto& [name, t] : theta.params) {
    if (keep(name)) out.params.emplace(name, t);
  }
  for (const auto& [name, t] : theta.buffers) {
    if (keep(name)) out.buffers.emplace(name, t);
  }
  return out;
}

SiteState::SiteState(std::string id_, std::uint64_t index_, SiteRole role_,
                     const data::SiteDataset* dataset_, const TrainOptions& opts)
    : id(std::move(id_)),
      index(index_),
      role(role_),
      dataset(dataset_),
      optimizer(opts.adam),
      mine_optimizer(opts.adam),
      queue(opts.queue_length) {
  if (dataset == nullptr) throw Error("site " + id + " has no dataset");
  train_indices.resize(dataset->samples.size());
  std::iota(train_indices.begin(), train_indices.end(), 0);
}

void update_queue(SiteState& site, ParamStore snapshot) { site.queue.push(std::move(snapshot)); }

std::size_t batch_size_for(std::size_t n_train, std::size_t divisor) {
  if (divisor == 0) throw Error("batch divisor must be positive");
  return std::min(n_train, std::max<std::size_t>(2, n_train / divisor));
}

std::vector<std::size_t> sample_batch(const SiteState& site, std::size_t round,
                                      const TrainOptions& opts) {
  std::vector<std::size_t> pool = site.train_indices;
  if (pool.size() < 2) throw Error("site " + site.id + " needs at least 2 training samples");
  const std::size_t b = batch_size_for(pool.size(), opts.batch_divisor);
  auto gen = make_stream({opts.seed, tag(StreamTag::kBatch), site.index, round});
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t span = pool.size() - i;
    const std::size_t j = i + std::min(span - 1, static_cast<std::size_t>(uniform01(gen) * span));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(b);
  return pool;
}

// --- messages -----------------------------------------------------------------------

std::vector<std::uint8_t> serialize(const RoundMessage& msg) {
  Writer w;
  w.put<std::uint8_t>(kWireVersion);
  w.put<std::uint32_t>(msg.round);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(msg.direction));
  w.put<std::uint8_t>(msg.source_loss ? 1 : 0);
  if (msg.source_loss) w.put<double>(*msg.source_loss);
  w.put<std::uint8_t>(3);
  put_section(w, 'P', msg.params);
  put_section(w, 'B', msg.buffers);
  put_section(w, 'G', msg.grads);
  return w.take();
}

RoundMessage deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto version = r.get<std::uint8_t>();
  if (version != kWireVersion) {
    throw Error("deserialize: unsupported version " + std::to_string(version));
  }
  RoundMessage msg;
  msg.round = r.get<std::uint32_t>();
  const auto kind = r.get<std::uint8_t>();
  if (kind != 1 && kind != 2) throw Error("deserialize: unknown message kind");
  msg.direction = static_cast<Direction>(kind);
  if (r.get<std::uint8_t>() != 0) msg.source_loss = r.get<double>();
  const auto sections = r.get<std::uint8_t>();
  for (std::uint8_t s = 0; s < sections; ++s) {
    const auto tag_byte = static_cast<char>(r.get<std::uint8_t>());
    switch (tag_byte) {
      case 'P': msg.params = get_section(r); break;
      case 'B': msg.buffers = get_section(r); break;
      case 'G': msg.grads = get_section(r); break;
      default: throw Error(std::string("deserialize: unknown section tag ") + tag_byte);
    }
  }
  if (!r.done()) throw Error("deserialize: trailing bytes");
  return msg;
}

std::size_t Channel::send(const RoundMessage& msg) {
  std::vector<std::uint8_t> body = serialize(msg);
  Writer w;
  w.put<std::uint64_t>(body.size());
  std::vector<std::uint8_t> frame = w.take();
  frame.insert(frame.end(), body.begin(), body.end());
  const std::size_t n = frame.size();
  frames_.push_back(std::move(frame));
  return n;
}

RoundMessage Channel::receive() {
  if (frames_.empty()) throw Error("channel: receive on empty channel");
  std::vector<std::uint8_t> frame = std::move(frames_.front());
  frames_.pop_front();
  Reader r(frame);
  const auto len = r.get<std::uint64_t>();
  if (len != frame.size() - sizeof(std::uint64_t)) throw Error("channel: frame length mismatch");
  return deserialize(std::span<const std::uint8_t>(frame).subspan(sizeof(std::uint64_t)));
}

// --- local computation --------------------------------------------------------------

double round_lambda_p(std::size_t round, const TrainOptions& opts) {
  if (!opts.use_dat) return 0.0;
  const double p = opts.rounds == 0 ? 0.0 : static_cast<double>(round) / static_cast<double>(opts.rounds);
  return fusion::lambda_p(std::min(p, 1.0), opts.weights.gamma);
}

Tensor encode_invariant(const ModelConfig& cfg, const ParamStore& theta,
                        const data::SiteDataset& dataset, std::span<const std::size_t> indices) {
  std::vector<double> out;
  out.reserve(indices.size() * cfg.dis_out);
  for (std::size_t start = 0; start < indices.size(); start += kEvalChunk) {
    const auto chunk = indices.subspan(start, std::min(kEvalChunk, indices.size() - start));
    const auto graphs = graphs_of(dataset, chunk);
    const auto batch = stfg::make_batch(graphs);
    ad::Tape tape;
    ForwardContext ctx(tape, theta, ad::Mode::kEval);
    auto f = disentangle::domain_invariant(ctx, cfg, stfg::forward(ctx, cfg, batch).z);
    const auto& v = f.value().values();
    out.insert(out.end(), v.begin(), v.end());
  }
  return Tensor({indices.size(), cfg.dis_out}, std::move(out));
}

std::vector<double> predict(const ModelConfig& cfg, const ParamStore& theta,
                            const data::SiteDataset& dataset, std::span<const std::size_t> indices) {
  std::vector<double> out;
  out.reserve(indices.size());
  for (std::size_t start = 0; start < indices.size(); start += kEvalChunk) {
    const auto chunk = indices.subspan(start, std::min(kEvalChunk, indices.size() - start));
    const auto graphs = graphs_of(dataset, chunk);
    const auto batch = stfg::make_batch(graphs);
    ad::Tape tape;
    ForwardContext ctx(tape, theta, ad::Mode::kEval);
    auto halves = disentangle::disentangle(ctx, cfg, stfg::forward(ctx, cfg, batch).z);
    auto probs = fusion::classifier(ctx, cfg, fusion::fuse(ctx, cfg, halves.f_di, halves.f_ds).features);
    for (std::size_t i = 0; i < chunk.size(); ++i) out.push_back(probs.value().at(i, 1));
  }
  return out;
}

std::optional<double> accuracy(const ModelConfig& cfg, const ParamStore& theta,
                               const data::SiteDataset& dataset,
                               std::span<const std::size_t> indices) {
  std::vector<std::size_t> known;
  for (std::size_t i : indices) {
    if (dataset.samples.at(i).known_class()) known.push_back(i);
  }
  if (known.empty()) return std::nullopt;
  const auto p = predict(cfg, theta, dataset, known);
  std::size_t hits = 0;
  for (std::size_t j = 0; j < known.size(); ++j) {
    hits += (p[j] > 0.5 ? 1 : 0) == *dataset.samples[known[j]].known_class();
  }
  return static_cast<double>(hits) / static_cast<double>(known.size());
}

ObjectiveResult site_objective(const ModelConfig& cfg, const ParamStore& theta, const SiteState& site,
                               std::span<const std::size_t> batch_idx, std::size_t round,
                               double lambda_p, const TrainOptions& opts) {
  const data::SiteDataset& ds = *site.dataset;
  const SiteRole role = effective_role(site, opts);
  const auto graphs = graphs_of(ds, batch_idx);
  const auto batch = stfg::make_batch(graphs);
  const std::size_t n = batch.batch;
  const std::uint64_t key = round_key(opts, site, round);

  ObjectiveResult res;
  ad::Tape tape;
  ForwardContext ctx(tape, theta, ad::Mode::kTrain);
  ctx.set_dropout(stream_seed({key, tag(StreamTag::kDropout)}), batch.sample_keys);
  ctx.set_buffer_sink(&res.bn_updates);
  ctx.freeze("mine.");

  auto halves = disentangle::disentangle(ctx, cfg, stfg::forward(ctx, cfg, batch).z);
  auto probs = fusion::classifier(ctx, cfg, fusion::fuse(ctx, cfg, halves.f_di, halves.f_ds).features);

  fusion::LossParts<std::optional<ad::Var>> parts;
  if (role != SiteRole::kUnlabeledTarget) {
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (!graphs[i]->label) {
        throw Error("site " + site.id + ": labeled role but sample of " + graphs[i]->subject_id +
                    " has no label");
      }
      labels[i] = *graphs[i]->label;
    }
    parts.c = fusion::classify_loss(probs, labels);
  }
  if (cfg.use_rd) {
    res.perm = disentangle::marginal_permutation(n, key);
    parts.mi = disentangle::mi_loss(disentangle::mine_estimate(ctx, cfg, halves.f_di, halves.f_ds, res.perm));
  }
  if (opts.use_dat) {
    auto dprobs = fusion::domain_identifier(ctx, cfg, halves.f_di, lambda_p, opts.gradient_reversal);
    std::vector<int> domains(n, is_target(role) ? 1 : 0);
    parts.di = fusion::domain_loss(dprobs, domains);
  }
  if (opts.use_cl && is_target(role) && site.previous_global && !site.queue.empty()) {
    const Tensor positive = encode_invariant(cfg, *site.previous_global, ds, batch_idx);
    std::vector<Tensor> negatives;
    negatives.reserve(site.queue.size());
    for (const auto& snap : site.queue) negatives.push_back(encode_invariant(cfg, snap, ds, batch_idx));
    parts.cl = contrastive_loss(halves.f_di, positive, negatives, opts.tau);
  }

  fusion::LossWeights w = opts.weights;
  w.lambda_p = lambda_p;
  ad::Var total = fusion::total_loss(tape, parts, w, role);
  res.total = total.value().item();
  auto value_of = [](const std::optional<ad::Var>& v) { return v ? v->value().item() : 0.0; };
  res.parts = {value_of(parts.c), value_of(parts.mi), value_of(parts.cl), value_of(parts.di)};
  if (!std::isfinite(res.total)) {
    throw Error("non-finite loss at site " + site.id + " round " + std::to_string(round) +
                " (L_C=" + std::to_string(res.parts.c) + " L_MI=" + std::to_string(res.parts.mi) +
                " L_CL=" + std::to_string(res.parts.cl) + " L_DI=" + std::to_string(res.parts.di) + ")");
  }
  res.grads = tape.backward(total);
  res.f_di = halves.f_di.value();
  res.f_ds = halves.f_ds.value();

  std::size_t hits = 0, known = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (auto c = graphs[i]->known_class()) {
      ++known;
      hits += argmax2(probs.value(), i) == *c;
    }
  }
  if (known > 0) res.accuracy = static_cast<double>(hits) / static_cast<double>(known);
  return res;
}

double mine_step(const ModelConfig& cfg, ParamStore& theta, Adam& optimizer, const Tensor& f_di,
                 const Tensor& f_ds, std::span<const std::size_t> perm, double lr,
                 std::uint64_t dropout_stream) {
  ParamStore updates;
  ad::Tape tape;
  ForwardContext ctx(tape, theta, ad::Mode::kTrain);
  ctx.set_dropout(dropout_stream, {});
  ctx.set_buffer_sink(&updates);
  ad::Var dv = disentangle::mine_estimate(ctx, cfg, tape.constant(f_di), tape.constant(f_ds), perm);
  const double value = dv.value().item();
  GradMap grads = tape.backward(ad::scale(dv, -1.0));
  optimizer.step(theta, grads, lr, [](std::string_view name) { return is_mine_param(name); });
  for (auto& [name, t] : updates.buffers) theta.buffers[name] = std::move(t);
  return value;
}

SourcePass source_pass(const ModelConfig& cfg, const ParamStore& global, const SiteState& source,
                       std::size_t round, const TrainOptions& opts) {
  if (source.role != SiteRole::kSource) throw Error("site " + source.id + " is not the source");
  SourcePass out;
  const double lp = round_lambda_p(round, opts);
  const auto batch = sample_batch(source, round, opts);
  out.result = site_objective(cfg, global, source, batch, round, lp, opts);
  out.metrics.site = source.id;
  out.metrics.role = SiteRole::kSource;
  out.metrics.parts = out.result.parts;
  out.metrics.total = out.result.total;
  out.metrics.lambda_p = lp;
  out.metrics.lr = lr_at(opts.lr, round, opts.rounds);
  out.metrics.accuracy = out.result.accuracy;
  return out;
}

SiteMetrics local_update(const ModelConfig& cfg, SiteState& site, const RoundMessage& broadcast,
                         std::size_t round, const TrainOptions& opts) {
  ParamStore received{broadcast.params, broadcast.buffers};
  ParamStore adopted = received;
  if (opts.local_bn && !site.theta.buffers.empty()) adopted.buffers = site.theta.buffers;
  site.theta = std::move(adopted);

  const double lp = round_lambda_p(round, opts);
  const double lr = lr_at(opts.lr, round, opts.rounds);
  const auto batch = sample_batch(site, round, opts);
  ObjectiveResult res = site_objective(cfg, site.theta, site, batch, round, lp, opts);

  GradMap grads = std::move(res.grads);
  if (opts.broadcast_source_gradient) {
    for (const auto& [name, g] : broadcast.grads) {
      auto it = grads.find(name);
      if (it == grads.end()) {
        grads.emplace(name, g);
      } else {
        if (it->second.shape() != g.shape()) throw Error("source gradient shape mismatch for " + name);
        it->second += g;
      }
    }
  }
  site.optimizer.step(site.theta, grads, lr, [](std::string_view name) { return !is_mine_param(name); });
  for (auto& [name, t] : res.bn_updates.buffers) site.theta.buffers[name] = std::move(t);
  if (cfg.use_rd) {
    const std::uint64_t key = round_key(opts, site, round);
    mine_step(cfg, site.theta, site.mine_optimizer, res.f_di, res.f_ds, res.perm, lr,
              stream_seed({key, tag(StreamTag::kDropout), 1}));
  }
  if (opts.use_cl) {
    update_queue(site, encoder_snapshot(site.theta));
    site.previous_global = std::move(received);
  }

  SiteMetrics m;
  m.site = site.id;
  m.role = effective_role(site, opts);
  m.parts = res.parts;
  m.total = res.total;
  m.lambda_p = lp;
  m.lr = lr;
  m.accuracy = res.accuracy;
  return m;
}

// --- protocols ----------------------------------------------------------------------

namespace {

RoundMessage make_broadcast(const ParamStore& theta, const SourcePass& src, std::size_t round,
                            const TrainOptions& opts) {
  RoundMessage msg;
  msg.direction = Direction::kBroadcast;
  msg.round = static_cast<std::uint32_t>(round);
  msg.params = theta.params;
  msg.buffers = theta.buffers;
  msg.source_loss = src.result.total;
  if (opts.broadcast_source_gradient) msg.grads = src.result.grads;
  return msg;
}

RoundMessage make_upload(const ParamStore& theta, std::size_t round) {
  RoundMessage msg;
  msg.direction = Direction::kUpload;
  msg.round = static_cast<std::uint32_t>(round);
  msg.params = theta.params;
  msg.buffers = theta.buffers;
  return msg;
}

}  // namespace

RoundResult two_site_round(const ModelConfig& cfg, const ParamStore& theta_source,
                           const SiteState& source, SiteState& target, std::size_t round,
                           const TrainOptions& opts) {
  RoundResult out;
  SourcePass src = source_pass(cfg, theta_source, source, round, opts);
  Channel down, up;
  const std::size_t bytes_down = down.send(make_broadcast(theta_source, src, round, opts));
  SiteMetrics m = local_update(cfg, target, down.receive(), round, opts);
  m.bytes_down = bytes_down;
  m.bytes_up = up.send(make_upload(target.theta, round));
  RoundMessage reply = up.receive();
  out.theta = ParamStore{std::move(reply.params), std::move(reply.buffers)};
  src.metrics.bytes_up = bytes_down;
  src.metrics.bytes_down = m.bytes_up;
  out.metrics.push_back(std::move(src.metrics));
  out.metrics.push_back(std::move(m));
  return out;
}

RoundResult multi_site_round(const ModelConfig& cfg, const ParamStore& global, const SiteState& source,
                             std::vector<SiteState>& sites, std::size_t round,
                             const TrainOptions& opts) {
  if (sites.empty()) throw Error("multi_site_round: no local sites");
  RoundResult out;
  SourcePass src = source_pass(cfg, global, source, round, opts);
  const RoundMessage broadcast = make_broadcast(global, src, round, opts);
  std::vector<ParamStore> uploads;
  uploads.reserve(sites.size());
  std::vector<SiteMetrics> local_metrics;
  for (SiteState& site : sites) {
    Channel down, up;
    const std::size_t bytes_down = down.send(broadcast);
    SiteMetrics m = local_update(cfg, site, down.receive(), round, opts);
    m.bytes_down = bytes_down;
    const NoiseSpec noise{opts.noise_alpha, stream_seed({round_key(opts, site, round), tag(StreamTag::kNoise)})};
    m.bytes_up = up.send(make_upload(add_noise(site.theta, noise), round));
    RoundMessage msg = up.receive();
    uploads.push_back(ParamStore{std::move(msg.params), std::move(msg.buffers)});
    src.metrics.bytes_up += bytes_down;
    src.metrics.bytes_down += m.bytes_up;
    local_metrics.push_back(std::move(m));
  }
  out.theta = aggregate(uploads);
  out.metrics.push_back(std::move(src.metrics));
  for (auto& m : local_metrics) out.metrics.push_back(std::move(m));
  return out;
}

RoundResult source_only_round(const ModelConfig& cfg, SiteState& source, std::size_t round,
                              const TrainOptions& opts) {
  TrainOptions local = opts;
  local.use_dat = false;
  local.use_cl = false;
  const double lr = lr_at(opts.lr, round, opts.rounds);
  const auto batch = sample_batch(source, round, local);
  ObjectiveResult res = site_objective(cfg, source.theta, source, batch, round, 0.0, local);
  source.optimizer.step(source.theta, res.grads, lr,
                        [](std::string_view name) { return !is_mine_param(name); });
  for (auto& [name, t] : res.bn_updates.buffers) source.theta.buffers[name] = std::move(t);
  if (cfg.use_rd) {
    mine_step(cfg, source.theta, source.mine_optimizer, res.f_di, res.f_ds, res.perm, lr,
              stream_seed({round_key(opts, source, round), tag(StreamTag::kDropout), 1}));
  }
  RoundResult out;
  out.theta = source.theta;
  SiteMetrics m;
  m.site = source.id;
  m.role = SiteRole::kSource;
  m.parts = res.parts;
  m.total = res.total;
  m.lr = lr;
  m.accuracy = res.accuracy;
  out.metrics.push_back(std::move(m));
  return out;
}

}  // namespace dafed::fed
