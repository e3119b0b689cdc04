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

#ifndef DAFED_MODEL_HPP_
#define DAFED_MODEL_HPP_

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dafed/autodiff.hpp"
#include "dafed/optim.hpp"

namespace dafed {

/// How the MINE statistics network sees a (f_di, f_ds) pair.
enum class MineInput {
  kSum,     // f_di + f_ds, width 128
  kConcat,  // f_di || f_ds, width 256
};

/// Layer sizes. Defaults follow the reference architecture table; only
/// `rois` depends on the data.
struct ModelConfig {
  std::size_t rois = 0;
  std::vector<std::size_t> gcn_widths{128, 64, 32, 16};
  std::vector<double> gcn_dropout{0.0, 0.1, 0.1, 0.1};
  std::size_t dis_hidden = 256;
  std::size_t dis_out = 128;
  double dis_dropout = 0.2;
  std::size_t heads = 8;
  std::size_t cls_hidden = 320;
  double cls_dropout = 0.5;
  std::size_t di_hidden = 160;
  double di_dropout = 0.5;
  std::size_t mine_hidden = 32;
  double mine_slope = 0.01;
  MineInput mine_input = MineInput::kSum;
  bool use_stfg = true;  // false: a dense layer on the flattened FC replaces the GCN stack
  bool use_rd = true;    // false: one stack feeds both halves, no MI term

  std::size_t embed_dim() const;  // 2 * sum(gcn_widths)
  std::size_t fused_dim() const { return 2 * dis_out; }
  std::size_t mine_in() const { return mine_input == MineInput::kSum ? dis_out : 2 * dis_out; }
  void validate() const;
};

/// Fresh parameters: Glorot-uniform weights, zero biases, unit BN scale,
/// running mean 0 / variance 1.
ParamStore init_theta(const ModelConfig& cfg, std::uint64_t seed);

inline bool is_mine_param(std::string_view name) { return name.starts_with("mine."); }

/// State threaded through one forward pass.
class ForwardContext {
 public:
  ForwardContext(ad::Tape& tape, const ParamStore& theta, ad::Mode mode)
      : tape_(tape), theta_(theta), mode_(mode) {}

  ad::Tape& tape() { return tape_; }
  const ParamStore& theta() const { return theta_; }
  ad::Mode mode() const { return mode_; }
  bool training() const { return mode_ == ad::Mode::kTrain; }

  /// Dropout masks come from stream (dropout_stream, layer, sample key).
  void set_dropout(std::uint64_t stream, std::vector<std::uint64_t> sample_keys) {
    dropout_stream_ = stream;
    sample_keys_ = std::move(sample_keys);
  }
  /// Train-mode BN updates are written here when set.
  void set_buffer_sink(ParamStore* sink) { sink_ = sink; }
  /// Parameters whose name starts with `prefix` are bound as constants.
  void freeze(std::string prefix) { frozen_.push_back(std::move(prefix)); }

  /// Tape node for a parameter, bound once per context.
  ad::Var param(const std::string& name);
  ad::Var constant(Tensor t) { return tape_.constant(std::move(t)); }

  ad::Var linear(const std::string& prefix, ad::Var x, bool bias);
  ad::Var batch_norm(const std::string& prefix, ad::Var x);
  ad::Var dropout(const std::string& layer, ad::Var x, double rate);

 private:
  ad::Tape& tape_;
  const ParamStore& theta_;
  ad::Mode mode_;
  std::uint64_t dropout_stream_ = 0;
  std::vector<std::uint64_t> sample_keys_;
  ParamStore* sink_ = nullptr;
  std::vector<std::string> frozen_;
  std::map<std::string, ad::Var> bound_;
};

}  // namespace dafed

#endif  // DAFED_MODEL_HPP_
