// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "bglab/common.hpp"

namespace bglab {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  int layers = 2;
  int width = 128;
  int heads = 4;
  int ffn_width = 512;
  double dropout = 0.1;
  int vocab = kVocabSize;
  int max_positions = 48;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct TensorInfo {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  bool decay = false;  // AdamW weight decay applies to matrices only

  std::size_t size() const noexcept { return static_cast<std::size_t>(rows) * cols; }
};

// Fixed tensor order shared by initialization, checkpoints and the optimizer.
class ParameterLayout {
 public:
  struct Layer {
    std::size_t ln1_gain, ln1_bias, qkv_weight, qkv_bias, out_weight, out_bias;
    std::size_t ln2_gain, ln2_bias, up_weight, up_bias, down_weight, down_bias;
  };

  explicit ParameterLayout(const ModelConfig& config);

  const std::vector<TensorInfo>& tensors() const noexcept { return tensors_; }
  std::size_t size() const noexcept { return size_; }

  std::size_t token_embedding = 0;
  std::size_t position_embedding = 0;
  std::vector<Layer> layers;
  std::size_t final_gain = 0;
  std::size_t final_bias = 0;
  std::size_t head_weight = 0;
  std::size_t head_bias = 0;

 private:
  std::size_t add(std::string name, int rows, int cols, bool decay);

  std::vector<TensorInfo> tensors_;
  std::size_t size_ = 0;
};

std::size_t parameter_count(const ModelConfig& config);

template <class T>
struct Model {
  ModelConfig config;
  std::uint64_t seed = 0;
  ParameterLayout layout{ModelConfig{}};
  std::vector<T> params;

  Eigen::Map<const RowMat<T>> mat(std::size_t offset, int rows, int cols) const {
    return {params.data() + offset, rows, cols};
  }
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> vec(std::size_t offset, int n) const {
    return {params.data() + offset, n};
  }
};

template <class T>
Model<T> init_model(const ModelConfig& config, std::uint64_t seed);

template <class To, class From>
Model<To> cast_model(const Model<From>& model) {
  Model<To> out;
  out.config = model.config;
  out.seed = model.seed;
  out.layout = model.layout;
  out.params.assign(model.params.begin(), model.params.end());
  return out;
}

// Content hash of config and parameter bytes.
template <class T>
std::string model_id(const Model<T>& model);

enum class Mode { Train, Eval };

// Saved intermediates of a batched forward pass, consumed by backward().
template <class T>
struct Activations {
  struct Layer {
    RowMat<T> x_in, xhat1, h1, qkv, attn_out, x_mid, xhat2, h2, up_pre, act;
    std::vector<T> rstd1, rstd2;
    std::vector<RowMat<T>> probs;         // batch*heads blocks of seq x seq
    std::vector<RowMat<T>> attn_mask;     // dropout keep/scale masks (train only)
    RowMat<T> ffn_mask;                   // dropout keep/scale mask (train only)
  };
  int batch = 0;
  int seq_len = 0;
  bool train = false;
  std::vector<Token> inputs;
  std::vector<Layer> layers;
  RowMat<T> x_final, xhat_final, h_final;
  std::vector<T> rstd_final;
};

// Batched forward over `batch` sequences of equal length laid out
// contiguously in `inputs`. Returns (batch*seq_len) x vocab logits; row t of
// a sequence depends only on inputs[0..t]. Pass a tape to enable backward().
template <class T>
RowMat<T> forward(const Model<T>& model, std::span<const Token> inputs, int batch, int seq_len, Mode mode,
                  std::mt19937_64* rng, std::type_identity_t<Activations<T>>* tape = nullptr);

// Accumulates d(loss)/d(params) into grad (same layout as model.params).
template <class T>
void backward(const Model<T>& model, const Activations<T>& tape, const RowMat<T>& dlogits, std::span<T> grad);

// Eval-mode logits for one input sequence (BOS included by the caller).
template <class T>
RowMat<T> forward_logits(const Model<T>& model, std::span<const Token> inputs);

// Softmax of the final logits row, in 64-bit.
template <class T>
Eigen::VectorXd student_distribution(const Model<T>& model, std::span<const Token> inputs);

Eigen::VectorXd softmax(const Eigen::Ref<const Eigen::VectorXd>& logits);
double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& logits);

// Per-layer keys/values of a committed prefix. Eval mode only.
template <class T>
struct InferenceCache {
  std::vector<RowMat<T>> keys;    // per layer, max_positions x width
  std::vector<RowMat<T>> values;
  int length = 0;

  static InferenceCache empty(const ModelConfig& config);
};

// Appends one token to the cache and returns the logits row it produces.
template <class T>
Eigen::Matrix<T, Eigen::Dynamic, 1> extend_cache(const Model<T>& model, InferenceCache<T>& cache, Token token);

// Commits a whole prefix; returns the logits row of the last token.
template <class T>
Eigen::Matrix<T, Eigen::Dynamic, 1> prefill(const Model<T>& model, InferenceCache<T>& cache,
                                            std::span<const Token> tokens);

// Lock-step incremental decoding of many rows. Each row continues one of
// the shared base prefixes (all of equal length) and owns a private stack of
// per-depth keys/values, so a depth-first walk can rewind and branch without
// copying caches.
template <class T>
class BatchDecoder {
 public:
  BatchDecoder(const Model<T>& model, std::vector<const InferenceCache<T>*> bases, std::vector<int> row_base,
               int max_depth);

  int rows() const noexcept { return static_cast<int>(row_base_.size()); }
  int depth() const noexcept { return depth_; }
  int position() const noexcept { return base_len_ + depth_; }

  // Feeds tokens[r] to every row r; returns rows x vocab logits.
  const RowMat<T>& step(std::span<const Token> tokens);
  void rewind(int depth);

 private:
  const Model<T>& model_;
  std::vector<const InferenceCache<T>*> bases_;
  std::vector<int> row_base_;
  int base_len_ = 0;
  int max_depth_ = 0;
  int depth_ = 0;
  std::vector<RowMat<T>> stack_keys_;    // per layer, (rows*max_depth) x width, row-major by row
  std::vector<RowMat<T>> stack_values_;
  RowMat<T> logits_;
};

}  // namespace bglab
