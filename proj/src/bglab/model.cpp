// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#include "bglab/model.hpp"

#include <cmath>
#include <cstring>
#include <limits>

namespace bglab {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kInitStd = 0.02;

template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

// tanh-approximate GELU, evaluated as whole-array expressions so Eigen can
// vectorize tanh.
template <class T>
RowMat<T> gelu(const RowMat<T>& x) {
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const auto a = x.array();
  return (static_cast<T>(0.5) * a * (static_cast<T>(1) + (c * (a + static_cast<T>(0.044715) * a.cube())).tanh()))
      .matrix();
}

template <class T>
RowMat<T> gelu_grad(const RowMat<T>& x) {
  constexpr T c = static_cast<T>(0.7978845608028654);
  const auto a = x.array();
  const auto a2 = a.square();
  const RowMat<T> t = (c * (a + static_cast<T>(0.044715) * a2 * a)).tanh().matrix();
  const auto ta = t.array();
  return (static_cast<T>(0.5) * (static_cast<T>(1) + ta) +
          static_cast<T>(0.5) * a * (static_cast<T>(1) - ta.square()) * c *
              (static_cast<T>(1) + static_cast<T>(3 * 0.044715) * a2))
      .matrix();
}

template <class T>
void layer_norm(const RowMat<T>& x, const T* gain, const T* bias, RowMat<T>& xhat, RowMat<T>& y,
                std::vector<T>* rstd_out) {
  const Eigen::Index n = x.rows(), w = x.cols();
  xhat.resize(n, w);
  y.resize(n, w);
  if (rstd_out) rstd_out->resize(n);
  Eigen::Map<const RowVec<T>> g(gain, w), b(bias, w);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    const T rstd = static_cast<T>(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    xhat.row(i) = (x.row(i).array() - mean) * rstd;
    y.row(i) = xhat.row(i).cwiseProduct(g) + b;
    if (rstd_out) (*rstd_out)[i] = rstd;
  }
}

// dx += LayerNorm backward of dy; accumulates gain/bias gradients.
template <class T>
void layer_norm_backward(const RowMat<T>& dy, const RowMat<T>& xhat, const std::vector<T>& rstd, const T* gain,
                         T* dgain, T* dbias, RowMat<T>& dx) {
  const Eigen::Index n = dy.rows(), w = dy.cols();
  Eigen::Map<const RowVec<T>> g(gain, w);
  Eigen::Map<RowVec<T>> dg(dgain, w), db(dbias, w);
  dg += dy.cwiseProduct(xhat).colwise().sum();
  db += dy.colwise().sum();
  for (Eigen::Index i = 0; i < n; ++i) {
    const RowVec<T> dxhat = dy.row(i).cwiseProduct(g);
    const T mean_d = dxhat.mean();
    const T mean_dx = dxhat.cwiseProduct(xhat.row(i)).mean();
    dx.row(i).array() += rstd[i] * (dxhat.array() - mean_d - xhat.row(i).array() * mean_dx);
  }
}

template <class T>
Eigen::Map<RowMat<T>> grad_mat(std::span<T> grad, std::size_t offset, int rows, int cols) {
  return {grad.data() + offset, rows, cols};
}

template <class T>
Eigen::Map<RowVec<T>> grad_vec(std::span<T> grad, std::size_t offset, int n) {
  return {grad.data() + offset, n};
}

}  // namespace

void ModelConfig::validate() const {
  if (layers < 1 || width < 1 || heads < 1 || ffn_width < 1 || vocab < 3 || max_positions < 1) {
    throw UsageError("model config dimensions must be positive");
  }
  if (width % heads != 0) throw UsageError("model width must be divisible by the number of heads");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw UsageError("dropout must be in [0, 1)");
}

ParameterLayout::ParameterLayout(const ModelConfig& c) {
  token_embedding = add("token_embedding", c.vocab, c.width, true);
  position_embedding = add("position_embedding", c.max_positions, c.width, true);
  for (int l = 0; l < c.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    Layer layer{};
    layer.ln1_gain = add(p + "ln1.gain", 1, c.width, false);
    layer.ln1_bias = add(p + "ln1.bias", 1, c.width, false);
    layer.qkv_weight = add(p + "attn.qkv.weight", c.width, 3 * c.width, true);
    layer.qkv_bias = add(p + "attn.qkv.bias", 1, 3 * c.width, false);
    layer.out_weight = add(p + "attn.out.weight", c.width, c.width, true);
    layer.out_bias = add(p + "attn.out.bias", 1, c.width, false);
    layer.ln2_gain = add(p + "ln2.gain", 1, c.width, false);
    layer.ln2_bias = add(p + "ln2.bias", 1, c.width, false);
    layer.up_weight = add(p + "ffn.up.weight", c.width, c.ffn_width, true);
    layer.up_bias = add(p + "ffn.up.bias", 1, c.ffn_width, false);
    layer.down_weight = add(p + "ffn.down.weight", c.ffn_width, c.width, true);
    layer.down_bias = add(p + "ffn.down.bias", 1, c.width, false);
    layers.push_back(layer);
  }
  final_gain = add("final_ln.gain", 1, c.width, false);
  final_bias = add("final_ln.bias", 1, c.width, false);
  head_weight = add("head.weight", c.width, c.vocab, true);
  head_bias = add("head.bias", 1, c.vocab, false);
}

std::size_t ParameterLayout::add(std::string name, int rows, int cols, bool decay) {
  const std::size_t offset = size_;
  tensors_.push_back({std::move(name), rows, cols, offset, decay});
  size_ += static_cast<std::size_t>(rows) * cols;
  return offset;
}

std::size_t parameter_count(const ModelConfig& config) { return ParameterLayout(config).size(); }

template <class T>
Model<T> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model<T> m;
  m.config = config;
  m.seed = seed;
  m.layout = ParameterLayout(config);
  m.params.assign(m.layout.size(), T(0));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, kInitStd);
  for (const auto& t : m.layout.tensors()) {
    T* p = m.params.data() + t.offset;
    const bool is_gain = t.name.ends_with(".gain");
    const bool is_bias = t.name.ends_with(".bias");
    for (std::size_t i = 0; i < t.size(); ++i) {
      p[i] = is_gain ? T(1) : is_bias ? T(0) : static_cast<T>(normal(rng));
    }
  }
  return m;
}

template <class T>
std::string model_id(const Model<T>& model) {
  Fnv1a h;
  const auto& c = model.config;
  const int dims[] = {c.layers, c.width, c.heads, c.ffn_width, c.vocab, c.max_positions};
  h.update(dims, sizeof dims);
  h.update(&c.dropout, sizeof c.dropout);
  // Hash the float32 image so a model and its 64-bit copy share an id.
  for (T v : model.params) {
    const float f = static_cast<float>(v);
    h.update(&f, sizeof f);
  }
  return h.hex();
}

Eigen::VectorXd softmax(const Eigen::Ref<const Eigen::VectorXd>& logits) {
  const double mx = logits.maxCoeff();
  Eigen::VectorXd e = (logits.array() - mx).exp();
  return e / e.sum();
}

double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& logits) {
  const double mx = logits.maxCoeff();
  return mx + std::log((logits.array() - mx).exp().sum());
}

template <class T>
RowMat<T> forward(const Model<T>& m, std::span<const Token> inputs, int batch, int seq_len, Mode mode,
                  std::mt19937_64* rng, std::type_identity_t<Activations<T>>* tape) {
  const ModelConfig& c = m.config;
  const auto& lay = m.layout;
  const int w = c.width, H = c.heads, dh = w / H, L = seq_len, N = batch * seq_len;
  if (static_cast<int>(inputs.size()) != N) throw UsageError("forward: input size does not match batch*seq_len");
  if (L < 1 || L > c.max_positions) {
    throw UsageError("sequence length " + std::to_string(L) + " exceeds max_positions " +
                     std::to_string(c.max_positions));
  }
  const bool train = mode == Mode::Train && c.dropout > 0.0;
  if (train && rng == nullptr) throw UsageError("train-mode forward requires an RNG for dropout");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - c.dropout));
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  auto tok = m.mat(lay.token_embedding, c.vocab, w);
  auto pos = m.mat(lay.position_embedding, c.max_positions, w);
  RowMat<T> x(N, w);
  for (int i = 0; i < N; ++i) {
    if (inputs[i] < 0 || inputs[i] >= c.vocab) throw UsageError("token out of vocabulary range");
    x.row(i) = tok.row(inputs[i]) + pos.row(i % L);
  }

  typename Activations<T>::Layer scratch;
  if (tape) {
    tape->batch = batch;
    tape->seq_len = L;
    tape->train = train;
    tape->inputs.assign(inputs.begin(), inputs.end());
    tape->layers.resize(c.layers);
  }

  for (int l = 0; l < c.layers; ++l) {
    const auto& P = lay.layers[l];
    auto& s = tape ? tape->layers[l] : scratch;
    s.x_in = x;
    layer_norm<T>(x, m.params.data() + P.ln1_gain, m.params.data() + P.ln1_bias, s.xhat1, s.h1, &s.rstd1);
    s.qkv.noalias() = s.h1 * m.mat(P.qkv_weight, w, 3 * w);
    s.qkv.rowwise() += m.vec(P.qkv_bias, 3 * w);

    s.attn_out.resize(N, w);
    s.probs.resize(static_cast<std::size_t>(batch) * H);
    if (train) s.attn_mask.resize(static_cast<std::size_t>(batch) * H);
    for (int b = 0; b < batch; ++b) {
      for (int h = 0; h < H; ++h) {
        const auto q = s.qkv.block(b * L, h * dh, L, dh);
        const auto k = s.qkv.block(b * L, w + h * dh, L, dh);
        const auto v = s.qkv.block(b * L, 2 * w + h * dh, L, dh);
        RowMat<T>& probs = s.probs[static_cast<std::size_t>(b) * H + h];
        probs.noalias() = (q * k.transpose()) * scale;
        for (int i = 0; i < L; ++i) {
          const T mx = probs.row(i).head(i + 1).maxCoeff();
          T sum = 0;
          for (int j = 0; j <= i; ++j) {
            probs(i, j) = std::exp(probs(i, j) - mx);
            sum += probs(i, j);
          }
          for (int j = 0; j <= i; ++j) probs(i, j) /= sum;
          for (int j = i + 1; j < L; ++j) probs(i, j) = 0;
        }
        if (train) {
          RowMat<T>& mask = s.attn_mask[static_cast<std::size_t>(b) * H + h];
          mask.resize(L, L);
          for (int i = 0; i < L; ++i) {
            for (int j = 0; j < L; ++j) mask(i, j) = uniform01(*rng) < c.dropout ? T(0) : keep_scale;
          }
          s.attn_out.block(b * L, h * dh, L, dh).noalias() = probs.cwiseProduct(mask) * v;
        } else {
          s.attn_out.block(b * L, h * dh, L, dh).noalias() = probs * v;
        }
      }
    }
    s.x_mid = x;
    s.x_mid.noalias() += s.attn_out * m.mat(P.out_weight, w, w);
    s.x_mid.rowwise() += m.vec(P.out_bias, w);

    layer_norm<T>(s.x_mid, m.params.data() + P.ln2_gain, m.params.data() + P.ln2_bias, s.xhat2, s.h2, &s.rstd2);
    s.up_pre.noalias() = s.h2 * m.mat(P.up_weight, w, c.ffn_width);
    s.up_pre.rowwise() += m.vec(P.up_bias, c.ffn_width);
    s.act = gelu<T>(s.up_pre);
    x = s.x_mid;
    if (train) {
      s.ffn_mask.resize(N, c.ffn_width);
      for (Eigen::Index i = 0; i < s.ffn_mask.size(); ++i) {
        s.ffn_mask.data()[i] = uniform01(*rng) < c.dropout ? T(0) : keep_scale;
      }
      x.noalias() += s.act.cwiseProduct(s.ffn_mask) * m.mat(P.down_weight, c.ffn_width, w);
    } else {
      x.noalias() += s.act * m.mat(P.down_weight, c.ffn_width, w);
    }
    x.rowwise() += m.vec(P.down_bias, w);
  }

  RowMat<T> xhat, hf;
  std::vector<T> rstd;
  layer_norm<T>(x, m.params.data() + lay.final_gain, m.params.data() + lay.final_bias, xhat, hf, &rstd);
  RowMat<T> logits = hf * m.mat(lay.head_weight, w, c.vocab);
  logits.rowwise() += m.vec(lay.head_bias, c.vocab);
  if (tape) {
    tape->x_final = std::move(x);
    tape->xhat_final = std::move(xhat);
    tape->h_final = std::move(hf);
    tape->rstd_final = std::move(rstd);
  }
  return logits;
}

template <class T>
void backward(const Model<T>& m, const Activations<T>& tape, const RowMat<T>& dlogits, std::span<T> grad) {
  const ModelConfig& c = m.config;
  const auto& lay = m.layout;
  const int w = c.width, H = c.heads, dh = w / H, L = tape.seq_len, B = tape.batch, N = B * L;
  if (grad.size() != m.params.size()) throw UsageError("backward: gradient buffer has the wrong size");
  if (dlogits.rows() != N || dlogits.cols() != c.vocab) throw UsageError("backward: dlogits shape mismatch");
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  grad_mat(grad, lay.head_weight, w, c.vocab).noalias() += tape.h_final.transpose() * dlogits;
  grad_vec(grad, lay.head_bias, c.vocab) += dlogits.colwise().sum();
  const RowMat<T> dhf = dlogits * m.mat(lay.head_weight, w, c.vocab).transpose();
  RowMat<T> dx = RowMat<T>::Zero(N, w);
  layer_norm_backward<T>(dhf, tape.xhat_final, tape.rstd_final, m.params.data() + lay.final_gain,
                         grad.data() + lay.final_gain, grad.data() + lay.final_bias, dx);

  for (int l = c.layers - 1; l >= 0; --l) {
    const auto& P = lay.layers[l];
    const auto& s = tape.layers[l];

    // Feed-forward block: x = x_mid + drop(gelu(LN2(x_mid) W1 + b1)) W2 + b2.
    const RowMat<T> act = tape.train ? RowMat<T>(s.act.cwiseProduct(s.ffn_mask)) : s.act;
    grad_mat(grad, P.down_weight, c.ffn_width, w).noalias() += act.transpose() * dx;
    grad_vec(grad, P.down_bias, w) += dx.colwise().sum();
    RowMat<T> dact = dx * m.mat(P.down_weight, c.ffn_width, w).transpose();
    if (tape.train) dact = dact.cwiseProduct(s.ffn_mask);
    const RowMat<T> dup = dact.cwiseProduct(gelu_grad<T>(s.up_pre));
    grad_mat(grad, P.up_weight, w, c.ffn_width).noalias() += s.h2.transpose() * dup;
    grad_vec(grad, P.up_bias, c.ffn_width) += dup.colwise().sum();
    const RowMat<T> dh2 = dup * m.mat(P.up_weight, w, c.ffn_width).transpose();
    RowMat<T> dx_mid = dx;
    layer_norm_backward<T>(dh2, s.xhat2, s.rstd2, m.params.data() + P.ln2_gain, grad.data() + P.ln2_gain,
                           grad.data() + P.ln2_bias, dx_mid);

    // Attention block: x_mid = x_in + attn(LN1(x_in)) Wo + bo.
    grad_mat(grad, P.out_weight, w, w).noalias() += s.attn_out.transpose() * dx_mid;
    grad_vec(grad, P.out_bias, w) += dx_mid.colwise().sum();
    const RowMat<T> dattn = dx_mid * m.mat(P.out_weight, w, w).transpose();
    RowMat<T> dqkv(N, 3 * w);
    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < H; ++h) {
        const std::size_t idx = static_cast<std::size_t>(b) * H + h;
        const auto q = s.qkv.block(b * L, h * dh, L, dh);
        const auto k = s.qkv.block(b * L, w + h * dh, L, dh);
        const auto v = s.qkv.block(b * L, 2 * w + h * dh, L, dh);
        const auto dout = dattn.block(b * L, h * dh, L, dh);
        const RowMat<T>& probs = s.probs[idx];
        RowMat<T> dprobs;
        if (tape.train) {
          const RowMat<T>& mask = s.attn_mask[idx];
          dqkv.block(b * L, 2 * w + h * dh, L, dh).noalias() = probs.cwiseProduct(mask).transpose() * dout;
          dprobs = (dout * v.transpose()).cwiseProduct(mask);
        } else {
          dqkv.block(b * L, 2 * w + h * dh, L, dh).noalias() = probs.transpose() * dout;
          dprobs = dout * v.transpose();
        }
        RowMat<T> dscores(L, L);
        for (int i = 0; i < L; ++i) {
          const T dot = probs.row(i).dot(dprobs.row(i));
          dscores.row(i) = probs.row(i).cwiseProduct((dprobs.row(i).array() - dot).matrix()) * scale;
        }
        dqkv.block(b * L, h * dh, L, dh).noalias() = dscores * k;
        dqkv.block(b * L, w + h * dh, L, dh).noalias() = dscores.transpose() * q;
      }
    }
    grad_mat(grad, P.qkv_weight, w, 3 * w).noalias() += s.h1.transpose() * dqkv;
    grad_vec(grad, P.qkv_bias, 3 * w) += dqkv.colwise().sum();
    const RowMat<T> dh1 = dqkv * m.mat(P.qkv_weight, w, 3 * w).transpose();
    dx = dx_mid;
    layer_norm_backward<T>(dh1, s.xhat1, s.rstd1, m.params.data() + P.ln1_gain, grad.data() + P.ln1_gain,
                           grad.data() + P.ln1_bias, dx);
  }

  auto dtok = grad_mat(grad, lay.token_embedding, c.vocab, w);
  auto dpos = grad_mat(grad, lay.position_embedding, c.max_positions, w);
  for (int i = 0; i < N; ++i) {
    dtok.row(tape.inputs[i]) += dx.row(i);
    dpos.row(i % L) += dx.row(i);
  }
}

template <class T>
RowMat<T> forward_logits(const Model<T>& model, std::span<const Token> inputs) {
  return forward(model, inputs, 1, static_cast<int>(inputs.size()), Mode::Eval, nullptr, nullptr);
}

template <class T>
Eigen::VectorXd student_distribution(const Model<T>& model, std::span<const Token> inputs) {
  const RowMat<T> logits = forward_logits(model, inputs);
  return softmax(logits.row(logits.rows() - 1).transpose().template cast<double>());
}

// ---------------------------------------------------------------------------
// Incremental decoding

namespace {

// One decoding step for `rows` rows that all sit at the same position.
// `store(l, qkv)` records the new keys/values of layer l; `attend(l, qkv, out)`
// writes each row's attention output (pre out-projection) into out.
template <class T, class Store, class Attend>
void decode_rows(const Model<T>& m, std::span<const Token> tokens, int position, RowMat<T>& logits, Store&& store,
                 Attend&& attend) {
  const ModelConfig& c = m.config;
  const auto& lay = m.layout;
  const int w = c.width, R = static_cast<int>(tokens.size());
  if (position >= c.max_positions) {
    throw BudgetError("decoder capacity exceeded: position " + std::to_string(position) + " >= max_positions " +
                      std::to_string(c.max_positions));
  }
  auto tok = m.mat(lay.token_embedding, c.vocab, w);
  auto pos = m.mat(lay.position_embedding, c.max_positions, w);
  RowMat<T> x(R, w);
  for (int r = 0; r < R; ++r) {
    if (tokens[r] < 0 || tokens[r] >= c.vocab) throw UsageError("token out of vocabulary range");
    x.row(r) = tok.row(tokens[r]) + pos.row(position);
  }
  RowMat<T> xhat, h, qkv, att(R, w), up;
  for (int l = 0; l < c.layers; ++l) {
    const auto& P = lay.layers[l];
    layer_norm<T>(x, m.params.data() + P.ln1_gain, m.params.data() + P.ln1_bias, xhat, h, nullptr);
    qkv.noalias() = h * m.mat(P.qkv_weight, w, 3 * w);
    qkv.rowwise() += m.vec(P.qkv_bias, 3 * w);
    store(l, qkv);
    attend(l, qkv, att);
    x.noalias() += att * m.mat(P.out_weight, w, w);
    x.rowwise() += m.vec(P.out_bias, w);
    layer_norm<T>(x, m.params.data() + P.ln2_gain, m.params.data() + P.ln2_bias, xhat, h, nullptr);
    up.noalias() = h * m.mat(P.up_weight, w, c.ffn_width);
    up.rowwise() += m.vec(P.up_bias, c.ffn_width);
    up = gelu<T>(up);
    x.noalias() += up * m.mat(P.down_weight, c.ffn_width, w);
    x.rowwise() += m.vec(P.down_bias, w);
  }
  layer_norm<T>(x, m.params.data() + lay.final_gain, m.params.data() + lay.final_bias, xhat, h, nullptr);
  logits.noalias() = h * m.mat(lay.head_weight, w, c.vocab);
  logits.rowwise() += m.vec(lay.head_bias, c.vocab);
}

// Softmax-weighted sum over the keys produced by `key(j)` / `value(j)`, j < n.
template <class T, class KeyFn, class ValueFn>
void attend_one(const T* q, int dh, T scale, int n, KeyFn&& key, ValueFn&& value, T* out, std::vector<T>& scores) {
  scores.resize(n);
  T mx = -std::numeric_limits<T>::infinity();
  for (int j = 0; j < n; ++j) {
    const T* k = key(j);
    T s = 0;
    for (int d = 0; d < dh; ++d) s += q[d] * k[d];
    scores[j] = s * scale;
    mx = std::max(mx, scores[j]);
  }
  T sum = 0;
  for (int j = 0; j < n; ++j) {
    scores[j] = std::exp(scores[j] - mx);
    sum += scores[j];
  }
  std::fill(out, out + dh, T(0));
  for (int j = 0; j < n; ++j) {
    const T p = scores[j] / sum;
    const T* v = value(j);
    for (int d = 0; d < dh; ++d) out[d] += p * v[d];
  }
}

}  // namespace

template <class T>
InferenceCache<T> InferenceCache<T>::empty(const ModelConfig& config) {
  InferenceCache<T> cache;
  cache.keys.assign(config.layers, RowMat<T>::Zero(config.max_positions, config.width));
  cache.values.assign(config.layers, RowMat<T>::Zero(config.max_positions, config.width));
  return cache;
}

template <class T>
Eigen::Matrix<T, Eigen::Dynamic, 1> extend_cache(const Model<T>& m, InferenceCache<T>& cache, Token token) {
  const int w = m.config.width, H = m.config.heads, dh = w / H;
  if (static_cast<int>(cache.keys.size()) != m.config.layers) throw UsageError("cache does not match model");
  if (cache.length >= m.config.max_positions) throw BudgetError("inference cache capacity exceeded");
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  const int pos = cache.length;
  const Token tokens[1] = {token};
  RowMat<T> logits;
  std::vector<T> scores;
  decode_rows<T>(
      m, tokens, pos, logits,
      [&](int l, const RowMat<T>& qkv) {
        cache.keys[l].row(pos) = qkv.block(0, w, 1, w);
        cache.values[l].row(pos) = qkv.block(0, 2 * w, 1, w);
      },
      [&](int l, const RowMat<T>& qkv, RowMat<T>& out) {
        for (int h = 0; h < H; ++h) {
          attend_one<T>(
              qkv.data() + h * dh, dh, scale, pos + 1, [&](int j) { return cache.keys[l].data() + j * w + h * dh; },
              [&](int j) { return cache.values[l].data() + j * w + h * dh; }, out.data() + h * dh, scores);
        }
      });
  cache.length = pos + 1;
  return logits.row(0).transpose();
}

template <class T>
Eigen::Matrix<T, Eigen::Dynamic, 1> prefill(const Model<T>& model, InferenceCache<T>& cache,
                                            std::span<const Token> tokens) {
  if (tokens.empty()) throw UsageError("prefill needs at least one token");
  Eigen::Matrix<T, Eigen::Dynamic, 1> last;
  for (Token t : tokens) last = extend_cache(model, cache, t);
  return last;
}

template <class T>
BatchDecoder<T>::BatchDecoder(const Model<T>& model, std::vector<const InferenceCache<T>*> bases,
                              std::vector<int> row_base, int max_depth)
    : model_(model), bases_(std::move(bases)), row_base_(std::move(row_base)), max_depth_(max_depth) {
  if (bases_.empty()) throw UsageError("batch decoder needs at least one base cache");
  base_len_ = bases_.front()->length;
  for (const auto* b : bases_) {
    if (b->length != base_len_) throw UsageError("batch decoder base caches must have equal length");
  }
  for (int idx : row_base_) {
    if (idx < 0 || idx >= static_cast<int>(bases_.size())) throw UsageError("row refers to a missing base cache");
  }
  if (base_len_ + max_depth_ > model.config.max_positions) throw BudgetError("batch decoder depth exceeds capacity");
  const Eigen::Index rows = static_cast<Eigen::Index>(max_depth_) * row_base_.size();
  stack_keys_.assign(model.config.layers, RowMat<T>(rows, model.config.width));
  stack_values_.assign(model.config.layers, RowMat<T>(rows, model.config.width));
}

template <class T>
const RowMat<T>& BatchDecoder<T>::step(std::span<const Token> tokens) {
  const int R = rows();
  if (static_cast<int>(tokens.size()) != R) throw UsageError("batch decoder expects one token per row");
  if (depth_ >= max_depth_) throw BudgetError("batch decoder depth exhausted");
  const int w = model_.config.width, H = model_.config.heads, dh = w / H;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  const int d = depth_;
  std::vector<T> scores;
  decode_rows<T>(
      model_, tokens, base_len_ + d, logits_,
      [&](int l, const RowMat<T>& qkv) {
        for (int r = 0; r < R; ++r) {
          const Eigen::Index slot = static_cast<Eigen::Index>(r) * max_depth_ + d;
          stack_keys_[l].row(slot) = qkv.block(r, w, 1, w);
          stack_values_[l].row(slot) = qkv.block(r, 2 * w, 1, w);
        }
      },
      [&](int l, const RowMat<T>& qkv, RowMat<T>& out) {
        using Block = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
        using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
        const int nb = base_len_, ns = d + 1;
        Vec sb(nb), ss(ns);
        for (int r = 0; r < R; ++r) {
          const InferenceCache<T>& base = *bases_[row_base_[r]];
          const T* sk = stack_keys_[l].data() + static_cast<Eigen::Index>(r) * max_depth_ * w;
          const T* sv = stack_values_[l].data() + static_cast<Eigen::Index>(r) * max_depth_ * w;
          for (int h = 0; h < H; ++h) {
            const int off = h * dh;
            const Eigen::Map<const Vec> q(qkv.data() + static_cast<Eigen::Index>(r) * 3 * w + off, dh);
            const Block kb(base.keys[l].data() + off, nb, dh, Eigen::OuterStride<>(w));
            const Block vb(base.values[l].data() + off, nb, dh, Eigen::OuterStride<>(w));
            const Block ks(sk + off, ns, dh, Eigen::OuterStride<>(w));
            const Block vs(sv + off, ns, dh, Eigen::OuterStride<>(w));
            sb.noalias() = (kb * q) * scale;
            ss.noalias() = (ks * q) * scale;
            const T mx = std::max(nb > 0 ? sb.maxCoeff() : -std::numeric_limits<T>::infinity(), ss.maxCoeff());
            sb = (sb.array() - mx).exp();
            ss = (ss.array() - mx).exp();
            const T inv = static_cast<T>(1) / (sb.sum() + ss.sum());
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> o(out.data() + static_cast<Eigen::Index>(r) * w + off, dh);
            o.noalias() = sb.transpose() * vb;
            o.noalias() += ss.transpose() * vs;
            o *= inv;
          }
        }
      });
  ++depth_;
  return logits_;
}

template <class T>
void BatchDecoder<T>::rewind(int depth) {
  if (depth < 0 || depth > depth_) throw UsageError("batch decoder can only rewind to an earlier depth");
  depth_ = depth;
}

#define BGLAB_INSTANTIATE(T)                                                                                     \
  template Model<T> init_model<T>(const ModelConfig&, std::uint64_t);                                            \
  template std::string model_id<T>(const Model<T>&);                                                             \
  template RowMat<T> forward<T>(const Model<T>&, std::span<const Token>, int, int, Mode, std::mt19937_64*,       \
                                Activations<T>*);                                                                \
  template void backward<T>(const Model<T>&, const Activations<T>&, const RowMat<T>&, std::span<T>);             \
  template RowMat<T> forward_logits<T>(const Model<T>&, std::span<const Token>);                                 \
  template Eigen::VectorXd student_distribution<T>(const Model<T>&, std::span<const Token>);                     \
  template struct InferenceCache<T>;                                                                             \
  template Eigen::Matrix<T, Eigen::Dynamic, 1> extend_cache<T>(const Model<T>&, InferenceCache<T>&, Token);      \
  template Eigen::Matrix<T, Eigen::Dynamic, 1> prefill<T>(const Model<T>&, InferenceCache<T>&,                   \
                                                          std::span<const Token>);                               \
  template class BatchDecoder<T>;

BGLAB_INSTANTIATE(float)
BGLAB_INSTANTIATE(double)

#undef BGLAB_INSTANTIATE

}  // namespace bglab
