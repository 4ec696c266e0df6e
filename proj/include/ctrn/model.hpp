#pragma once

// The CTRN architecture. A video's T x D1 feature sequence is lifted to a
// class-specific T x C x D2 map (RTM), refined by L blocks that alternate
// class-graph message passing (C-GCN, with a learnable base adjacency plus
// an input-conditioned attention term shared across time) and temporal
// convolution (TCN, shared across classes), and classified by a sigmoid
// head that first passes evidence over the fixed co-occurrence adjacency
// (G-Classifier). An auxiliary head reads the RTM output through the same
// classifier weights.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ctrn/common.hpp"
#include "ctrn/cooccurrence.hpp"
#include "ctrn/tensor.hpp"
#include "ctrn/types.hpp"

namespace ctrn {

struct CtrnConfig {
  std::size_t D1 = 1024;  // input feature width
  std::size_t D2 = 64;    // class-specific width, D1 / beta
  std::size_t C = 0;      // class count, comes from the dataset
  std::size_t num_blocks = 5;
  std::size_t kernel_size = 9;
  std::size_t padding = 4;
  std::size_t attention_bottleneck = 0;  // 0: auto, max(1, D2/4)
  double dropout_p = 0.3;
  double alpha = 1.2;       // auxiliary loss weight
  double theta = 0.05;      // co-occurrence threshold
  double reweight_p = 0.2;  // off-diagonal mass of the re-weighted adjacency
  bool use_rtm_mlp = true;
  bool use_cgcn = true;
  bool use_tcn = true;
  bool use_gclassifier = true;

  std::size_t beta() const { return D2 == 0 ? 0 : D1 / D2; }

  std::size_t bottleneck() const {
    return attention_bottleneck != 0 ? attention_bottleneck
                                     : std::max<std::size_t>(1, D2 / 4);
  }

  void validate() const {
    if (C == 0 || D1 == 0 || D2 == 0 || num_blocks == 0) {
      throw ValueError("CtrnConfig: C, D1, D2 and num_blocks must be >= 1");
    }
    if (D1 % D2 != 0) {
      throw ValueError("CtrnConfig: D2 must divide D1 (got D1=" +
                       std::to_string(D1) + ", D2=" + std::to_string(D2) + ")");
    }
    if (kernel_size % 2 == 0) {
      throw ValueError("CtrnConfig: kernel_size must be odd");
    }
    if (padding != (kernel_size - 1) / 2) {
      throw ValueError("CtrnConfig: padding must equal (kernel_size-1)/2");
    }
    if (dropout_p < 0.0 || dropout_p >= 1.0) {
      throw ValueError("CtrnConfig: dropout_p must be in [0, 1)");
    }
    if (theta < 0.0 || theta > 1.0) {
      throw ValueError("CtrnConfig: theta must be in [0, 1]");
    }
    if (reweight_p <= 0.0 || reweight_p >= 1.0) {
      throw ValueError("CtrnConfig: reweight_p must be in (0, 1)");
    }
    if (alpha < 0.0) throw ValueError("CtrnConfig: alpha must be >= 0");
  }
};

inline nlohmann::json ctrn_config_to_json(const CtrnConfig& cfg) {
  return nlohmann::json{{"D1", cfg.D1},
                        {"D2", cfg.D2},
                        {"C", cfg.C},
                        {"num_blocks", cfg.num_blocks},
                        {"kernel_size", cfg.kernel_size},
                        {"padding", cfg.padding},
                        {"attention_bottleneck", cfg.attention_bottleneck},
                        {"dropout_p", cfg.dropout_p},
                        {"alpha", cfg.alpha},
                        {"theta", cfg.theta},
                        {"reweight_p", cfg.reweight_p},
                        {"use_rtm_mlp", cfg.use_rtm_mlp},
                        {"use_cgcn", cfg.use_cgcn},
                        {"use_tcn", cfg.use_tcn},
                        {"use_gclassifier", cfg.use_gclassifier}};
}

inline CtrnConfig ctrn_config_from_json(const nlohmann::json& doc) {
  CtrnConfig cfg;
  try {
    cfg.D1 = doc.value("D1", cfg.D1);
    cfg.D2 = doc.value("D2", cfg.D2);
    cfg.C = doc.value("C", cfg.C);
    cfg.num_blocks = doc.value("num_blocks", cfg.num_blocks);
    cfg.kernel_size = doc.value("kernel_size", cfg.kernel_size);
    cfg.padding = doc.value("padding", (cfg.kernel_size - 1) / 2);
    cfg.attention_bottleneck =
        doc.value("attention_bottleneck", cfg.attention_bottleneck);
    cfg.dropout_p = doc.value("dropout_p", cfg.dropout_p);
    cfg.alpha = doc.value("alpha", cfg.alpha);
    cfg.theta = doc.value("theta", cfg.theta);
    cfg.reweight_p = doc.value("reweight_p", cfg.reweight_p);
    cfg.use_rtm_mlp = doc.value("use_rtm_mlp", cfg.use_rtm_mlp);
    cfg.use_cgcn = doc.value("use_cgcn", cfg.use_cgcn);
    cfg.use_tcn = doc.value("use_tcn", cfg.use_tcn);
    cfg.use_gclassifier = doc.value("use_gclassifier", cfg.use_gclassifier);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("CtrnConfig: bad JSON: " + std::string(e.what()));
  }
  return cfg;
}

// --- stateless forward pieces ----------------------------------------------
// These take explicit weights so each equation can be tested against a
// direct oracle in isolation.

// Per-class linear transform with ReLU: X (T x D1) -> T x C x D2. The
// weight tensor is G x D1 x D2 with G == C (per-class maps) or G == 1 (one
// shared map duplicated across classes).
template <class T>
Tensor<T> rtm_transform(const Tensor<T>& x, const Tensor<T>& weight,
                        const Tensor<T>& bias, std::size_t num_classes) {
  if (x.rank() != 2 || weight.rank() != 3 || bias.rank() != 2) {
    throw ShapeError("rtm_transform: expected TxD1, GxD1xD2, GxD2");
  }
  if (x.extent(1) != weight.extent(1)) {
    throw ShapeError("rtm_transform: feature width " + shape_str(x.shape()) +
                     " does not match weight " + shape_str(weight.shape()));
  }
  const std::size_t groups = weight.extent(0);
  if (groups != num_classes && groups != 1) {
    throw ShapeError("rtm_transform: weight groups must be 1 or C");
  }
  std::vector<Tensor<T>> per_class;
  per_class.reserve(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    const std::size_t g = groups == 1 ? 0 : c;
    auto h = relu(add_rowvec(matmul(x, slice0(weight, g)), slice0(bias, g)));
    per_class.push_back(std::move(h));
  }
  // C x T x D2 -> T x C x D2
  return permute(stack0(per_class), {1, 0, 2});
}

// Attention adjacency of Eq-style self-attention: embed the class map twice
// through 1x1 bottleneck projections, contract over (time, bottleneck) to a
// C x C matrix, and normalize each row with softmax.
template <class T>
Tensor<T> cgcn_attention(const Tensor<T>& class_map, const Tensor<T>& w1,
                         const Tensor<T>& w2) {
  if (class_map.rank() != 3) {
    throw ShapeError("cgcn_attention: expected TxCxD2, got " +
                     shape_str(class_map.shape()));
  }
  const std::size_t t_len = class_map.extent(0), classes = class_map.extent(1),
                    width = class_map.extent(2);
  if (w1.rank() != 2 || w2.rank() != 2 || w1.extent(0) != width ||
      w2.extent(0) != width || w1.extent(1) != w2.extent(1)) {
    throw ShapeError("cgcn_attention: bottleneck weights must both be D2xD'");
  }
  const std::size_t bneck = w1.extent(1);
  auto flat = reshape(class_map, {t_len * classes, width});
  auto e1 = reshape(matmul(flat, w1), {t_len, classes, bneck});
  auto e2 = reshape(matmul(flat, w2), {t_len, classes, bneck});
  // raw[i][j] = sum_{t,d} e1[t,i,d] * e2[t,j,d]
  auto left = reshape(permute(e1, {1, 0, 2}), {classes, t_len * bneck});
  auto right = reshape(permute(e2, {0, 2, 1}), {t_len * bneck, classes});
  return softmax(matmul(left, right), 1);
}

// Graph convolution shared across time: Out[t] = A' * In[t] * W3.
template <class T>
Tensor<T> cgcn_forward(const Tensor<T>& class_map, const Tensor<T>& adjacency,
                       const Tensor<T>& w3) {
  if (class_map.rank() != 3) {
    throw ShapeError("cgcn_forward: expected TxCxD2");
  }
  const std::size_t t_len = class_map.extent(0), classes = class_map.extent(1),
                    width = class_map.extent(2);
  if (adjacency.rank() != 2 || adjacency.extent(0) != classes ||
      adjacency.extent(1) != classes) {
    throw ShapeError("cgcn_forward: adjacency must be CxC, got " +
                     shape_str(adjacency.shape()));
  }
  if (w3.rank() != 2 || w3.extent(0) != width || w3.extent(1) != width) {
    throw ShapeError("cgcn_forward: W3 must be D2xD2");
  }
  // message passing: fold (t, d) together so one matmul applies A' at all t
  auto by_class = reshape(permute(class_map, {1, 0, 2}), {classes, t_len * width});
  auto mixed = permute(reshape(matmul(adjacency, by_class), {classes, t_len, width}),
                       {1, 0, 2});
  // vertex feature update
  auto flat = reshape(mixed, {t_len * classes, width});
  return reshape(matmul(flat, w3), {t_len, classes, width});
}

// Temporal convolution along the time axis, classes folded into the batch.
template <class T>
Tensor<T> tcn_forward(const Tensor<T>& class_map, const Tensor<T>& weight,
                      const Tensor<T>& bias, std::size_t padding) {
  if (class_map.rank() != 3) {
    throw ShapeError("tcn_forward: expected TxCxD2");
  }
  auto by_channel = permute(class_map, {1, 2, 0});  // C x D2 x T
  auto out = conv1d_same(by_channel, weight, bias, padding);
  return permute(out, {2, 0, 1});
}

// Classifier logits: per time step, message passing over the fixed
// co-occurrence adjacency followed by a shared D2 -> 1 projection.
// logits[t] = A_S * (X[t] * W_S) + b.
template <class T>
Tensor<T> gclassifier_logits(const Tensor<T>& class_map,
                             const Tensor<T>& adjacency_t,
                             const Tensor<T>& weight, const Tensor<T>& bias) {
  if (class_map.rank() != 3) {
    throw ShapeError("gclassifier_logits: expected TxCxD2");
  }
  const std::size_t t_len = class_map.extent(0), classes = class_map.extent(1),
                    width = class_map.extent(2);
  if (adjacency_t.rank() != 2 || adjacency_t.extent(0) != classes ||
      adjacency_t.extent(1) != classes) {
    throw ShapeError("gclassifier_logits: adjacency must be CxC for C=" +
                     std::to_string(classes) + ", got " +
                     shape_str(adjacency_t.shape()));
  }
  if (weight.rank() != 2 || weight.extent(0) != width || weight.extent(1) != 1) {
    throw ShapeError("gclassifier_logits: weight must be D2x1");
  }
  auto flat = reshape(class_map, {t_len * classes, width});
  auto evidence = reshape(matmul(flat, weight), {t_len, classes});
  // rows of `evidence` are per-time class vectors; right-multiplying by the
  // transposed adjacency applies A_S to each of them
  return add(matmul(evidence, adjacency_t), bias);
}

// --- batch normalization -----------------------------------------------------

// Normalizes an N x D2 matrix per channel over the unmasked rows. Training
// statistics are part of the autodiff graph; eval mode applies the running
// estimates as constants.
template <class T>
struct BatchNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNorm(std::size_t width = 0)
      : gamma(Tensor<T>::full({std::max<std::size_t>(width, 1)}, T(1))),
        beta(Tensor<T>::zeros({std::max<std::size_t>(width, 1)})),
        running_mean(width, T(0)),
        running_var(width, T(1)) {
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
  }

  Tensor<T> forward(const Tensor<T>& x, bool training,
                    const std::vector<std::uint8_t>* row_mask = nullptr,
                    bool update_stats = true) {
    if (x.rank() != 2 || x.extent(1) != gamma.extent(0)) {
      throw ShapeError("BatchNorm: expected NxD2 with D2=" +
                       std::to_string(gamma.extent(0)) + ", got " +
                       shape_str(x.shape()));
    }
    if (training) {
      auto mean = mean_over_rows(x, row_mask);
      auto centered = add_rowvec(x, scale(mean, T(-1)));
      auto var = mean_over_rows(mul(centered, centered), row_mask);
      auto inv_std = rsqrt(add_scalar(var, static_cast<T>(eps)));
      if (update_stats) {
        const T m = static_cast<T>(momentum);
        for (std::size_t c = 0; c < running_mean.size(); ++c) {
          running_mean[c] = (T(1) - m) * running_mean[c] + m * mean.values()[c];
          running_var[c] = (T(1) - m) * running_var[c] + m * var.values()[c];
        }
      }
      return add_rowvec(mul_rowvec(mul_rowvec(centered, inv_std), gamma), beta);
    }
    const std::size_t width = running_mean.size();
    std::vector<T> neg_mean(width), inv_std(width);
    for (std::size_t c = 0; c < width; ++c) {
      neg_mean[c] = -running_mean[c];
      inv_std[c] = T(1) / std::sqrt(running_var[c] + static_cast<T>(eps));
    }
    auto centered = add_rowvec(x, Tensor<T>::from({width}, std::move(neg_mean)));
    auto scaled = mul_rowvec(centered, Tensor<T>::from({width}, std::move(inv_std)));
    return add_rowvec(mul_rowvec(scaled, gamma), beta);
  }
};

// --- the assembled model -----------------------------------------------------

template <class T>
class CtrnModel {
 public:
  struct Block {
    Tensor<T> base_adj;  // learnable C x C, initialized to 1/C
    Tensor<T> w1, w2;    // bottleneck projections D2 x D'
    Tensor<T> w3;        // vertex update D2 x D2
    BatchNorm<T> bn1;
    Tensor<T> tcn_weight;  // D2 x D2 x K
    Tensor<T> tcn_bias;    // D2
    BatchNorm<T> bn2;
  };

  struct Output {
    Tensor<T> ctm_logits;
    Tensor<T> rtm_logits;
    Tensor<T> ctm_probs;
    Tensor<T> rtm_probs;

    ScoreMatrix ctm_scores() const { return to_scores(ctm_logits); }
    ScoreMatrix rtm_scores() const { return to_scores(rtm_logits); }

   private:
    static ScoreMatrix to_scores(const Tensor<T>& logits) {
      std::vector<double> vals(logits.values().begin(), logits.values().end());
      return ScoreMatrix::from_logits(logits.extent(0), logits.extent(1),
                                      std::move(vals));
    }
  };

  // `adjacency` is the re-weighted co-occurrence matrix A_S (row-major CxC);
  // ignored and replaced by identity when use_gclassifier is off.
  CtrnModel(CtrnConfig config, std::vector<double> adjacency, std::uint64_t seed)
      : cfg_(std::move(config)) {
    cfg_.validate();
    const std::size_t C = cfg_.C, D1 = cfg_.D1, D2 = cfg_.D2;
    if (!cfg_.use_gclassifier) {
      adjacency = identity_adjacency(C);
    }
    if (adjacency.size() != C * C) {
      throw ShapeError("CtrnModel: adjacency must be CxC");
    }
    a_s_ = std::move(adjacency);
    // the forward pass right-multiplies row vectors, so keep A_S transposed
    std::vector<T> at(C * C);
    for (std::size_t i = 0; i < C; ++i) {
      for (std::size_t j = 0; j < C; ++j) {
        at[j * C + i] = static_cast<T>(a_s_[i * C + j]);
      }
    }
    a_s_t_ = Tensor<T>::from({C, C}, std::move(at));

    RngEngine rng(derive_seed(seed, 0xC78AULL));
    const std::size_t groups = cfg_.use_rtm_mlp ? C : 1;
    const T rtm_bound = T(1) / std::sqrt(static_cast<T>(D1));
    rtm_weight_ = Tensor<T>::rand_uniform({groups, D1, D2}, rng, -rtm_bound,
                                          rtm_bound, true);
    rtm_bias_ =
        Tensor<T>::rand_uniform({groups, D2}, rng, -rtm_bound, rtm_bound, true);
    register_param("rtm.weight", rtm_weight_);
    register_param("rtm.bias", rtm_bias_);

    const std::size_t bneck = cfg_.bottleneck();
    const T gcn_bound = T(1) / std::sqrt(static_cast<T>(D2));
    const T tcn_bound =
        T(1) / std::sqrt(static_cast<T>(D2 * cfg_.kernel_size));
    blocks_.reserve(cfg_.num_blocks);
    for (std::size_t b = 0; b < cfg_.num_blocks; ++b) {
      Block block;
      const std::string prefix = "blocks." + std::to_string(b) + ".";
      if (cfg_.use_cgcn) {
        block.base_adj =
            Tensor<T>::full({C, C}, T(1) / static_cast<T>(C));
        block.base_adj.set_requires_grad(true);
        block.w1 = Tensor<T>::rand_uniform({D2, bneck}, rng, -gcn_bound,
                                           gcn_bound, true);
        block.w2 = Tensor<T>::rand_uniform({D2, bneck}, rng, -gcn_bound,
                                           gcn_bound, true);
        block.w3 = Tensor<T>::rand_uniform({D2, D2}, rng, -gcn_bound,
                                           gcn_bound, true);
        block.bn1 = BatchNorm<T>(D2);
        register_param(prefix + "cgcn.base_adj", block.base_adj);
        register_param(prefix + "cgcn.w1", block.w1);
        register_param(prefix + "cgcn.w2", block.w2);
        register_param(prefix + "cgcn.w3", block.w3);
        register_param(prefix + "bn1.gamma", block.bn1.gamma);
        register_param(prefix + "bn1.beta", block.bn1.beta);
      }
      if (cfg_.use_tcn) {
        block.tcn_weight =
            Tensor<T>::rand_uniform({D2, D2, cfg_.kernel_size}, rng,
                                    -tcn_bound, tcn_bound, true);
        block.tcn_bias = Tensor<T>::rand_uniform({D2}, rng, -tcn_bound,
                                                 tcn_bound, true);
        block.bn2 = BatchNorm<T>(D2);
        register_param(prefix + "tcn.weight", block.tcn_weight);
        register_param(prefix + "tcn.bias", block.tcn_bias);
        register_param(prefix + "bn2.gamma", block.bn2.gamma);
        register_param(prefix + "bn2.beta", block.bn2.beta);
      }
      blocks_.push_back(std::move(block));
    }

    clf_weight_ = Tensor<T>::rand_uniform({D2, 1}, rng, -gcn_bound, gcn_bound,
                                          true);
    clf_bias_ =
        Tensor<T>::rand_uniform({1}, rng, -gcn_bound, gcn_bound, true);
    register_param("classifier.weight", clf_weight_);
    register_param("classifier.bias", clf_bias_);
  }

  // Forward pass for one video. The mask flags valid time steps; masked
  // steps are excluded from normalization statistics (the loss and metrics
  // exclude them separately). `rng` drives dropout and may be null when
  // not training or dropout_p == 0.
  Output forward(const FeatureSequence& features, bool training,
                 RngEngine* rng = nullptr,
                 const std::vector<std::uint8_t>* time_mask = nullptr,
                 bool update_stats = true) {
    if (features.D1 != cfg_.D1) {
      throw ShapeError("CtrnModel::forward: feature width " +
                       std::to_string(features.D1) + " but config D1=" +
                       std::to_string(cfg_.D1));
    }
    std::vector<T> vals(features.values.begin(), features.values.end());
    auto x = Tensor<T>::from({features.T, cfg_.D1}, std::move(vals));
    return forward(x, training, rng, time_mask, update_stats);
  }

  Output forward(const Tensor<T>& x, bool training, RngEngine* rng = nullptr,
                 const std::vector<std::uint8_t>* time_mask = nullptr,
                 bool update_stats = true) {
    const std::size_t t_len = x.extent(0);
    if (time_mask && time_mask->size() != t_len) {
      throw ShapeError("CtrnModel::forward: time mask length mismatch");
    }
    std::vector<std::uint8_t> row_mask;
    const std::vector<std::uint8_t>* rows = nullptr;
    if (time_mask) {
      row_mask.reserve(t_len * cfg_.C);
      for (std::size_t t = 0; t < t_len; ++t) {
        row_mask.insert(row_mask.end(), cfg_.C, (*time_mask)[t]);
      }
      rows = &row_mask;
    }

    auto class_map = rtm_transform(x, rtm_weight_, rtm_bias_, cfg_.C);
    if (training && cfg_.dropout_p > 0.0) {
      if (!rng) {
        throw ValueError("CtrnModel::forward: training with dropout needs an rng");
      }
      class_map = dropout(class_map, cfg_.dropout_p, true, *rng);
    }

    Output out;
    out.rtm_logits = gclassifier_logits(class_map, a_s_t_, clf_weight_, clf_bias_);
    out.rtm_probs = sigmoid(out.rtm_logits);

    auto hidden = class_map;
    for (auto& block : blocks_) {
      hidden = block_forward(block, hidden, training, rows, update_stats);
    }
    out.ctm_logits = gclassifier_logits(hidden, a_s_t_, clf_weight_, clf_bias_);
    out.ctm_probs = sigmoid(out.ctm_logits);
    return out;
  }

  // Attention matrices of every block for a probe input, eval mode.
  std::vector<Tensor<T>> attention_maps(const Tensor<T>& x) {
    std::vector<Tensor<T>> maps;
    auto class_map = rtm_transform(x, rtm_weight_, rtm_bias_, cfg_.C);
    auto hidden = class_map;
    for (auto& block : blocks_) {
      if (cfg_.use_cgcn) {
        maps.push_back(cgcn_attention(hidden, block.w1, block.w2));
      }
      hidden = block_forward(block, hidden, /*training=*/false, nullptr, false);
    }
    return maps;
  }

  const CtrnConfig& config() const { return cfg_; }
  const std::vector<double>& adjacency() const { return a_s_; }
  std::vector<Block>& blocks() { return blocks_; }

  std::vector<std::pair<std::string, Tensor<T>>>& parameters() {
    return params_;
  }
  const std::vector<std::pair<std::string, Tensor<T>>>& parameters() const {
    return params_;
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  // Named non-trainable state (batch-norm running estimates).
  std::vector<std::pair<std::string, std::vector<T>*>> buffers() {
    std::vector<std::pair<std::string, std::vector<T>*>> out;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const std::string prefix = "blocks." + std::to_string(b) + ".";
      if (cfg_.use_cgcn) {
        out.emplace_back(prefix + "bn1.running_mean", &blocks_[b].bn1.running_mean);
        out.emplace_back(prefix + "bn1.running_var", &blocks_[b].bn1.running_var);
      }
      if (cfg_.use_tcn) {
        out.emplace_back(prefix + "bn2.running_mean", &blocks_[b].bn2.running_mean);
        out.emplace_back(prefix + "bn2.running_var", &blocks_[b].bn2.running_var);
      }
    }
    return out;
  }

 private:
  Tensor<T> block_forward(Block& block, const Tensor<T>& input, bool training,
                          const std::vector<std::uint8_t>* row_mask,
                          bool update_stats) {
    const std::size_t t_len = input.extent(0);
    auto current = input;
    if (cfg_.use_cgcn) {
      auto adj = add(block.base_adj,
                     cgcn_attention(current, block.w1, block.w2));
      auto mixed = cgcn_forward(current, adj, block.w3);
      auto flat = reshape(mixed, {t_len * cfg_.C, cfg_.D2});
      auto normed = block.bn1.forward(flat, training, row_mask, update_stats);
      auto branch = reshape(relu(normed), {t_len, cfg_.C, cfg_.D2});
      current = add(current, branch);
    }
    if (cfg_.use_tcn) {
      auto conv = tcn_forward(current, block.tcn_weight, block.tcn_bias,
                              cfg_.padding);
      auto flat = reshape(conv, {t_len * cfg_.C, cfg_.D2});
      auto normed = block.bn2.forward(flat, training, row_mask, update_stats);
      auto branch = reshape(relu(normed), {t_len, cfg_.C, cfg_.D2});
      current = add(current, branch);
    }
    return current;
  }

  void register_param(std::string name, const Tensor<T>& p) {
    params_.emplace_back(std::move(name), p);
  }

  CtrnConfig cfg_;
  std::vector<double> a_s_;
  Tensor<T> a_s_t_;
  Tensor<T> rtm_weight_, rtm_bias_;
  std::vector<Block> blocks_;
  Tensor<T> clf_weight_, clf_bias_;
  std::vector<std::pair<std::string, Tensor<T>>> params_;
};

// Eq-8 objective: bce(ctm, Y) + alpha * bce(rtm, Y).
template <class T>
Tensor<T> total_loss(const Tensor<T>& ctm_probs, const Tensor<T>& rtm_probs,
                     const Tensor<T>& target, double alpha,
                     const Tensor<T>* mask = nullptr) {
  auto ctm = bce(ctm_probs, target, mask);
  auto rtm = bce(rtm_probs, target, mask);
  return add(ctm, scale(rtm, static_cast<T>(alpha)));
}

// Expands a per-time mask to a T x C element mask for the loss.
template <class T>
Tensor<T> element_mask(const std::vector<std::uint8_t>& time_mask,
                       std::size_t num_classes) {
  std::vector<T> vals;
  vals.reserve(time_mask.size() * num_classes);
  for (auto m : time_mask) {
    for (std::size_t c = 0; c < num_classes; ++c) vals.push_back(m ? T(1) : T(0));
  }
  return Tensor<T>::from({time_mask.size(), num_classes}, std::move(vals));
}

template <class T>
Tensor<T> labels_to_tensor(const LabelMatrix& labels) {
  std::vector<T> vals(labels.values.begin(), labels.values.end());
  return Tensor<T>::from({labels.T, labels.C}, std::move(vals));
}

struct ParameterCount {
  std::vector<std::pair<std::string, std::size_t>> per_parameter;
  std::size_t total = 0;
};

template <class T>
ParameterCount count_parameters(const CtrnModel<T>& model) {
  ParameterCount count;
  for (const auto& [name, p] : model.parameters()) {
    count.per_parameter.emplace_back(name, p.size());
    count.total += p.size();
  }
  return count;
}

// Central-difference check of every model parameter against the recorded
// backward pass, on the training-mode graph (batch statistics active,
// running estimates frozen, dropout must be disabled for determinism).
// Returns the max relative error per named parameter.
template <class T>
std::vector<std::pair<std::string, double>> gradcheck_model(
    CtrnModel<T>& model, const Tensor<T>& x, const Tensor<T>& target,
    double eps = 1e-4) {
  if (model.config().dropout_p != 0.0) {
    throw ValueError("gradcheck_model: set dropout_p to 0 for a deterministic check");
  }
  const auto loss_value = [&]() {
    auto out = model.forward(x, /*training=*/true, nullptr, nullptr,
                             /*update_stats=*/false);
    return total_loss(out.ctm_probs, out.rtm_probs, target,
                      model.config().alpha);
  };
  model.zero_grad();
  backward(loss_value());
  std::vector<std::pair<std::string, double>> report;
  for (auto& [name, param] : model.parameters()) {
    const std::vector<T> analytic =
        param.has_grad() ? param.grad() : std::vector<T>(param.size(), T(0));
    double worst = 0.0;
    auto& vals = param.values_mut();
    for (std::size_t e = 0; e < vals.size(); ++e) {
      const T saved = vals[e];
      vals[e] = saved + static_cast<T>(eps);
      const double up = static_cast<double>(loss_value().item());
      vals[e] = saved - static_cast<T>(eps);
      const double down = static_cast<double>(loss_value().item());
      vals[e] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      worst = std::max(worst, gradcheck_rel_error(
                                  static_cast<double>(analytic[e]), numeric));
    }
    report.emplace_back(name, worst);
  }
  return report;
}

}  // namespace ctrn
