#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ctrn/common.hpp"

namespace ctrn {

// Snippet-level feature sequence for one video, row-major T x D1. Values are
// 32-bit to match the on-disk tensor format; the model widens on ingest.
struct FeatureSequence {
  std::size_t T = 0;
  std::size_t D1 = 0;
  std::vector<float> values;

  float at(std::size_t t, std::size_t d) const { return values[t * D1 + d]; }
};

// Binary ground-truth labels, row-major T x C.
struct LabelMatrix {
  std::size_t T = 0;
  std::size_t C = 0;
  std::vector<std::uint8_t> values;

  static LabelMatrix zeros(std::size_t T, std::size_t C) {
    return LabelMatrix{T, C, std::vector<std::uint8_t>(T * C, 0)};
  }

  std::uint8_t at(std::size_t t, std::size_t c) const {
    return values[t * C + c];
  }
  void set(std::size_t t, std::size_t c, std::uint8_t v) {
    values[t * C + c] = v;
  }

  std::size_t active_count(std::size_t t) const {
    std::size_t n = 0;
    for (std::size_t c = 0; c < C; ++c) n += values[t * C + c] ? 1 : 0;
    return n;
  }
};

// Prediction scores, row-major T x C. Probabilities are sigmoid(logits);
// the logits are kept so stream fusion can average them exactly.
struct ScoreMatrix {
  std::size_t T = 0;
  std::size_t C = 0;
  std::vector<double> logits;
  std::vector<double> probs;

  static ScoreMatrix from_logits(std::size_t T, std::size_t C,
                                 std::vector<double> logit_values) {
    if (logit_values.size() != T * C) {
      throw ShapeError("ScoreMatrix: logit payload does not match TxC");
    }
    ScoreMatrix s{T, C, std::move(logit_values), {}};
    s.probs.resize(s.logits.size());
    for (std::size_t i = 0; i < s.logits.size(); ++i) {
      const double l = s.logits[i];
      s.probs[i] = l >= 0.0 ? 1.0 / (1.0 + std::exp(-l))
                            : std::exp(l) / (1.0 + std::exp(l));
    }
    return s;
  }

  double prob(std::size_t t, std::size_t c) const { return probs[t * C + c]; }
  double logit(std::size_t t, std::size_t c) const { return logits[t * C + c]; }
};

// Elementwise mean of two logit matrices, re-squashed. Late fusion of the
// RGB and flow streams.
inline ScoreMatrix fuse_logits(const ScoreMatrix& a, const ScoreMatrix& b) {
  if (a.T != b.T || a.C != b.C) {
    throw ShapeError("fuse_logits: score shapes differ");
  }
  std::vector<double> fused(a.logits.size());
  for (std::size_t i = 0; i < fused.size(); ++i) {
    fused[i] = 0.5 * (a.logits[i] + b.logits[i]);
  }
  return ScoreMatrix::from_logits(a.T, a.C, std::move(fused));
}

}  // namespace ctrn
