#include "ctrn/metrics.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace {

using ctrn::LabelMatrix;
using ctrn::RngEngine;
using ctrn::ScoreMatrix;

// Rank-counting AP oracle: no sorting, O(n^2). An element's rank is one plus
// the number of elements that beat it (higher score, or equal score and
// lower index). AP = mean over positives of precision at their rank.
double ap_oracle(const std::vector<double>& scores,
                 const std::vector<std::uint8_t>& labels) {
  const std::size_t n = scores.size();
  double ap = 0.0;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!labels[i]) continue;
    ++positives;
    std::size_t rank = 1, hits = 1;
    for (std::size_t k = 0; k < n; ++k) {
      if (k == i) continue;
      const bool beats =
          scores[k] > scores[i] || (scores[k] == scores[i] && k < i);
      if (beats) {
        ++rank;
        if (labels[k]) ++hits;
      }
    }
    ap += static_cast<double>(hits) / static_cast<double>(rank);
  }
  return ap / static_cast<double>(positives);
}

ScoreMatrix scores_from_probs(std::size_t T, std::size_t C,
                              const std::vector<double>& probs) {
  std::vector<double> logits(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    logits[i] = std::log(probs[i] / (1.0 - probs[i]));
  }
  return ScoreMatrix::from_logits(T, C, std::move(logits));
}

// Scores matching the labels exactly, squashed to (eps, 1-eps).
ScoreMatrix perfect_scores(const LabelMatrix& labels) {
  std::vector<double> probs(labels.values.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    probs[i] = labels.values[i] ? 1.0 - 1e-6 : 1e-6;
  }
  return scores_from_probs(labels.T, labels.C, probs);
}

TEST(AveragePrecision, WorkedExample) {
  auto ap = ctrn::average_precision({0.9, 0.8, 0.1}, {1, 0, 1});
  ASSERT_TRUE(ap.has_value());
  EXPECT_NEAR(*ap, 5.0 / 6.0, 1e-15);
}

TEST(AveragePrecision, AllPositiveIsOne) {
  auto ap = ctrn::average_precision({0.2, 0.9, 0.5}, {1, 1, 1});
  EXPECT_DOUBLE_EQ(*ap, 1.0);
}

TEST(AveragePrecision, SinglePositiveRankedLast) {
  for (std::size_t n : {2u, 5u, 8u}) {
    std::vector<double> scores(n);
    std::vector<std::uint8_t> labels(n, 0);
    for (std::size_t i = 0; i < n; ++i) scores[i] = 1.0 - 0.1 * i;
    labels[n - 1] = 1;
    auto ap = ctrn::average_precision(scores, labels);
    EXPECT_DOUBLE_EQ(*ap, 1.0 / static_cast<double>(n));
  }
}

TEST(AveragePrecision, NoPositivesIsAbsent) {
  EXPECT_FALSE(ctrn::average_precision({0.5, 0.4}, {0, 0}).has_value());
}

TEST(AveragePrecision, LengthMismatchThrows) {
  EXPECT_THROW(ctrn::average_precision({0.5}, {0, 1}), ctrn::ShapeError);
}

TEST(AveragePrecision, InvariantUnderMonotoneTransform) {
  RngEngine rng(50);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> scores(12);
    std::vector<std::uint8_t> labels(12);
    for (auto& s : scores) s = rng.uniform();
    bool any = false;
    for (auto& l : labels) {
      l = rng.bernoulli(0.4) ? 1 : 0;
      any = any || l;
    }
    if (!any) labels[0] = 1;
    auto base = ctrn::average_precision(scores, labels);
    std::vector<double> warped(12);
    for (std::size_t i = 0; i < 12; ++i) {
      warped[i] = std::exp(3.0 * scores[i]) + 7.0;  // strictly monotone
    }
    auto transformed = ctrn::average_precision(warped, labels);
    EXPECT_DOUBLE_EQ(*base, *transformed);
  }
}

TEST(AveragePrecision, ExhaustiveLabelPatternsMatchOracle) {
  RngEngine rng(51);
  for (std::size_t n = 1; n <= 8; ++n) {
    std::vector<double> scores(n);
    for (auto& s : scores) s = rng.uniform();
    // include deliberate ties
    if (n >= 4) scores[1] = scores[3] = scores[0];
    for (std::uint32_t pattern = 1; pattern < (1u << n); ++pattern) {
      std::vector<std::uint8_t> labels(n);
      for (std::size_t i = 0; i < n; ++i) labels[i] = (pattern >> i) & 1u;
      auto ap = ctrn::average_precision(scores, labels);
      EXPECT_NEAR(*ap, ap_oracle(scores, labels), 1e-12)
          << "n=" << n << " pattern=" << pattern;
    }
  }
}

TEST(PerFrameMap, PerfectScoresGiveOne) {
  RngEngine rng(52);
  std::vector<LabelMatrix> labels;
  std::vector<ScoreMatrix> scores;
  for (int v = 0; v < 3; ++v) {
    LabelMatrix y = LabelMatrix::zeros(10, 4);
    for (auto& val : y.values) val = rng.bernoulli(0.3) ? 1 : 0;
    y.set(0, v % 4, 1);
    labels.push_back(y);
    scores.push_back(perfect_scores(y));
  }
  auto result = ctrn::per_frame_map(scores, labels);
  EXPECT_DOUBLE_EQ(result.map, 1.0);
}

TEST(PerFrameMap, MatchesOracleWithTies) {
  RngEngine rng(53);
  LabelMatrix y = LabelMatrix::zeros(8, 4);
  for (auto& val : y.values) val = rng.bernoulli(0.4) ? 1 : 0;
  for (std::size_t c = 0; c < 4; ++c) y.set(c, c, 1);
  std::vector<double> probs(8 * 4);
  for (auto& p : probs) p = rng.bernoulli(0.5) ? 0.5 : 0.7;  // heavy ties
  auto s = scores_from_probs(8, 4, probs);
  auto result = ctrn::per_frame_map({s}, {y});
  for (std::size_t c = 0; c < 4; ++c) {
    std::vector<double> col(8);
    std::vector<std::uint8_t> lab(8);
    for (std::size_t t = 0; t < 8; ++t) {
      col[t] = s.prob(t, c);
      lab[t] = y.at(t, c);
    }
    EXPECT_NEAR(*result.per_class_ap[c], ap_oracle(col, lab), 1e-12);
  }
}

TEST(PerFrameMap, AbsentClassExcluded) {
  RngEngine rng(54);
  LabelMatrix y = LabelMatrix::zeros(6, 3);
  y.set(0, 0, 1);
  y.set(3, 1, 1);  // class 2 never occurs
  std::vector<double> probs(18);
  for (auto& p : probs) p = rng.uniform(0.1, 0.9);
  auto s = scores_from_probs(6, 3, probs);
  auto result = ctrn::per_frame_map({s}, {y});
  EXPECT_FALSE(result.per_class_ap[2].has_value());
  EXPECT_DOUBLE_EQ(result.map,
                   (*result.per_class_ap[0] + *result.per_class_ap[1]) / 2.0);
}

TEST(PerFrameMap, ExtraAlwaysNegativeClassLeavesMapUnchanged) {
  RngEngine rng(55);
  LabelMatrix y = LabelMatrix::zeros(10, 3);
  for (auto& val : y.values) val = rng.bernoulli(0.4) ? 1 : 0;
  y.set(0, 0, 1);
  std::vector<double> probs(30);
  for (auto& p : probs) p = rng.uniform(0.05, 0.95);
  auto s = scores_from_probs(10, 3, probs);
  const double base = ctrn::per_frame_map({s}, {y}).map;

  LabelMatrix y4 = LabelMatrix::zeros(10, 4);
  std::vector<double> probs4(40);
  for (std::size_t t = 0; t < 10; ++t) {
    for (std::size_t c = 0; c < 3; ++c) {
      y4.set(t, c, y.at(t, c));
      probs4[t * 4 + c] = probs[t * 3 + c];
    }
    probs4[t * 4 + 3] = rng.uniform(0.05, 0.95);
  }
  auto s4 = scores_from_probs(10, 4, probs4);
  EXPECT_DOUBLE_EQ(ctrn::per_frame_map({s4}, {y4}).map, base);
}

TEST(PerFrameMap, MaskExcludesSnippets) {
  LabelMatrix y = LabelMatrix::zeros(4, 1);
  y.set(0, 0, 1);
  y.set(2, 0, 1);
  auto s = scores_from_probs(4, 1, {0.9, 0.8, 0.1, 0.2});
  std::vector<std::vector<std::uint8_t>> masks = {{1, 1, 0, 1}};
  // with snippet 2 masked out the only positive left is top ranked
  auto result = ctrn::per_frame_map({s}, {y}, &masks);
  EXPECT_DOUBLE_EQ(result.map, 1.0);
  EXPECT_EQ(result.support[0], 1u);
}

TEST(PerFrameMap, NoEvaluableClassThrows) {
  LabelMatrix y = LabelMatrix::zeros(3, 2);
  auto s = scores_from_probs(3, 2, std::vector<double>(6, 0.5));
  EXPECT_THROW(ctrn::per_frame_map({s}, {y}), ctrn::ValueError);
}

TEST(CooccurringMap, NoMultiLabelSnippetThrows) {
  LabelMatrix y = LabelMatrix::zeros(4, 2);
  y.set(0, 0, 1);
  y.set(1, 1, 1);
  auto s = scores_from_probs(4, 2, std::vector<double>(8, 0.5));
  EXPECT_THROW(ctrn::cooccurring_map({s}, {y}), ctrn::ValueError);
}

TEST(CooccurringMap, AllMultiLabelEqualsPerFrameMap) {
  RngEngine rng(56);
  LabelMatrix y = LabelMatrix::zeros(8, 3);
  for (std::size_t t = 0; t < 8; ++t) {
    y.set(t, t % 3, 1);
    y.set(t, (t + 1) % 3, 1);
  }
  std::vector<double> probs(24);
  for (auto& p : probs) p = rng.uniform(0.1, 0.9);
  auto s = scores_from_probs(8, 3, probs);
  EXPECT_DOUBLE_EQ(ctrn::cooccurring_map({s}, {y}).map,
                   ctrn::per_frame_map({s}, {y}).map);
}

TEST(CooccurringMap, MatchesFilterThenOracle) {
  RngEngine rng(57);
  LabelMatrix y = LabelMatrix::zeros(12, 3);
  for (auto& val : y.values) val = rng.bernoulli(0.45) ? 1 : 0;
  y.set(0, 0, 1);
  y.set(0, 1, 1);  // ensure at least one multi-label snippet
  std::vector<double> probs(36);
  for (auto& p : probs) p = rng.uniform(0.05, 0.95);
  auto s = scores_from_probs(12, 3, probs);
  auto result = ctrn::cooccurring_map({s}, {y});

  // filter snippets by hand, then run the rank-counting oracle per class
  double sum = 0.0;
  std::size_t evaluable = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> col;
    std::vector<std::uint8_t> lab;
    for (std::size_t t = 0; t < 12; ++t) {
      if (y.active_count(t) < 2) continue;
      col.push_back(s.prob(t, c));
      lab.push_back(y.at(t, c));
    }
    if (std::count(lab.begin(), lab.end(), 1) == 0) continue;
    sum += ap_oracle(col, lab);
    ++evaluable;
  }
  EXPECT_NEAR(result.map, sum / evaluable, 1e-12);
}

// Literal nested-loop implementation of the documented action-conditional
// definition, kept deliberately sort-free and shapeless.
ctrn::ActionConditionalResult ac_oracle(const ScoreMatrix& s,
                                        const LabelMatrix& y, long tau,
                                        double thr) {
  const std::size_t C = y.C, T = y.T;
  double psum = 0, rsum = 0, apsum = 0;
  std::size_t evaluable = 0;
  for (std::size_t i = 0; i < C; ++i) {
    for (std::size_t j = 0; j < C; ++j) {
      if (i == j) continue;
      std::vector<double> ss;
      std::vector<std::uint8_t> ll;
      for (std::size_t t = 0; t < T; ++t) {
        if (!y.at(t, j)) continue;
        double best = 0;
        std::uint8_t present = 0;
        for (long w = static_cast<long>(t) - tau;
             w <= static_cast<long>(t) + tau; ++w) {
          if (w < 0 || w >= static_cast<long>(T)) continue;
          best = std::max(best, s.prob(static_cast<std::size_t>(w), i));
          present |= y.at(static_cast<std::size_t>(w), i);
        }
        ss.push_back(best);
        ll.push_back(present);
      }
      std::size_t pos = std::count(ll.begin(), ll.end(), 1);
      if (pos == 0) continue;
      ++evaluable;
      std::size_t tp = 0, fp = 0;
      for (std::size_t k = 0; k < ss.size(); ++k) {
        if (ss[k] >= thr) (ll[k] ? tp : fp) += 1;
      }
      psum += tp + fp > 0 ? double(tp) / double(tp + fp) : 0.0;
      rsum += double(tp) / double(pos);
      apsum += ap_oracle(ss, ll);
    }
  }
  ctrn::ActionConditionalResult r;
  r.tau = tau;
  r.evaluable_pairs = evaluable;
  if (evaluable == 0) return r;
  r.precision = psum / evaluable;
  r.recall = rsum / evaluable;
  r.map = apsum / evaluable;
  r.f1 = *r.precision + *r.recall > 0
             ? 2.0 * *r.precision * *r.recall / (*r.precision + *r.recall)
             : 0.0;
  return r;
}

TEST(ActionConditional, PerfectDetectorAtTauZero) {
  RngEngine rng(58);
  LabelMatrix y = LabelMatrix::zeros(10, 3);
  for (auto& val : y.values) val = rng.bernoulli(0.5) ? 1 : 0;
  y.set(0, 0, 1);
  y.set(0, 1, 1);  // at least one co-occurrence
  auto s = perfect_scores(y);
  auto result = ctrn::action_conditional({s}, {y}, 0);
  ASSERT_TRUE(result.precision.has_value());
  EXPECT_DOUBLE_EQ(*result.precision, 1.0);
  EXPECT_DOUBLE_EQ(*result.recall, 1.0);
  EXPECT_DOUBLE_EQ(*result.f1, 1.0);
}

TEST(ActionConditional, NoCooccurrenceReportsAbsent) {
  LabelMatrix y = LabelMatrix::zeros(4, 2);
  y.set(0, 0, 1);  // classes never co-occur within tau = 0
  y.set(3, 1, 1);
  auto s = perfect_scores(y);
  auto result = ctrn::action_conditional({s}, {y}, 0);
  EXPECT_EQ(result.evaluable_pairs, 0u);
  EXPECT_FALSE(result.precision.has_value());
  EXPECT_FALSE(result.map.has_value());
}

TEST(ActionConditional, MatchesBruteForceOracle) {
  RngEngine rng(59);
  for (long tau : {0L, 1L, 2L, 4L}) {
    LabelMatrix y = LabelMatrix::zeros(16, 4);
    for (auto& val : y.values) val = rng.bernoulli(0.35) ? 1 : 0;
    y.set(2, 0, 1);
    y.set(2, 1, 1);
    std::vector<double> probs(16 * 4);
    for (auto& p : probs) p = rng.uniform(0.05, 0.95);
    auto s = scores_from_probs(16, 4, probs);
    auto fast = ctrn::action_conditional({s}, {y}, tau);
    auto slow = ac_oracle(s, y, tau, 0.5);
    ASSERT_EQ(fast.evaluable_pairs, slow.evaluable_pairs);
    EXPECT_NEAR(*fast.precision, *slow.precision, 1e-12);
    EXPECT_NEAR(*fast.recall, *slow.recall, 1e-12);
    EXPECT_NEAR(*fast.f1, *slow.f1, 1e-12);
    EXPECT_NEAR(*fast.map, *slow.map, 1e-12);
  }
}

TEST(ActionConditional, NegativeTauThrows) {
  LabelMatrix y = LabelMatrix::zeros(4, 2);
  auto s = scores_from_probs(4, 2, std::vector<double>(8, 0.5));
  EXPECT_THROW(ctrn::action_conditional({s}, {y}, -1), ctrn::ValueError);
}

TEST(FuseLogits, IdempotentAndSymmetric) {
  RngEngine rng(60);
  std::vector<double> logits(12);
  for (auto& l : logits) l = rng.uniform(-3.0, 3.0);
  auto a = ScoreMatrix::from_logits(4, 3, logits);
  auto same = ctrn::fuse_logits(a, a);
  EXPECT_EQ(same.logits, a.logits);
  EXPECT_EQ(same.probs, a.probs);

  std::vector<double> neg(12);
  for (std::size_t i = 0; i < 12; ++i) neg[i] = -logits[i];
  auto b = ScoreMatrix::from_logits(4, 3, neg);
  auto mid = ctrn::fuse_logits(a, b);
  for (double p : mid.probs) EXPECT_DOUBLE_EQ(p, 0.5);
}

TEST(FuseLogits, MatchesMeanFormula) {
  RngEngine rng(61);
  std::vector<double> la(6), lb(6);
  for (auto& l : la) l = rng.uniform(-4.0, 4.0);
  for (auto& l : lb) l = rng.uniform(-4.0, 4.0);
  auto fused = ctrn::fuse_logits(ScoreMatrix::from_logits(2, 3, la),
                                 ScoreMatrix::from_logits(2, 3, lb));
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(fused.logits[i], (la[i] + lb[i]) / 2.0, 1e-12);
  }
}

TEST(FuseLogits, ShapeMismatchThrows) {
  auto a = ScoreMatrix::from_logits(2, 2, {0, 0, 0, 0});
  auto b = ScoreMatrix::from_logits(2, 3, {0, 0, 0, 0, 0, 0});
  EXPECT_THROW(ctrn::fuse_logits(a, b), ctrn::ShapeError);
}

}  // namespace
