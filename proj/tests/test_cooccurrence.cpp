#include "ctrn/cooccurrence.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

namespace {

using ctrn::LabelMatrix;
using ctrn::PairStats;
using ctrn::RngEngine;

// Brute-force oracle: loop over every snippet and every ordered class pair.
PairStats count_oracle(const std::vector<LabelMatrix>& annotations) {
  const std::size_t C = annotations.empty() ? 0 : annotations[0].C;
  PairStats stats{C, std::vector<std::uint64_t>(C * C, 0),
                  std::vector<std::uint64_t>(C, 0)};
  for (const auto& labels : annotations) {
    for (std::size_t t = 0; t < labels.T; ++t) {
      for (std::size_t i = 0; i < C; ++i) {
        if (!labels.at(t, i)) continue;
        ++stats.occurrences[i];
        for (std::size_t j = 0; j < C; ++j) {
          if (labels.at(t, j)) ++stats.pair_counts[i * C + j];
        }
      }
    }
  }
  return stats;
}

// The worked example: three snippets {A,B}, {A}, {B,C}.
std::vector<LabelMatrix> hand_example() {
  LabelMatrix video = LabelMatrix::zeros(3, 3);
  video.set(0, 0, 1);
  video.set(0, 1, 1);
  video.set(1, 0, 1);
  video.set(2, 1, 1);
  video.set(2, 2, 1);
  return {video};
}

LabelMatrix random_labels(std::size_t T, std::size_t C, RngEngine& rng,
                          double density) {
  LabelMatrix labels = LabelMatrix::zeros(T, C);
  for (auto& v : labels.values) v = rng.bernoulli(density) ? 1 : 0;
  return labels;
}

TEST(CountStats, HandExample) {
  auto stats = ctrn::count_stats(hand_example());
  EXPECT_EQ(stats.occurrences, (std::vector<std::uint64_t>{2, 2, 1}));
  EXPECT_EQ(stats.pair_counts[0 * 3 + 1], 1u);  // M_AB
  EXPECT_EQ(stats.pair_counts[1 * 3 + 2], 1u);  // M_BC
  EXPECT_EQ(stats.pair_counts[0 * 3 + 2], 0u);  // M_AC
  // M_ii == N_i
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(stats.pair_counts[i * 3 + i], stats.occurrences[i]);
  }
}

TEST(CountStats, EmptyAnnotationSet) {
  auto stats = ctrn::count_stats({});
  EXPECT_EQ(stats.C, 0u);
  EXPECT_TRUE(stats.pair_counts.empty());
}

TEST(CountStats, SaturatedSnippet) {
  LabelMatrix all = LabelMatrix::zeros(1, 4);
  std::fill(all.values.begin(), all.values.end(), 1);
  auto stats = ctrn::count_stats({all});
  for (auto m : stats.pair_counts) EXPECT_EQ(m, 1u);
  for (auto n : stats.occurrences) EXPECT_EQ(n, 1u);
}

TEST(CountStats, InconsistentClassCountThrows) {
  std::vector<LabelMatrix> bad = {LabelMatrix::zeros(2, 3),
                                  LabelMatrix::zeros(2, 4)};
  EXPECT_THROW(ctrn::count_stats(bad), ctrn::ShapeError);
}

TEST(CountStats, MatchesExhaustiveOracle) {
  RngEngine rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<LabelMatrix> annotations;
    const std::size_t videos = 1 + rng.uniform_index(10);
    for (std::size_t v = 0; v < videos; ++v) {
      annotations.push_back(
          random_labels(1 + rng.uniform_index(32), 6, rng, 0.3));
    }
    auto fast = ctrn::count_stats(annotations);
    auto slow = count_oracle(annotations);
    EXPECT_EQ(fast.pair_counts, slow.pair_counts);
    EXPECT_EQ(fast.occurrences, slow.occurrences);
    // structural invariants: symmetry and M_ij <= min(N_i, N_j)
    for (std::size_t i = 0; i < 6; ++i) {
      for (std::size_t j = 0; j < 6; ++j) {
        EXPECT_EQ(fast.pair_counts[i * 6 + j], fast.pair_counts[j * 6 + i]);
        EXPECT_LE(fast.pair_counts[i * 6 + j],
                  std::min(fast.occurrences[i], fast.occurrences[j]));
      }
    }
  }
}

TEST(ConditionalProbs, HandExample) {
  auto stats = ctrn::count_stats(hand_example());
  auto probs = ctrn::conditional_probs(stats);
  EXPECT_DOUBLE_EQ(probs[0 * 3 + 1], 0.5);  // P(B|A)
  EXPECT_DOUBLE_EQ(probs[1 * 3 + 0], 0.5);  // P(A|B)
  EXPECT_DOUBLE_EQ(probs[1 * 3 + 2], 0.5);  // P(C|B)
  EXPECT_DOUBLE_EQ(probs[2 * 3 + 1], 1.0);  // P(B|C)
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(probs[i * 3 + i], 1.0);  // P_ii = 1 where N_i > 0
  }
}

TEST(ConditionalProbs, ZeroOccurrenceRowIsZero) {
  LabelMatrix labels = LabelMatrix::zeros(2, 3);
  labels.set(0, 0, 1);
  auto probs = ctrn::conditional_probs(ctrn::count_stats({labels}));
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_DOUBLE_EQ(probs[1 * 3 + j], 0.0);
    EXPECT_DOUBLE_EQ(probs[2 * 3 + j], 0.0);
  }
}

TEST(ConditionalProbs, InvariantUnderVideoDuplication) {
  RngEngine rng(42);
  std::vector<LabelMatrix> annotations;
  for (int v = 0; v < 4; ++v) annotations.push_back(random_labels(16, 5, rng, 0.25));
  auto probs_once = ctrn::conditional_probs(ctrn::count_stats(annotations));
  std::vector<LabelMatrix> doubled = annotations;
  doubled.insert(doubled.end(), annotations.begin(), annotations.end());
  auto probs_twice = ctrn::conditional_probs(ctrn::count_stats(doubled));
  for (std::size_t i = 0; i < probs_once.size(); ++i) {
    EXPECT_DOUBLE_EQ(probs_once[i], probs_twice[i]);
  }
}

TEST(Binarize, BoundarySemantics) {
  auto stats = ctrn::count_stats(hand_example());
  auto probs = ctrn::conditional_probs(stats);
  // theta = 0: everything passes, 0 >= 0 included
  auto all = ctrn::binarize(probs, 3, 0.0);
  for (auto b : all) EXPECT_EQ(b, 1);
  // theta = 1: only exact-probability-1 entries, here diagonals plus P(B|C)
  auto strict = ctrn::binarize(probs, 3, 1.0);
  std::vector<std::uint8_t> expect = {1, 0, 0, 0, 1, 0, 0, 1, 1};
  EXPECT_EQ(strict, expect);
  // theta = 0.05: all four off-diagonal links survive
  auto loose = ctrn::binarize(probs, 3, 0.05);
  EXPECT_EQ(loose[0 * 3 + 1], 1);
  EXPECT_EQ(loose[1 * 3 + 0], 1);
  EXPECT_EQ(loose[1 * 3 + 2], 1);
  EXPECT_EQ(loose[2 * 3 + 1], 1);
  EXPECT_EQ(loose[0 * 3 + 2], 0);
  EXPECT_EQ(loose[2 * 3 + 0], 0);
}

TEST(Binarize, MonotoneInTheta) {
  RngEngine rng(43);
  std::vector<LabelMatrix> annotations = {random_labels(24, 6, rng, 0.3),
                                          random_labels(24, 6, rng, 0.2)};
  auto probs = ctrn::conditional_probs(ctrn::count_stats(annotations));
  double thetas[] = {0.0, 0.1, 0.3, 0.7, 1.0};
  for (std::size_t a = 0; a + 1 < 5; ++a) {
    auto lo = ctrn::binarize(probs, 6, thetas[a]);
    auto hi = ctrn::binarize(probs, 6, thetas[a + 1]);
    for (std::size_t i = 0; i < lo.size(); ++i) EXPECT_LE(hi[i], lo[i]);
  }
}

TEST(Reweight, IsolatedClassIsOneHot) {
  std::vector<std::uint8_t> binary = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  auto adj = ctrn::reweight(binary, 3, 0.2);
  std::vector<double> expect = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  EXPECT_EQ(adj, expect);
}

TEST(Reweight, TwoPartnerRow) {
  // class 0 linked to 1 and 2
  std::vector<std::uint8_t> binary = {1, 1, 1, 0, 1, 0, 0, 0, 1};
  auto adj = ctrn::reweight(binary, 3, 0.2);
  EXPECT_DOUBLE_EQ(adj[0], 0.8);
  EXPECT_DOUBLE_EQ(adj[1], 0.1);
  EXPECT_DOUBLE_EQ(adj[2], 0.1);
  EXPECT_DOUBLE_EQ(adj[0] + adj[1] + adj[2], 1.0);
}

TEST(Reweight, RowsSumToOneForAnyBinaryInput) {
  RngEngine rng(44);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t C = 1 + rng.uniform_index(8);
    std::vector<std::uint8_t> binary(C * C);
    for (auto& b : binary) b = rng.bernoulli(0.4) ? 1 : 0;
    auto adj = ctrn::reweight(binary, C, 0.2);
    for (std::size_t i = 0; i < C; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < C; ++j) sum += adj[i * C + j];
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(Reweight, SingleClassReducesToIdentity) {
  std::vector<std::uint8_t> binary = {1};
  auto adj = ctrn::reweight(binary, 1, 0.2);
  EXPECT_EQ(adj, std::vector<double>{1.0});
}

TEST(Export, RoundTripIsExact) {
  auto model = ctrn::build_cooccurrence(hand_example(), 0.05, 0.2);
  const std::string path =
      (std::filesystem::temp_directory_path() / "ctrn_cooc_test.json").string();
  ctrn::export_cooccurrence(model, path);
  auto loaded = ctrn::import_cooccurrence(path);
  EXPECT_EQ(loaded.C, model.C);
  EXPECT_EQ(loaded.pair_counts, model.pair_counts);
  EXPECT_EQ(loaded.occurrences, model.occurrences);
  EXPECT_EQ(loaded.cond_probs, model.cond_probs);
  EXPECT_EQ(loaded.binary, model.binary);
  EXPECT_EQ(loaded.adjacency, model.adjacency);
  // re-parsed adjacency rows still sum to 1
  for (std::size_t i = 0; i < loaded.C; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < loaded.C; ++j) sum += loaded.adjacency[i * loaded.C + j];
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
  std::remove(path.c_str());
}

TEST(Export, MissingFileThrowsIoError) {
  EXPECT_THROW(ctrn::import_cooccurrence("/nonexistent/path.json"),
               ctrn::IoError);
}

}  // namespace
