#pragma once

// Evaluation metrics: non-interpolated average precision pooled over
// snippets (per-frame mAP), the same restricted to co-occurring snippets,
// and the action-conditional precision/recall/F1/mAP family over ordered
// class pairs within a temporal window.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctrn/common.hpp"
#include "ctrn/types.hpp"

namespace ctrn {

struct EvalResult {
  std::vector<std::optional<double>> per_class_ap;  // nullopt: class absent
  std::vector<std::size_t> support;                 // positives per class
  double map = 0.0;  // mean over classes with at least one positive
  std::string ap_variant = "non-interpolated";
};

struct ActionConditionalResult {
  long tau = 0;
  double score_threshold = 0.5;
  std::size_t evaluable_pairs = 0;
  // Absent when no ordered pair has any positive sample within the window.
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> f1;
  std::optional<double> map;
};

// Non-interpolated AP with a stable descending sort on scores; equal scores
// keep ascending-index order so results are platform independent. Returns
// nullopt when the labels contain no positive.
inline std::optional<double> average_precision(
    const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  if (scores.size() != labels.size()) {
    throw ShapeError("average_precision: " + std::to_string(scores.size()) +
                     " scores vs " + std::to_string(labels.size()) + " labels");
  }
  std::size_t positives = 0;
  for (auto l : labels) positives += l ? 1 : 0;
  if (positives == 0) return std::nullopt;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  double ap = 0.0;
  std::size_t hits = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (labels[order[rank]]) {
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  }
  return ap / static_cast<double>(positives);
}

namespace detail {

// Pools unmasked snippets of all videos into per-class score/label columns.
struct PooledColumns {
  std::size_t C = 0;
  std::vector<std::vector<double>> scores;        // per class
  std::vector<std::vector<std::uint8_t>> labels;  // per class
};

inline PooledColumns pool_snippets(
    const std::vector<ScoreMatrix>& scores,
    const std::vector<LabelMatrix>& labels,
    const std::vector<std::vector<std::uint8_t>>* masks,
    bool cooccurring_only) {
  if (scores.size() != labels.size()) {
    throw ShapeError("pool_snippets: video count mismatch");
  }
  if (masks && masks->size() != scores.size()) {
    throw ShapeError("pool_snippets: mask count mismatch");
  }
  PooledColumns pooled;
  for (std::size_t v = 0; v < scores.size(); ++v) {
    const ScoreMatrix& s = scores[v];
    const LabelMatrix& y = labels[v];
    if (s.T != y.T || s.C != y.C) {
      throw ShapeError("pool_snippets: score/label shape mismatch in video " +
                       std::to_string(v));
    }
    if (pooled.C == 0) {
      pooled.C = s.C;
      pooled.scores.resize(s.C);
      pooled.labels.resize(s.C);
    }
    if (s.C != pooled.C) {
      throw ShapeError("pool_snippets: class count differs across videos");
    }
    const std::vector<std::uint8_t>* mask = masks ? &(*masks)[v] : nullptr;
    if (mask && mask->size() != s.T) {
      throw ShapeError("pool_snippets: mask length mismatch in video " +
                       std::to_string(v));
    }
    for (std::size_t t = 0; t < s.T; ++t) {
      if (mask && !(*mask)[t]) continue;
      if (cooccurring_only && y.active_count(t) < 2) continue;
      for (std::size_t c = 0; c < s.C; ++c) {
        pooled.scores[c].push_back(s.prob(t, c));
        pooled.labels[c].push_back(y.at(t, c));
      }
    }
  }
  return pooled;
}

inline EvalResult eval_from_columns(const PooledColumns& pooled) {
  EvalResult result;
  result.per_class_ap.resize(pooled.C);
  result.support.resize(pooled.C, 0);
  double sum = 0.0;
  std::size_t evaluable = 0;
  for (std::size_t c = 0; c < pooled.C; ++c) {
    for (auto l : pooled.labels[c]) result.support[c] += l ? 1 : 0;
    result.per_class_ap[c] = average_precision(pooled.scores[c], pooled.labels[c]);
    if (result.per_class_ap[c]) {
      sum += *result.per_class_ap[c];
      ++evaluable;
    }
  }
  if (evaluable == 0) {
    throw ValueError("per_frame_map: no class has a positive snippet");
  }
  result.map = sum / static_cast<double>(evaluable);
  return result;
}

}  // namespace detail

inline EvalResult per_frame_map(
    const std::vector<ScoreMatrix>& scores, const std::vector<LabelMatrix>& labels,
    const std::vector<std::vector<std::uint8_t>>* masks = nullptr) {
  return detail::eval_from_columns(
      detail::pool_snippets(scores, labels, masks, /*cooccurring_only=*/false));
}

// Per-frame mAP restricted to snippets where at least two classes are active.
inline EvalResult cooccurring_map(
    const std::vector<ScoreMatrix>& scores, const std::vector<LabelMatrix>& labels,
    const std::vector<std::vector<std::uint8_t>>* masks = nullptr) {
  auto pooled =
      detail::pool_snippets(scores, labels, masks, /*cooccurring_only=*/true);
  bool any = false;
  for (const auto& col : pooled.scores) any = any || !col.empty();
  if (!any) {
    throw ValueError("cooccurring_map: no snippet has two or more active classes");
  }
  return detail::eval_from_columns(pooled);
}

// Action-conditional metrics over ordered class pairs (i, j), i != j. For
// every time step where class j is active, the best score for class i within
// the window [t - tau, t + tau] is scored against the windowed ground truth
// of class i. A pair is evaluable when it collects at least one positive
// sample; precision within a pair with no predicted positive counts as 0.
// The aggregate F1 is the harmonic mean of the aggregate precision/recall.
inline ActionConditionalResult action_conditional(
    const std::vector<ScoreMatrix>& scores, const std::vector<LabelMatrix>& labels,
    long tau, double score_threshold = 0.5,
    const std::vector<std::vector<std::uint8_t>>* masks = nullptr) {
  if (tau < 0) {
    throw ValueError("action_conditional: tau must be non-negative, got " +
                     std::to_string(tau));
  }
  if (scores.size() != labels.size()) {
    throw ShapeError("action_conditional: video count mismatch");
  }
  std::size_t C = 0;
  for (const auto& s : scores) {
    if (C == 0) C = s.C;
    if (s.C != C) {
      throw ShapeError("action_conditional: class count differs across videos");
    }
  }
  ActionConditionalResult result;
  result.tau = tau;
  result.score_threshold = score_threshold;
  double precision_sum = 0.0, recall_sum = 0.0, ap_sum = 0.0;
  std::size_t evaluable = 0;
  std::vector<double> pair_scores;
  std::vector<std::uint8_t> pair_labels;
  for (std::size_t i = 0; i < C; ++i) {
    for (std::size_t j = 0; j < C; ++j) {
      if (i == j) continue;
      pair_scores.clear();
      pair_labels.clear();
      for (std::size_t v = 0; v < scores.size(); ++v) {
        const ScoreMatrix& s = scores[v];
        const LabelMatrix& y = labels[v];
        if (s.T != y.T || s.C != y.C) {
          throw ShapeError("action_conditional: score/label shape mismatch");
        }
        const std::vector<std::uint8_t>* mask = masks ? &(*masks)[v] : nullptr;
        for (std::size_t t = 0; t < s.T; ++t) {
          if (mask && !(*mask)[t]) continue;
          if (!y.at(t, j)) continue;
          const std::size_t lo =
              tau >= static_cast<long>(t) ? 0 : t - static_cast<std::size_t>(tau);
          const std::size_t hi =
              std::min(s.T - 1, t + static_cast<std::size_t>(tau));
          double best = 0.0;
          std::uint8_t present = 0;
          for (std::size_t w = lo; w <= hi; ++w) {
            if (mask && !(*mask)[w]) continue;
            best = std::max(best, s.prob(w, i));
            present |= y.at(w, i);
          }
          pair_scores.push_back(best);
          pair_labels.push_back(present);
        }
      }
      std::size_t positives = 0;
      for (auto l : pair_labels) positives += l ? 1 : 0;
      if (positives == 0) continue;
      ++evaluable;
      std::size_t tp = 0, fp = 0;
      for (std::size_t k = 0; k < pair_scores.size(); ++k) {
        if (pair_scores[k] >= score_threshold) {
          if (pair_labels[k]) ++tp; else ++fp;
        }
      }
      precision_sum += tp + fp > 0
                           ? static_cast<double>(tp) / static_cast<double>(tp + fp)
                           : 0.0;
      recall_sum += static_cast<double>(tp) / static_cast<double>(positives);
      ap_sum += *average_precision(pair_scores, pair_labels);
    }
  }
  result.evaluable_pairs = evaluable;
  if (evaluable == 0) return result;  // all fields absent
  const double inv = 1.0 / static_cast<double>(evaluable);
  result.precision = precision_sum * inv;
  result.recall = recall_sum * inv;
  result.map = ap_sum * inv;
  const double p = *result.precision, r = *result.recall;
  result.f1 = p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
  return result;
}

// --- JSON rendering for the CLI -----------------------------------------

inline nlohmann::json eval_result_to_json(const EvalResult& result) {
  nlohmann::json doc;
  doc["map"] = result.map;
  doc["ap_variant"] = result.ap_variant;
  nlohmann::json aps = nlohmann::json::array();
  for (const auto& ap : result.per_class_ap) {
    if (ap) aps.push_back(*ap); else aps.push_back(nullptr);
  }
  doc["per_class_ap"] = std::move(aps);
  doc["support"] = result.support;
  return doc;
}

inline nlohmann::json action_conditional_to_json(
    const ActionConditionalResult& result) {
  nlohmann::json doc;
  doc["tau"] = result.tau;
  doc["score_threshold"] = result.score_threshold;
  doc["evaluable_pairs"] = result.evaluable_pairs;
  const auto put = [&](const char* key, const std::optional<double>& v) {
    if (v) doc[key] = *v; else doc[key] = nullptr;
  };
  put("precision", result.precision);
  put("recall", result.recall);
  put("f1", result.f1);
  put("map", result.map);
  return doc;
}

}  // namespace ctrn
