#pragma once

// Snippet-level label co-occurrence statistics and the fixed classifier
// adjacency built from them: pair counts M, occurrence counts N, conditional
// probabilities P(j|i) = M_ij / N_i, thresholded to a binary graph and
// re-weighted so every row is either stochastic or a one-hot self link.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctrn/common.hpp"
#include "ctrn/types.hpp"

namespace ctrn {

struct CooccurrenceModel {
  std::size_t C = 0;
  double theta = 0.05;
  double reweight_p = 0.2;
  std::vector<std::uint64_t> pair_counts;   // M, C x C, symmetric, M_ii = N_i
  std::vector<std::uint64_t> occurrences;   // N, length C
  std::vector<double> cond_probs;           // P, C x C
  std::vector<std::uint8_t> binary;         // thresholded P
  std::vector<double> adjacency;            // re-weighted A_S
  std::vector<std::string> class_names;
};

struct PairStats {
  std::size_t C = 0;
  std::vector<std::uint64_t> pair_counts;
  std::vector<std::uint64_t> occurrences;
};

// Counts, over every (video, snippet) pair, how often each class occurs and
// how often each ordered pair of classes is active in the same snippet.
inline PairStats count_stats(const std::vector<LabelMatrix>& annotations) {
  std::size_t C = 0;
  for (const auto& labels : annotations) {
    if (C == 0) C = labels.C;
    if (labels.C != C) {
      throw ShapeError("count_stats: class count differs across annotations (" +
                       std::to_string(labels.C) + " vs " + std::to_string(C) +
                       ")");
    }
  }
  PairStats stats;
  stats.C = C;
  stats.pair_counts.assign(C * C, 0);
  stats.occurrences.assign(C, 0);
  std::vector<std::size_t> active;
  for (const auto& labels : annotations) {
    for (std::size_t t = 0; t < labels.T; ++t) {
      active.clear();
      for (std::size_t c = 0; c < C; ++c) {
        if (labels.at(t, c)) active.push_back(c);
      }
      for (std::size_t i : active) {
        ++stats.occurrences[i];
        for (std::size_t j : active) ++stats.pair_counts[i * C + j];
      }
    }
  }
  return stats;
}

// P_ij = M_ij / N_i; rows of never-occurring classes stay zero.
inline std::vector<double> conditional_probs(const PairStats& stats) {
  const std::size_t C = stats.C;
  std::vector<double> probs(C * C, 0.0);
  for (std::size_t i = 0; i < C; ++i) {
    if (stats.occurrences[i] == 0) continue;
    const double inv = 1.0 / static_cast<double>(stats.occurrences[i]);
    for (std::size_t j = 0; j < C; ++j) {
      probs[i * C + j] = static_cast<double>(stats.pair_counts[i * C + j]) * inv;
    }
  }
  return probs;
}

// Threshold with the boundary included: an edge survives when P_ij >= theta.
inline std::vector<std::uint8_t> binarize(const std::vector<double>& probs,
                                          std::size_t C, double theta) {
  if (theta < 0.0 || theta > 1.0) {
    throw ValueError("binarize: theta must be in [0, 1], got " +
                     std::to_string(theta));
  }
  std::vector<std::uint8_t> binary(C * C, 0);
  for (std::size_t i = 0; i < C * C; ++i) {
    binary[i] = probs[i] >= theta ? 1 : 0;
  }
  return binary;
}

// Re-weighting: a row with k off-diagonal links gets p/k on each link and
// 1-p on the diagonal; an isolated row keeps a one-hot self link. Every row
// therefore sums to exactly 1, preserving the feature scale through the
// message-passing step.
inline std::vector<double> reweight(const std::vector<std::uint8_t>& binary,
                                    std::size_t C, double p) {
  if (p <= 0.0 || p >= 1.0) {
    throw ValueError("reweight: coefficient must be in (0, 1), got " +
                     std::to_string(p));
  }
  std::vector<double> adj(C * C, 0.0);
  for (std::size_t i = 0; i < C; ++i) {
    std::size_t links = 0;
    for (std::size_t j = 0; j < C; ++j) {
      if (j != i && binary[i * C + j]) ++links;
    }
    if (links == 0) {
      adj[i * C + i] = 1.0;
      continue;
    }
    const double w = p / static_cast<double>(links);
    for (std::size_t j = 0; j < C; ++j) {
      if (j == i) {
        adj[i * C + j] = 1.0 - p;
      } else if (binary[i * C + j]) {
        adj[i * C + j] = w;
      }
    }
  }
  return adj;
}

inline CooccurrenceModel build_cooccurrence(
    const std::vector<LabelMatrix>& annotations, double theta, double p,
    std::vector<std::string> class_names = {}) {
  PairStats stats = count_stats(annotations);
  CooccurrenceModel model;
  model.C = stats.C;
  model.theta = theta;
  model.reweight_p = p;
  model.pair_counts = std::move(stats.pair_counts);
  model.occurrences = std::move(stats.occurrences);
  model.cond_probs = conditional_probs(
      PairStats{model.C, model.pair_counts, model.occurrences});
  model.binary = binarize(model.cond_probs, model.C, theta);
  model.adjacency = reweight(model.binary, model.C, p);
  if (class_names.empty()) {
    for (std::size_t c = 0; c < model.C; ++c) {
      class_names.push_back("class_" + std::to_string(c));
    }
  }
  if (class_names.size() != model.C) {
    throw ValueError("build_cooccurrence: class name count mismatch");
  }
  model.class_names = std::move(class_names);
  return model;
}

// Identity adjacency, the plain per-class classifier baseline.
inline std::vector<double> identity_adjacency(std::size_t C) {
  std::vector<double> adj(C * C, 0.0);
  for (std::size_t i = 0; i < C; ++i) adj[i * C + i] = 1.0;
  return adj;
}

namespace detail {

template <class T>
nlohmann::json matrix_json(const std::vector<T>& values, std::size_t C) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < C; ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t j = 0; j < C; ++j) row.push_back(values[i * C + j]);
    rows.push_back(std::move(row));
  }
  return rows;
}

template <class T>
std::vector<T> matrix_from_json(const nlohmann::json& rows, std::size_t C,
                                const char* field) {
  if (!rows.is_array() || rows.size() != C) {
    throw FormatError(std::string("cooccurrence JSON: field '") + field +
                      "' is not a " + std::to_string(C) + "-row matrix");
  }
  std::vector<T> values;
  values.reserve(C * C);
  for (const auto& row : rows) {
    if (!row.is_array() || row.size() != C) {
      throw FormatError(std::string("cooccurrence JSON: ragged row in '") +
                        field + "'");
    }
    for (const auto& v : row) values.push_back(v.get<T>());
  }
  return values;
}

}  // namespace detail

inline nlohmann::json cooccurrence_to_json(const CooccurrenceModel& model) {
  nlohmann::json doc;
  doc["C"] = model.C;
  doc["theta"] = model.theta;
  doc["reweight_p"] = model.reweight_p;
  doc["class_names"] = model.class_names;
  doc["occurrences"] = model.occurrences;
  doc["pair_counts"] = detail::matrix_json(model.pair_counts, model.C);
  doc["cond_probs"] = detail::matrix_json(model.cond_probs, model.C);
  doc["binary"] = detail::matrix_json(model.binary, model.C);
  doc["adjacency"] = detail::matrix_json(model.adjacency, model.C);
  return doc;
}

inline CooccurrenceModel cooccurrence_from_json(const nlohmann::json& doc) {
  CooccurrenceModel model;
  model.C = doc.at("C").get<std::size_t>();
  model.theta = doc.at("theta").get<double>();
  model.reweight_p = doc.at("reweight_p").get<double>();
  model.class_names = doc.at("class_names").get<std::vector<std::string>>();
  model.occurrences = doc.at("occurrences").get<std::vector<std::uint64_t>>();
  model.pair_counts = detail::matrix_from_json<std::uint64_t>(
      doc.at("pair_counts"), model.C, "pair_counts");
  model.cond_probs = detail::matrix_from_json<double>(doc.at("cond_probs"),
                                                      model.C, "cond_probs");
  model.binary = detail::matrix_from_json<std::uint8_t>(doc.at("binary"),
                                                        model.C, "binary");
  model.adjacency = detail::matrix_from_json<double>(doc.at("adjacency"),
                                                     model.C, "adjacency");
  return model;
}

inline void export_cooccurrence(const CooccurrenceModel& model,
                                const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("export_cooccurrence: cannot open '" + path + "'");
  out << cooccurrence_to_json(model).dump(2) << "\n";
  if (!out) throw IoError("export_cooccurrence: write failed for '" + path + "'");
}

inline CooccurrenceModel import_cooccurrence(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("import_cooccurrence: cannot open '" + path + "'");
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("import_cooccurrence: bad JSON in '" + path +
                      "': " + e.what());
  }
  return cooccurrence_from_json(doc);
}

}  // namespace ctrn
