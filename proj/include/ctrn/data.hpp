#pragma once

// Synthetic densely-labelled sequence generation and dataset I/O.
//
// Generated videos carry action instances as intervals; co_pairs copy a
// leader instance onto a follower class with a given probability (same
// snippets), order_pairs start a follower instance a short lag after the
// leader ends. Snippet features are the sum of the active classes'
// prototype vectors plus isotropic Gaussian noise, so follower classes are
// detectable from their own prototype but their *timing* is only explained
// by the leader's.
//
// On-disk formats:
//   features:    "CTRNT" magic, u32 LE rank, rank u64 LE extents,
//                row-major f32 LE payload
//   annotations: JSON {id, T, C, intervals: [{class, start, end}]},
//                end exclusive, snippet units
//   split.json:  {"train": [ids], "test": [ids]}

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctrn/common.hpp"
#include "ctrn/types.hpp"

namespace ctrn {

struct CoPair {
  std::size_t leader = 0;
  std::size_t follower = 0;
  double probability = 1.0;
};

struct OrderPair {
  std::size_t leader = 0;
  std::size_t follower = 0;
  std::size_t lag_min = 1;  // snippets between leader end and follower start
  std::size_t lag_max = 1;
};

struct SyntheticSpec {
  std::size_t C = 10;
  std::size_t T = 64;
  std::size_t D1 = 64;
  std::size_t num_videos = 20;
  std::vector<CoPair> co_pairs;
  std::vector<OrderPair> order_pairs;
  double noise_sigma = 0.5;
  double prototype_scale = 1.0;
  std::uint64_t seed = 0;
};

struct VideoRecord {
  std::string id;
  FeatureSequence features;
  LabelMatrix labels;
};

inline void validate(const SyntheticSpec& spec) {
  if (spec.C == 0 || spec.T == 0 || spec.D1 == 0 || spec.num_videos == 0) {
    throw ValueError("SyntheticSpec: C, T, D1 and num_videos must be positive");
  }
  if (spec.noise_sigma < 0.0) {
    throw ValueError("SyntheticSpec: noise_sigma must be non-negative");
  }
  for (const auto& p : spec.co_pairs) {
    if (p.leader >= spec.C || p.follower >= spec.C) {
      throw ValueError("SyntheticSpec: co_pair class out of range");
    }
    if (p.probability < 0.0 || p.probability > 1.0) {
      throw ValueError("SyntheticSpec: co_pair probability outside [0, 1]");
    }
  }
  for (const auto& p : spec.order_pairs) {
    if (p.leader >= spec.C || p.follower >= spec.C) {
      throw ValueError("SyntheticSpec: order_pair class out of range");
    }
    if (p.lag_min < 1 || p.lag_max < p.lag_min) {
      throw ValueError("SyntheticSpec: order_pair lag range invalid");
    }
  }
}

namespace detail {

struct Interval {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
};

inline bool overlaps(const Interval& a, const Interval& b) {
  return a.start < b.end && b.start < a.end;
}

}  // namespace detail

// Unit prototype vectors, one per class, deterministic in the spec seed.
inline std::vector<std::vector<double>> class_prototypes(
    const SyntheticSpec& spec) {
  RngEngine rng(derive_seed(spec.seed, 0x9107a11eULL));
  std::vector<std::vector<double>> protos(spec.C,
                                          std::vector<double>(spec.D1));
  for (auto& p : protos) {
    double norm = 0.0;
    for (auto& v : p) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    if (norm == 0.0) norm = 1.0;
    for (auto& v : p) v /= norm;
  }
  return protos;
}

inline std::vector<VideoRecord> generate(const SyntheticSpec& spec) {
  validate(spec);
  const auto protos = class_prototypes(spec);

  // Classes that only ever appear through a relation get no independent
  // instances; their presence is fully explained by their leader.
  std::vector<bool> follower_only(spec.C, false);
  for (const auto& p : spec.co_pairs) follower_only[p.follower] = true;
  for (const auto& p : spec.order_pairs) follower_only[p.follower] = true;

  const std::size_t min_len = std::min<std::size_t>(3, spec.T);
  const std::size_t max_len =
      std::max(min_len, std::min(spec.T, std::max<std::size_t>(4, spec.T / 8)));

  std::vector<VideoRecord> records;
  records.reserve(spec.num_videos);
  for (std::size_t v = 0; v < spec.num_videos; ++v) {
    RngEngine rng(derive_seed(spec.seed, 0x5EED0000ULL + v));
    VideoRecord rec;
    {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "synth_%04zu", v);
      rec.id = buf;
    }
    rec.labels = LabelMatrix::zeros(spec.T, spec.C);

    std::vector<std::vector<detail::Interval>> instances(spec.C);
    const auto place = [&](std::size_t c, detail::Interval iv) {
      iv.end = std::min(iv.end, spec.T);  // clip at the sequence end
      if (iv.start >= iv.end) return;
      instances[c].push_back(iv);
      for (std::size_t t = iv.start; t < iv.end; ++t) rec.labels.set(t, c, 1);
    };

    // independent instances
    for (std::size_t c = 0; c < spec.C; ++c) {
      if (follower_only[c]) continue;
      const std::size_t count = 1 + rng.uniform_index(2);
      for (std::size_t k = 0; k < count; ++k) {
        for (int attempt = 0; attempt < 8; ++attempt) {
          const std::size_t len = min_len + rng.uniform_index(max_len - min_len + 1);
          if (len > spec.T) break;
          const std::size_t start = rng.uniform_index(spec.T - len + 1);
          detail::Interval iv{start, start + len};
          bool clash = false;
          for (const auto& other : instances[c]) {
            clash = clash || detail::overlaps(iv, other);
          }
          if (!clash) {
            place(c, iv);
            break;
          }
        }
      }
    }

    // same-snippet co-occurrences: copy the leader's interval
    for (const auto& p : spec.co_pairs) {
      for (const auto& iv : instances[p.leader]) {
        if (rng.bernoulli(p.probability)) place(p.follower, iv);
      }
    }

    // temporal implications: follower starts lag snippets after leader ends
    for (const auto& p : spec.order_pairs) {
      for (const auto& iv : instances[p.leader]) {
        const std::size_t lag =
            p.lag_min + rng.uniform_index(p.lag_max - p.lag_min + 1);
        const std::size_t start = iv.end + lag - 1;
        if (start >= spec.T) continue;
        const std::size_t len = min_len + rng.uniform_index(max_len - min_len + 1);
        place(p.follower, {start, start + len});
      }
    }

    // features: sum of active prototypes plus noise, computed in double,
    // stored in 32-bit like the on-disk format
    rec.features.T = spec.T;
    rec.features.D1 = spec.D1;
    rec.features.values.resize(spec.T * spec.D1);
    std::vector<double> snippet(spec.D1);
    for (std::size_t t = 0; t < spec.T; ++t) {
      std::fill(snippet.begin(), snippet.end(), 0.0);
      for (std::size_t c = 0; c < spec.C; ++c) {
        if (!rec.labels.at(t, c)) continue;
        for (std::size_t d = 0; d < spec.D1; ++d) {
          snippet[d] += spec.prototype_scale * protos[c][d];
        }
      }
      for (std::size_t d = 0; d < spec.D1; ++d) {
        if (spec.noise_sigma > 0.0) {
          snippet[d] += spec.noise_sigma * rng.normal();
        }
        rec.features.values[t * spec.D1 + d] = static_cast<float>(snippet[d]);
      }
    }
    records.push_back(std::move(rec));
  }
  return records;
}

// --- binary tensor format -------------------------------------------------

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
  put_u32(out, std::bit_cast<std::uint32_t>(v));
}

struct ByteReader {
  const std::string& bytes;
  std::size_t pos = 0;
  const std::string& path;

  bool has(std::size_t n) const { return bytes.size() - pos >= n; }

  std::uint32_t u32() {
    if (!has(4)) throw FormatError("tensor file '" + path + "': truncated header");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos++])) << (8 * i);
    }
    return v;
  }

  std::uint64_t u64() {
    if (!has(8)) throw FormatError("tensor file '" + path + "': truncated header");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos++])) << (8 * i);
    }
    return v;
  }

  float f32() {
    std::uint32_t v = u32();
    return std::bit_cast<float>(v);
  }
};

constexpr std::uint64_t kMaxTensorElements = 1ULL << 31;

}  // namespace detail

inline void write_ctrnt(const std::string& path,
                        const std::vector<std::size_t>& shape,
                        const std::vector<float>& values) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  if (n != values.size()) {
    throw ShapeError("write_ctrnt: payload does not match shape");
  }
  std::string out;
  out.reserve(5 + 4 + 8 * shape.size() + 4 * values.size());
  out += "CTRNT";
  detail::put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (auto e : shape) detail::put_u64(out, e);
  for (float v : values) detail::put_f32(out, v);
  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("write_ctrnt: cannot open '" + path + "'");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw IoError("write_ctrnt: write failed for '" + path + "'");
}

struct RawTensor {
  std::vector<std::size_t> shape;
  std::vector<float> values;
};

inline RawTensor read_ctrnt(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("read_ctrnt: cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(file)),
                    std::istreambuf_iterator<char>());
  if (bytes.size() < 5 || bytes.compare(0, 5, "CTRNT") != 0) {
    throw FormatError("tensor file '" + path + "': bad magic");
  }
  detail::ByteReader reader{bytes, 5, path};
  const std::uint32_t rank = reader.u32();
  if (rank > 8) {
    throw FormatError("tensor file '" + path + "': implausible rank " +
                      std::to_string(rank));
  }
  RawTensor tensor;
  std::uint64_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint64_t e = reader.u64();
    if (e == 0 || (n != 0 && e > detail::kMaxTensorElements / std::max<std::uint64_t>(n, 1))) {
      throw FormatError("tensor file '" + path + "': extent overflow");
    }
    n *= e;
    tensor.shape.push_back(static_cast<std::size_t>(e));
  }
  if (n > detail::kMaxTensorElements) {
    throw FormatError("tensor file '" + path + "': extent overflow");
  }
  if (!reader.has(4 * n)) {
    throw FormatError("tensor file '" + path + "': truncated payload");
  }
  tensor.values.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) tensor.values[i] = reader.f32();
  if (reader.pos != bytes.size()) {
    throw FormatError("tensor file '" + path + "': trailing bytes");
  }
  return tensor;
}

inline void save_features(const FeatureSequence& features,
                          const std::string& path) {
  write_ctrnt(path, {features.T, features.D1}, features.values);
}

inline FeatureSequence load_features(const std::string& path) {
  RawTensor raw = read_ctrnt(path);
  if (raw.shape.size() != 2) {
    throw FormatError("feature file '" + path + "': expected rank 2, got " +
                      std::to_string(raw.shape.size()));
  }
  return FeatureSequence{raw.shape[0], raw.shape[1], std::move(raw.values)};
}

// --- annotations ------------------------------------------------------------

inline nlohmann::json annotations_to_json(const std::string& id,
                                          const LabelMatrix& labels) {
  nlohmann::json doc;
  doc["id"] = id;
  doc["T"] = labels.T;
  doc["C"] = labels.C;
  nlohmann::json intervals = nlohmann::json::array();
  for (std::size_t c = 0; c < labels.C; ++c) {
    std::size_t t = 0;
    while (t < labels.T) {
      if (!labels.at(t, c)) {
        ++t;
        continue;
      }
      std::size_t end = t;
      while (end < labels.T && labels.at(end, c)) ++end;
      intervals.push_back({{"class", c}, {"start", t}, {"end", end}});
      t = end;
    }
  }
  doc["intervals"] = std::move(intervals);
  return doc;
}

inline LabelMatrix annotations_from_json(const nlohmann::json& doc) {
  std::size_t T, C;
  try {
    T = doc.at("T").get<std::size_t>();
    C = doc.at("C").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("annotations: missing T/C: ") + e.what());
  }
  LabelMatrix labels = LabelMatrix::zeros(T, C);
  for (const auto& iv : doc.at("intervals")) {
    const auto cls = iv.at("class").get<std::size_t>();
    const auto start = iv.at("start").get<std::size_t>();
    const auto end = iv.at("end").get<std::size_t>();
    if (cls >= C) {
      throw FormatError("annotations: unknown class id " + std::to_string(cls));
    }
    if (start >= end || end > T) {
      throw FormatError("annotations: interval [" + std::to_string(start) +
                        ", " + std::to_string(end) + ") outside [0, " +
                        std::to_string(T) + ")");
    }
    for (std::size_t t = start; t < end; ++t) labels.set(t, cls, 1);
  }
  return labels;
}

inline void save_annotations(const std::string& id, const LabelMatrix& labels,
                             const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("save_annotations: cannot open '" + path + "'");
  out << annotations_to_json(id, labels).dump(2) << "\n";
  if (!out) throw IoError("save_annotations: write failed for '" + path + "'");
}

inline LabelMatrix load_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_annotations: cannot open '" + path + "'");
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("load_annotations: bad JSON in '" + path + "': " +
                      e.what());
  }
  return annotations_from_json(doc);
}

// --- dataset directory layout ----------------------------------------------

struct Dataset {
  std::vector<VideoRecord> train;
  std::vector<VideoRecord> test;
};

inline void save_dataset(const std::vector<VideoRecord>& records,
                         const std::vector<std::string>& train_ids,
                         const std::vector<std::string>& test_ids,
                         const std::string& root) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(root) / "features", ec);
  fs::create_directories(fs::path(root) / "annotations", ec);
  if (ec) throw IoError("save_dataset: cannot create '" + root + "'");
  for (const auto& rec : records) {
    save_features(rec.features,
                  (fs::path(root) / "features" / (rec.id + ".ctrnt")).string());
    save_annotations(
        rec.id, rec.labels,
        (fs::path(root) / "annotations" / (rec.id + ".json")).string());
  }
  nlohmann::json split;
  split["train"] = train_ids;
  split["test"] = test_ids;
  std::ofstream out((fs::path(root) / "split.json").string());
  if (!out) throw IoError("save_dataset: cannot write split.json");
  out << split.dump(2) << "\n";
}

// Deterministic default split: the last quarter of the videos is held out.
inline void save_dataset(const std::vector<VideoRecord>& records,
                         const std::string& root) {
  const std::size_t test_count = records.size() / 4;
  std::vector<std::string> train_ids, test_ids;
  for (std::size_t i = 0; i < records.size(); ++i) {
    (i + test_count < records.size() ? train_ids : test_ids)
        .push_back(records[i].id);
  }
  save_dataset(records, train_ids, test_ids, root);
}

inline VideoRecord load_video(const std::string& root, const std::string& id) {
  namespace fs = std::filesystem;
  VideoRecord rec;
  rec.id = id;
  rec.features =
      load_features((fs::path(root) / "features" / (id + ".ctrnt")).string());
  rec.labels = load_annotations(
      (fs::path(root) / "annotations" / (id + ".json")).string());
  if (rec.labels.T != rec.features.T) {
    throw FormatError("load_video: feature/annotation length mismatch for '" +
                      id + "'");
  }
  return rec;
}

inline Dataset load_dataset(const std::string& root) {
  namespace fs = std::filesystem;
  const std::string split_path = (fs::path(root) / "split.json").string();
  std::ifstream in(split_path);
  if (!in) throw IoError("load_dataset: cannot open '" + split_path + "'");
  nlohmann::json split;
  try {
    in >> split;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("load_dataset: bad split.json: " + std::string(e.what()));
  }
  Dataset dataset;
  for (const auto& id : split.at("train")) {
    dataset.train.push_back(load_video(root, id.get<std::string>()));
  }
  for (const auto& id : split.at("test")) {
    dataset.test.push_back(load_video(root, id.get<std::string>()));
  }
  return dataset;
}

// --- SyntheticSpec JSON ------------------------------------------------------

inline nlohmann::json synthetic_spec_to_json(const SyntheticSpec& spec) {
  nlohmann::json doc;
  doc["C"] = spec.C;
  doc["T"] = spec.T;
  doc["D1"] = spec.D1;
  doc["num_videos"] = spec.num_videos;
  doc["noise_sigma"] = spec.noise_sigma;
  doc["prototype_scale"] = spec.prototype_scale;
  doc["seed"] = spec.seed;
  nlohmann::json co = nlohmann::json::array();
  for (const auto& p : spec.co_pairs) {
    co.push_back({{"leader", p.leader},
                  {"follower", p.follower},
                  {"probability", p.probability}});
  }
  doc["co_pairs"] = std::move(co);
  nlohmann::json order = nlohmann::json::array();
  for (const auto& p : spec.order_pairs) {
    order.push_back({{"leader", p.leader},
                     {"follower", p.follower},
                     {"lag_min", p.lag_min},
                     {"lag_max", p.lag_max}});
  }
  doc["order_pairs"] = std::move(order);
  return doc;
}

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& doc) {
  SyntheticSpec spec;
  try {
    spec.C = doc.value("C", spec.C);
    spec.T = doc.value("T", spec.T);
    spec.D1 = doc.value("D1", spec.D1);
    spec.num_videos = doc.value("num_videos", spec.num_videos);
    spec.noise_sigma = doc.value("noise_sigma", spec.noise_sigma);
    spec.prototype_scale = doc.value("prototype_scale", spec.prototype_scale);
    spec.seed = doc.value("seed", spec.seed);
    for (const auto& p : doc.value("co_pairs", nlohmann::json::array())) {
      spec.co_pairs.push_back({p.at("leader").get<std::size_t>(),
                               p.at("follower").get<std::size_t>(),
                               p.at("probability").get<double>()});
    }
    for (const auto& p : doc.value("order_pairs", nlohmann::json::array())) {
      spec.order_pairs.push_back({p.at("leader").get<std::size_t>(),
                                  p.at("follower").get<std::size_t>(),
                                  p.at("lag_min").get<std::size_t>(),
                                  p.at("lag_max").get<std::size_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("SyntheticSpec: bad JSON: " + std::string(e.what()));
  }
  return spec;
}

}  // namespace ctrn
