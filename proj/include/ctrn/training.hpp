#pragma once

// Optimization loop: Adam with bias correction, reduce-on-plateau learning
// rate scheduling, shuffled mini-batches with the auxiliary-head objective,
// and a best-validation parameter snapshot. Fully deterministic under the
// run seed.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctrn/data.hpp"
#include "ctrn/metrics.hpp"
#include "ctrn/model.hpp"

namespace ctrn {

template <class T>
class AdamOptimizer {
 public:
  explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999,
                         double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }
  std::size_t step_count() const { return step_count_; }

  // One update over the named parameter list. Every parameter must carry a
  // gradient; call after backward() and zero grads between steps.
  void step(std::vector<std::pair<std::string, Tensor<T>>>& params) {
    if (slots_.empty()) {
      slots_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        slots_[i].m.assign(params[i].second.size(), T(0));
        slots_[i].v.assign(params[i].second.size(), T(0));
      }
    }
    if (slots_.size() != params.size()) {
      throw ValueError("AdamOptimizer: parameter list changed size");
    }
    ++step_count_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& [name, param] = params[i];
      if (!param.has_grad()) {
        throw ValueError("AdamOptimizer: parameter '" + name +
                         "' has no gradient");
      }
      const auto& grad = param.grad();
      auto& vals = param.values_mut();
      auto& m = slots_[i].m;
      auto& v = slots_[i].v;
      for (std::size_t e = 0; e < vals.size(); ++e) {
        const double g = static_cast<double>(grad[e]);
        const double me = beta1_ * static_cast<double>(m[e]) + (1.0 - beta1_) * g;
        const double ve =
            beta2_ * static_cast<double>(v[e]) + (1.0 - beta2_) * g * g;
        m[e] = static_cast<T>(me);
        v[e] = static_cast<T>(ve);
        const double update =
            lr_ * (me / bc1) / (std::sqrt(ve / bc2) + eps_);
        vals[e] = static_cast<T>(static_cast<double>(vals[e]) - update);
      }
    }
  }

 private:
  struct Slot {
    std::vector<T> m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  std::size_t step_count_ = 0;
  std::vector<Slot> slots_;
};

// Reduce-on-plateau: after `patience` consecutive epochs without a strict
// improvement beyond the threshold, multiply the rate by `factor` and reset
// the counter.
struct PlateauScheduler {
  double factor = 0.3;
  std::size_t patience = 10;
  double threshold = 1e-8;
  double best = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;

  bool step(double epoch_loss, double& lr) {
    if (epoch_loss < best - threshold) {
      best = epoch_loss;
      bad_epochs = 0;
      return false;
    }
    ++bad_epochs;
    if (bad_epochs >= patience) {
      lr *= factor;
      bad_epochs = 0;
      return true;
    }
    return false;
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  std::optional<double> val_map;
};

inline nlohmann::json epoch_log_to_json(const EpochLog& log) {
  nlohmann::json doc{{"epoch", log.epoch},
                     {"train_loss", log.train_loss},
                     {"val_loss", log.val_loss},
                     {"lr", log.lr}};
  if (log.val_map) doc["map"] = *log.val_map; else doc["map"] = nullptr;
  return doc;
}

struct FitOptions {
  std::size_t epochs = 300;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double plateau_factor = 0.3;
  std::size_t plateau_patience = 10;
  double grad_clip = 0.0;  // 0 disables clipping
  std::uint64_t seed = 0;
  bool log_val_map = true;
};

struct FitResult {
  std::vector<EpochLog> log;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
};

namespace detail {

template <class T>
struct ModelSnapshot {
  std::vector<std::vector<T>> params;
  std::vector<std::vector<T>> buffers;
};

template <class T>
ModelSnapshot<T> take_snapshot(CtrnModel<T>& model) {
  ModelSnapshot<T> snap;
  for (auto& [name, p] : model.parameters()) snap.params.push_back(p.values());
  for (auto& [name, b] : model.buffers()) snap.buffers.push_back(*b);
  return snap;
}

template <class T>
void restore_snapshot(CtrnModel<T>& model, const ModelSnapshot<T>& snap) {
  std::size_t i = 0;
  for (auto& [name, p] : model.parameters()) p.values_mut() = snap.params[i++];
  i = 0;
  for (auto& [name, b] : model.buffers()) *b = snap.buffers[i++];
}

template <class T>
void clip_gradients(std::vector<std::pair<std::string, Tensor<T>>>& params,
                    double max_norm) {
  double sq = 0.0;
  for (auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return;
  const T scale_by = static_cast<T>(max_norm / norm);
  for (auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (auto& g : p.grad_mut()) g *= scale_by;
  }
}

}  // namespace detail

// Mean total loss per element over a video list, eval mode.
template <class T>
double evaluate_loss(CtrnModel<T>& model, const std::vector<VideoRecord>& videos) {
  double weighted = 0.0;
  std::size_t elements = 0;
  for (const auto& video : videos) {
    auto out = model.forward(video.features, /*training=*/false);
    auto target = labels_to_tensor<T>(video.labels);
    const double loss =
        static_cast<double>(total_loss(out.ctm_probs, out.rtm_probs, target,
                                       model.config().alpha)
                                .item());
    const std::size_t n = video.labels.values.size();
    weighted += loss * static_cast<double>(n);
    elements += n;
  }
  return elements == 0 ? 0.0 : weighted / static_cast<double>(elements);
}

// Eval-mode scores of the main head for a video list.
template <class T>
std::vector<ScoreMatrix> evaluate_scores(CtrnModel<T>& model,
                                         const std::vector<VideoRecord>& videos) {
  std::vector<ScoreMatrix> scores;
  scores.reserve(videos.size());
  for (const auto& video : videos) {
    scores.push_back(model.forward(video.features, false).ctm_scores());
  }
  return scores;
}

template <class T>
FitResult fit(CtrnModel<T>& model, const std::vector<VideoRecord>& train,
              const std::vector<VideoRecord>& val, const FitOptions& options) {
  if (train.empty()) throw ValueError("fit: empty training set");
  if (options.batch_size == 0) throw ValueError("fit: batch_size must be >= 1");
  AdamOptimizer<T> optimizer(options.lr);
  PlateauScheduler scheduler;
  scheduler.factor = options.plateau_factor;
  scheduler.patience = options.plateau_patience;

  FitResult result;
  detail::ModelSnapshot<T> best = detail::take_snapshot(model);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  double lr = options.lr;
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    RngEngine shuffle_rng(derive_seed(options.seed, 0xB00 + epoch));
    RngEngine dropout_rng(derive_seed(options.seed, 0xD00 + epoch));
    shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_weighted = 0.0;
    std::size_t epoch_elements = 0;
    for (std::size_t start = 0; start < order.size();
         start += options.batch_size) {
      const std::size_t stop =
          std::min(order.size(), start + options.batch_size);
      std::size_t batch_elements = 0;
      for (std::size_t k = start; k < stop; ++k) {
        batch_elements += train[order[k]].labels.values.size();
      }
      model.zero_grad();
      Tensor<T> batch_loss;
      bool first = true;
      for (std::size_t k = start; k < stop; ++k) {
        const auto& video = train[order[k]];
        auto out = model.forward(video.features, /*training=*/true, &dropout_rng);
        auto target = labels_to_tensor<T>(video.labels);
        auto loss = total_loss(out.ctm_probs, out.rtm_probs, target,
                               model.config().alpha);
        const double item = static_cast<double>(loss.item());
        const std::size_t n = video.labels.values.size();
        epoch_weighted += item * static_cast<double>(n);
        auto weighted = scale(
            loss, static_cast<T>(static_cast<double>(n) /
                                 static_cast<double>(batch_elements)));
        batch_loss = first ? weighted : add(batch_loss, weighted);
        first = false;
      }
      epoch_elements += batch_elements;
      const double value = static_cast<double>(batch_loss.item());
      if (!std::isfinite(value)) {
        throw NumericError("fit: non-finite loss in epoch " +
                           std::to_string(epoch) + ", batch " +
                           std::to_string(start / options.batch_size));
      }
      backward(batch_loss);
      if (options.grad_clip > 0.0) {
        detail::clip_gradients(model.parameters(), options.grad_clip);
      }
      optimizer.set_learning_rate(lr);
      optimizer.step(model.parameters());
    }

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = epoch_weighted / static_cast<double>(epoch_elements);
    log.val_loss = val.empty() ? log.train_loss : evaluate_loss(model, val);
    if (options.log_val_map && !val.empty()) {
      std::vector<LabelMatrix> labels;
      for (const auto& v : val) labels.push_back(v.labels);
      try {
        log.val_map = per_frame_map(evaluate_scores(model, val), labels).map;
      } catch (const ValueError&) {
        log.val_map.reset();  // no evaluable class in the validation split
      }
    }
    if (log.val_loss < result.best_val_loss) {
      result.best_val_loss = log.val_loss;
      result.best_epoch = epoch;
      best = detail::take_snapshot(model);
    }
    scheduler.step(log.val_loss, lr);
    log.lr = lr;
    result.log.push_back(log);
  }
  detail::restore_snapshot(model, best);
  return result;
}

}  // namespace ctrn
