// Command-line driver: synthetic dataset generation, co-occurrence
// statistics, training, evaluation, gradient checking, two-stream score
// fusion, and adjacency export. Machine-readable output is JSON; human
// summaries go to stderr. Exit codes: 0 success, 1 usage error, 2
// data/format error, 3 numerical failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ctrn/checkpoint.hpp"
#include "ctrn/cooccurrence.hpp"
#include "ctrn/data.hpp"
#include "ctrn/metrics.hpp"
#include "ctrn/model.hpp"
#include "ctrn/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kSchemaVersion = 1;

struct TrainingOptions {
  std::size_t epochs = 300;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double plateau_factor = 0.3;
  std::size_t plateau_patience = 10;
  double grad_clip = 0.0;
  std::uint64_t seed = 0;
  std::size_t precision = 64;  // 32 or 64
};

struct RunConfig {
  ctrn::CtrnConfig model;
  ctrn::SyntheticSpec data;
  TrainingOptions training;
};

json training_to_json(const TrainingOptions& t) {
  return json{{"epochs", t.epochs},
              {"batch_size", t.batch_size},
              {"lr", t.lr},
              {"plateau_factor", t.plateau_factor},
              {"plateau_patience", t.plateau_patience},
              {"grad_clip", t.grad_clip},
              {"seed", t.seed},
              {"precision", t.precision}};
}

TrainingOptions training_from_json(const json& doc) {
  TrainingOptions t;
  t.epochs = doc.value("epochs", t.epochs);
  t.batch_size = doc.value("batch_size", t.batch_size);
  t.lr = doc.value("lr", t.lr);
  t.plateau_factor = doc.value("plateau_factor", t.plateau_factor);
  t.plateau_patience = doc.value("plateau_patience", t.plateau_patience);
  t.grad_clip = doc.value("grad_clip", t.grad_clip);
  t.seed = doc.value("seed", t.seed);
  t.precision = doc.value("precision", t.precision);
  return t;
}

json run_config_to_json(const RunConfig& cfg) {
  return json{{"schema_version", kSchemaVersion},
              {"model", ctrn::ctrn_config_to_json(cfg.model)},
              {"data", ctrn::synthetic_spec_to_json(cfg.data)},
              {"training", training_to_json(cfg.training)}};
}

RunConfig run_config_from_json(const json& doc) {
  const int version = doc.value("schema_version", kSchemaVersion);
  if (version != kSchemaVersion) {
    throw ctrn::FormatError("config: unsupported schema_version " +
                            std::to_string(version));
  }
  RunConfig cfg;
  if (doc.contains("model")) cfg.model = ctrn::ctrn_config_from_json(doc["model"]);
  if (doc.contains("data")) cfg.data = ctrn::synthetic_spec_from_json(doc["data"]);
  if (doc.contains("training")) cfg.training = training_from_json(doc["training"]);
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  if (path.empty()) return RunConfig{};
  std::ifstream in(path);
  if (!in) throw ctrn::IoError("config: cannot open '" + path + "'");
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ctrn::FormatError("config: bad JSON in '" + path + "': " + e.what());
  }
  return run_config_from_json(doc);
}

void write_json(const json& doc, const std::string& path) {
  if (path == "-") {
    std::cout << doc.dump(2) << "\n";
    return;
  }
  std::ofstream out(path);
  if (!out) throw ctrn::IoError("cannot open '" + path + "' for writing");
  out << doc.dump(2) << "\n";
  if (!out) throw ctrn::IoError("write failed for '" + path + "'");
}

std::vector<ctrn::LabelMatrix> label_list(const std::vector<ctrn::VideoRecord>& videos) {
  std::vector<ctrn::LabelMatrix> labels;
  labels.reserve(videos.size());
  for (const auto& v : videos) labels.push_back(v.labels);
  return labels;
}

// Flags shared by the subcommands that build or train a model.
struct ModelFlags {
  std::optional<std::size_t> d1, d2, classes, blocks, kernel;
  std::optional<double> dropout, alpha, theta, reweight_p;
  bool no_rtm_mlp = false, no_cgcn = false, no_tcn = false, no_gclassifier = false;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--d1", d1, "input feature width");
    cmd->add_option("--d2", d2, "class-specific width");
    cmd->add_option("--classes", classes, "class count (default: from dataset)");
    cmd->add_option("--blocks", blocks, "number of CTM blocks");
    cmd->add_option("--kernel", kernel, "TCN kernel size (odd)");
    cmd->add_option("--dropout", dropout, "dropout probability");
    cmd->add_option("--alpha", alpha, "auxiliary loss weight");
    cmd->add_option("--theta", theta, "co-occurrence threshold");
    cmd->add_option("--reweight-p", reweight_p, "re-weighting coefficient");
    cmd->add_flag("--no-rtm-mlp", no_rtm_mlp, "shared linear map instead of per-class");
    cmd->add_flag("--no-cgcn", no_cgcn, "disable the class graph layer");
    cmd->add_flag("--no-tcn", no_tcn, "disable the temporal layer");
    cmd->add_flag("--no-gclassifier", no_gclassifier,
                  "identity adjacency in the classifier");
  }

  void apply(ctrn::CtrnConfig& cfg) const {
    if (d1) cfg.D1 = *d1;
    if (d2) cfg.D2 = *d2;
    if (classes) cfg.C = *classes;
    if (blocks) cfg.num_blocks = *blocks;
    if (kernel) {
      cfg.kernel_size = *kernel;
      cfg.padding = (*kernel - 1) / 2;
    }
    if (dropout) cfg.dropout_p = *dropout;
    if (alpha) cfg.alpha = *alpha;
    if (theta) cfg.theta = *theta;
    if (reweight_p) cfg.reweight_p = *reweight_p;
    if (no_rtm_mlp) cfg.use_rtm_mlp = false;
    if (no_cgcn) cfg.use_cgcn = false;
    if (no_tcn) cfg.use_tcn = false;
    if (no_gclassifier) cfg.use_gclassifier = false;
  }
};

// --- generate ---------------------------------------------------------------

int cmd_generate(const std::string& config_path, const std::string& out_dir,
                 std::optional<std::uint64_t> seed, bool force) {
  RunConfig cfg = load_run_config(config_path);
  if (seed) cfg.data.seed = *seed;
  if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !force) {
    throw ctrn::ValueError("output directory '" + out_dir +
                           "' is not empty (use --force to overwrite)");
  }
  auto records = ctrn::generate(cfg.data);
  fs::create_directories(out_dir);
  ctrn::save_dataset(records, out_dir);
  write_json(run_config_to_json(cfg), (fs::path(out_dir) / "config.json").string());
  std::cerr << "generated " << records.size() << " videos (T=" << cfg.data.T
            << ", C=" << cfg.data.C << ", D1=" << cfg.data.D1 << ") into "
            << out_dir << "\n";
  return 0;
}

// --- cooc -------------------------------------------------------------------

int cmd_cooc(const std::string& dataset, double theta, double reweight_p,
             const std::string& out) {
  auto data = ctrn::load_dataset(dataset);
  auto cooc = ctrn::build_cooccurrence(label_list(data.train), theta, reweight_p);
  write_json(ctrn::cooccurrence_to_json(cooc), out);
  std::size_t links = 0;
  for (std::size_t i = 0; i < cooc.C; ++i) {
    for (std::size_t j = 0; j < cooc.C; ++j) {
      if (i != j && cooc.binary[i * cooc.C + j]) ++links;
    }
  }
  std::cerr << "co-occurrence over " << data.train.size() << " training videos: "
            << cooc.C << " classes, " << links << " off-diagonal links at theta="
            << theta << "\n";
  return 0;
}

// --- train --------------------------------------------------------------------

template <class T>
int run_train(RunConfig cfg, const std::string& dataset, const std::string& out_dir) {
  auto data = ctrn::load_dataset(dataset);
  if (data.train.empty()) throw ctrn::FormatError("dataset has no training videos");
  if (cfg.model.C == 0) cfg.model.C = data.train[0].labels.C;
  if (cfg.model.D1 != data.train[0].features.D1) {
    std::cerr << "note: config D1=" << cfg.model.D1 << " adjusted to dataset D1="
              << data.train[0].features.D1 << "\n";
    cfg.model.D1 = data.train[0].features.D1;
  }
  cfg.model.validate();

  // A_S comes from the training split only
  auto cooc = ctrn::build_cooccurrence(label_list(data.train), cfg.model.theta,
                                       cfg.model.reweight_p);
  ctrn::CtrnModel<T> model(cfg.model, cooc.adjacency, cfg.training.seed);

  ctrn::FitOptions options;
  options.epochs = cfg.training.epochs;
  options.batch_size = cfg.training.batch_size;
  options.lr = cfg.training.lr;
  options.plateau_factor = cfg.training.plateau_factor;
  options.plateau_patience = cfg.training.plateau_patience;
  options.grad_clip = cfg.training.grad_clip;
  options.seed = cfg.training.seed;

  auto result = ctrn::fit(model, data.train, data.test, options);

  fs::create_directories(out_dir);
  {
    std::ofstream log((fs::path(out_dir) / "train_log.jsonl").string());
    if (!log) throw ctrn::IoError("cannot write train_log.jsonl");
    for (const auto& entry : result.log) {
      log << ctrn::epoch_log_to_json(entry).dump() << "\n";
    }
  }
  ctrn::save_checkpoint(model, (fs::path(out_dir) / "model.ctrn").string());
  ctrn::export_cooccurrence(cooc, (fs::path(out_dir) / "cooccurrence.json").string());
  write_json(run_config_to_json(cfg), (fs::path(out_dir) / "config.json").string());
  std::cerr << "trained " << cfg.training.epochs << " epochs; best val loss "
            << result.best_val_loss << " at epoch " << result.best_epoch
            << "; artifacts in " << out_dir << "\n";
  return 0;
}

// --- eval ---------------------------------------------------------------------

json eval_videos(const std::vector<ctrn::ScoreMatrix>& scores,
                 const std::vector<ctrn::LabelMatrix>& labels,
                 const std::vector<long>& taus) {
  json doc;
  auto overall = ctrn::per_frame_map(scores, labels);
  doc["per_frame"] = ctrn::eval_result_to_json(overall);
  try {
    doc["cooccurring"] = ctrn::eval_result_to_json(ctrn::cooccurring_map(scores, labels));
  } catch (const ctrn::ValueError&) {
    doc["cooccurring"] = nullptr;  // no multi-label snippet in this split
  }
  json ac = json::array();
  for (long tau : taus) {
    ac.push_back(ctrn::action_conditional_to_json(
        ctrn::action_conditional(scores, labels, tau)));
  }
  doc["action_conditional"] = std::move(ac);
  return doc;
}

template <class T>
std::vector<ctrn::ScoreMatrix> checkpoint_scores(
    const std::string& checkpoint, const std::vector<ctrn::VideoRecord>& videos) {
  auto model = ctrn::load_checkpoint<T>(checkpoint);
  return ctrn::evaluate_scores(model, videos);
}

int cmd_eval(const std::string& checkpoint, const std::string& scores_dir,
             const std::string& dataset, const std::string& split,
             std::vector<long> taus, const std::string& out,
             const std::string& dump_scores, std::size_t precision) {
  auto data = ctrn::load_dataset(dataset);
  const auto& videos = split == "train" ? data.train : data.test;
  if (videos.empty()) throw ctrn::FormatError("split '" + split + "' is empty");

  std::vector<ctrn::ScoreMatrix> scores;
  if (!scores_dir.empty()) {
    for (const auto& video : videos) {
      auto raw = ctrn::read_ctrnt(
          (fs::path(scores_dir) / (video.id + ".ctrnt")).string());
      if (raw.shape.size() != 2 || raw.shape[0] != video.labels.T ||
          raw.shape[1] != video.labels.C) {
        throw ctrn::FormatError("score file for '" + video.id +
                                "' does not match the video's T x C");
      }
      scores.push_back(ctrn::ScoreMatrix::from_logits(
          raw.shape[0], raw.shape[1],
          std::vector<double>(raw.values.begin(), raw.values.end())));
    }
  } else {
    scores = precision == 32 ? checkpoint_scores<float>(checkpoint, videos)
                             : checkpoint_scores<double>(checkpoint, videos);
  }

  if (!dump_scores.empty()) {
    fs::create_directories(dump_scores);
    for (std::size_t v = 0; v < videos.size(); ++v) {
      std::vector<float> logits(scores[v].logits.begin(), scores[v].logits.end());
      ctrn::write_ctrnt((fs::path(dump_scores) / (videos[v].id + ".ctrnt")).string(),
                        {scores[v].T, scores[v].C}, logits);
    }
  }

  json doc = eval_videos(scores, label_list(videos), taus);
  doc["split"] = split;
  doc["videos"] = videos.size();
  write_json(doc, out);
  std::cerr << "split=" << split << "  per-frame mAP "
            << doc["per_frame"]["map"].get<double>();
  if (!doc["cooccurring"].is_null()) {
    std::cerr << "  co-occurring mAP " << doc["cooccurring"]["map"].get<double>();
  }
  std::cerr << "\n";
  for (const auto& block : doc["action_conditional"]) {
    std::cerr << "  tau=" << block["tau"].get<long>();
    if (block["map"].is_null()) {
      std::cerr << "  (no evaluable pair)\n";
      continue;
    }
    std::cerr << "  P " << block["precision"].get<double>() << "  R "
              << block["recall"].get<double>() << "  F1 "
              << block["f1"].get<double>() << "  mAP "
              << block["map"].get<double>() << "\n";
  }
  return 0;
}

// --- gradcheck ------------------------------------------------------------------

int cmd_gradcheck(const std::string& config_path, std::uint64_t seed,
                  double eps, const std::string& out, const ModelFlags& flags) {
  ctrn::CtrnConfig cfg;
  // the documented tiny configuration; overridable from a config file/flags
  cfg.D1 = 16;
  cfg.D2 = 8;
  cfg.C = 3;
  cfg.num_blocks = 2;
  cfg.kernel_size = 3;
  cfg.padding = 1;
  std::size_t t_len = 4;
  if (!config_path.empty()) {
    RunConfig run = load_run_config(config_path);
    cfg = run.model;
    t_len = std::max<std::size_t>(4, run.data.T);
  }
  flags.apply(cfg);
  cfg.dropout_p = 0.0;  // the check needs a deterministic forward
  cfg.validate();

  ctrn::RngEngine rng(ctrn::derive_seed(seed, 0x96ADC8ECULL));
  std::vector<ctrn::LabelMatrix> labels(1);
  labels[0] = ctrn::LabelMatrix::zeros(t_len, cfg.C);
  for (auto& v : labels[0].values) v = rng.bernoulli(0.4) ? 1 : 0;
  auto cooc = ctrn::build_cooccurrence(labels, cfg.theta, cfg.reweight_p);
  ctrn::CtrnModel<double> model(cfg, cooc.adjacency, seed);

  const auto count = ctrn::count_parameters(model);
  if (count.total > 20000) {
    std::cerr << "warning: " << count.total
              << " parameters; finite differences need two forward passes per "
                 "element, expect a long runtime\n";
  }

  auto x = ctrn::TensorD::rand_uniform({t_len, cfg.D1}, rng, -1.0, 1.0);
  auto target = ctrn::labels_to_tensor<double>(labels[0]);
  auto report = ctrn::gradcheck_model(model, x, target, eps);

  double worst = 0.0;
  json groups = json::array();
  for (const auto& [name, err] : report) {
    groups.push_back({{"parameter", name}, {"max_rel_error", err}});
    worst = std::max(worst, err);
    std::cerr << "  " << name << "  " << err << "\n";
  }
  json doc{{"eps", eps},
           {"seed", seed},
           {"T", t_len},
           {"parameter_groups", groups},
           {"max_rel_error", worst},
           {"total_parameters", count.total}};
  write_json(doc, out);
  std::cerr << "max relative error " << worst << " over " << report.size()
            << " parameter groups\n";
  return 0;
}

// --- fuse ---------------------------------------------------------------------

ctrn::ScoreMatrix read_score_file(const std::string& path) {
  auto raw = ctrn::read_ctrnt(path);
  if (raw.shape.size() != 2) {
    throw ctrn::FormatError("score file '" + path + "': expected rank 2");
  }
  return ctrn::ScoreMatrix::from_logits(
      raw.shape[0], raw.shape[1],
      std::vector<double>(raw.values.begin(), raw.values.end()));
}

void write_score_file(const ctrn::ScoreMatrix& scores, const std::string& path) {
  std::vector<float> logits(scores.logits.begin(), scores.logits.end());
  ctrn::write_ctrnt(path, {scores.T, scores.C}, logits);
}

int cmd_fuse(const std::string& path_a, const std::string& path_b,
             const std::string& out) {
  if (fs::is_directory(path_a) != fs::is_directory(path_b)) {
    throw ctrn::ValueError("fuse: inputs must both be files or both directories");
  }
  if (!fs::is_directory(path_a)) {
    write_score_file(ctrn::fuse_logits(read_score_file(path_a),
                                       read_score_file(path_b)), out);
    std::cerr << "fused " << path_a << " + " << path_b << " -> " << out << "\n";
    return 0;
  }
  fs::create_directories(out);
  std::size_t fused = 0;
  std::vector<fs::path> entries;
  for (const auto& entry : fs::directory_iterator(path_a)) {
    if (entry.path().extension() == ".ctrnt") entries.push_back(entry.path());
  }
  std::sort(entries.begin(), entries.end());
  for (const auto& file : entries) {
    const auto sibling = fs::path(path_b) / file.filename();
    if (!fs::exists(sibling)) {
      throw ctrn::FormatError("fuse: '" + sibling.string() + "' is missing");
    }
    write_score_file(
        ctrn::fuse_logits(read_score_file(file.string()),
                          read_score_file(sibling.string())),
        (fs::path(out) / file.filename()).string());
    ++fused;
  }
  std::cerr << "fused " << fused << " score files into " << out << "\n";
  return 0;
}

// --- export-adjacency ------------------------------------------------------------

template <class T>
json export_adjacency_doc(const std::string& checkpoint, std::uint64_t seed,
                          std::size_t t_len) {
  auto model = ctrn::load_checkpoint<T>(checkpoint);
  const auto& cfg = model.config();
  json doc;
  json a_s = json::array();
  for (std::size_t i = 0; i < cfg.C; ++i) {
    json row = json::array();
    for (std::size_t j = 0; j < cfg.C; ++j) {
      row.push_back(model.adjacency()[i * cfg.C + j]);
    }
    a_s.push_back(std::move(row));
  }
  doc["A_S"] = std::move(a_s);

  ctrn::RngEngine rng(ctrn::derive_seed(seed, 0xADJ0ECULL + 0));
  auto probe = ctrn::Tensor<T>::rand_uniform({t_len, cfg.D1}, rng, T(-1), T(1));
  auto attention = model.attention_maps(probe);

  const auto matrix_rows = [&](const std::vector<T>& values) {
    json rows = json::array();
    for (std::size_t i = 0; i < cfg.C; ++i) {
      json row = json::array();
      for (std::size_t j = 0; j < cfg.C; ++j) row.push_back(values[i * cfg.C + j]);
      rows.push_back(std::move(row));
    }
    return rows;
  };

  json blocks = json::array();
  std::size_t att_index = 0;
  for (std::size_t b = 0; b < model.blocks().size(); ++b) {
    if (!cfg.use_cgcn) break;
    json block;
    block["block"] = b;
    block["base"] = matrix_rows(model.blocks()[b].base_adj.values());
    const auto& att = attention[att_index++];
    block["attention"] = matrix_rows(att.values());
    std::vector<T> superimposed(cfg.C * cfg.C);
    for (std::size_t i = 0; i < superimposed.size(); ++i) {
      superimposed[i] = model.blocks()[b].base_adj.values()[i] + att.values()[i];
    }
    block["superimposed"] = matrix_rows(superimposed);
    blocks.push_back(std::move(block));
  }
  doc["blocks"] = std::move(blocks);
  doc["probe"] = {{"seed", seed}, {"T", t_len}};
  return doc;
}

int cmd_export_adjacency(const std::string& checkpoint, const std::string& out,
                         std::uint64_t seed, std::size_t t_len,
                         std::size_t precision) {
  json doc = precision == 32
                 ? export_adjacency_doc<float>(checkpoint, seed, t_len)
                 : export_adjacency_doc<double>(checkpoint, seed, t_len);
  write_json(doc, out);
  std::cerr << "exported A_S and " << doc["blocks"].size()
            << " block adjacency sets to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-temporal relational network for densely-labelled action detection"};
  app.require_subcommand(1);

  // generate
  std::string gen_config, gen_out;
  std::optional<std::uint64_t> gen_seed;
  bool gen_force = false;
  auto* generate = app.add_subcommand("generate", "write a synthetic dataset");
  generate->add_option("--config", gen_config, "run config JSON");
  generate->add_option("--out", gen_out, "output directory")->required();
  generate->add_option("--seed", gen_seed, "override the generator seed");
  generate->add_flag("--force", gen_force, "overwrite a non-empty directory");

  // cooc
  std::string cooc_dataset, cooc_out = "-";
  double cooc_theta = 0.05, cooc_p = 0.2;
  auto* cooc = app.add_subcommand("cooc", "co-occurrence statistics of the training split");
  cooc->add_option("--dataset", cooc_dataset, "dataset directory")->required();
  cooc->add_option("--theta", cooc_theta, "binarization threshold");
  cooc->add_option("--reweight-p", cooc_p, "re-weighting coefficient");
  cooc->add_option("--out", cooc_out, "output JSON path ('-' for stdout)");

  // train
  std::string train_config, train_dataset, train_out;
  std::optional<std::uint64_t> train_seed;
  std::optional<std::size_t> train_epochs, train_batch, train_precision;
  std::optional<double> train_lr;
  ModelFlags train_flags;
  auto* train = app.add_subcommand("train", "train a model on a dataset");
  train->add_option("--config", train_config, "run config JSON");
  train->add_option("--dataset", train_dataset, "dataset directory")->required();
  train->add_option("--out", train_out, "output directory")->required();
  train->add_option("--seed", train_seed, "override the run seed");
  train->add_option("--epochs", train_epochs, "override epoch count");
  train->add_option("--batch-size", train_batch, "override batch size");
  train->add_option("--lr", train_lr, "override the initial learning rate");
  train->add_option("--precision", train_precision, "32 or 64 (default 64)");
  train_flags.add_to(train);

  // eval
  std::string eval_checkpoint, eval_scores, eval_dataset, eval_split = "test",
              eval_out = "-", eval_dump;
  std::vector<long> eval_taus = {0, 2, 4};
  std::size_t eval_precision = 64;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint or score files");
  eval->add_option("--checkpoint", eval_checkpoint, "model checkpoint");
  eval->add_option("--scores", eval_scores, "directory of score .ctrnt files");
  eval->add_option("--dataset", eval_dataset, "dataset directory")->required();
  eval->add_option("--split", eval_split, "train or test")
      ->check(CLI::IsMember({"train", "test"}));
  eval->add_option("--tau", eval_taus, "action-conditional window sizes");
  eval->add_option("--out", eval_out, "metrics JSON path ('-' for stdout)");
  eval->add_option("--dump-scores", eval_dump, "write eval logits per video");
  eval->add_option("--precision", eval_precision, "32 or 64");

  // gradcheck
  std::string gc_config, gc_out = "-";
  std::uint64_t gc_seed = 0;
  double gc_eps = 1e-4;
  ModelFlags gc_flags;
  auto* gradcheck = app.add_subcommand(
      "gradcheck", "finite-difference check of every parameter group");
  gradcheck->add_option("--config", gc_config, "run config JSON (default: tiny)");
  gradcheck->add_option("--seed", gc_seed, "probe seed");
  gradcheck->add_option("--eps", gc_eps, "central difference step");
  gradcheck->add_option("--out", gc_out, "report JSON path ('-' for stdout)");
  gc_flags.add_to(gradcheck);

  // fuse
  std::string fuse_a, fuse_b, fuse_out;
  auto* fuse = app.add_subcommand("fuse", "mean-pool two logit streams");
  fuse->add_option("a", fuse_a, "first score file or directory")->required();
  fuse->add_option("b", fuse_b, "second score file or directory")->required();
  fuse->add_option("--out", fuse_out, "output file or directory")->required();

  // export-adjacency
  std::string adj_checkpoint, adj_out = "-";
  std::uint64_t adj_seed = 0;
  std::size_t adj_t = 16, adj_precision = 64;
  auto* export_adj = app.add_subcommand("export-adjacency",
                                        "dump A_S and per-block adjacency");
  export_adj->add_option("--checkpoint", adj_checkpoint, "model checkpoint")
      ->required();
  export_adj->add_option("--out", adj_out, "output JSON path ('-' for stdout)");
  export_adj->add_option("--seed", adj_seed, "probe input seed");
  export_adj->add_option("--probe-t", adj_t, "probe input length");
  export_adj->add_option("--precision", adj_precision, "32 or 64");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }

  try {
    if (*generate) return cmd_generate(gen_config, gen_out, gen_seed, gen_force);
    if (*cooc) return cmd_cooc(cooc_dataset, cooc_theta, cooc_p, cooc_out);
    if (*train) {
      RunConfig cfg = load_run_config(train_config);
      if (train_seed) cfg.training.seed = *train_seed;
      if (train_epochs) cfg.training.epochs = *train_epochs;
      if (train_batch) cfg.training.batch_size = *train_batch;
      if (train_lr) cfg.training.lr = *train_lr;
      if (train_precision) cfg.training.precision = *train_precision;
      train_flags.apply(cfg.model);
      if (cfg.training.precision != 32 && cfg.training.precision != 64) {
        throw ctrn::ValueError("precision must be 32 or 64");
      }
      return cfg.training.precision == 32
                 ? run_train<float>(cfg, train_dataset, train_out)
                 : run_train<double>(cfg, train_dataset, train_out);
    }
    if (*eval) {
      if (eval_checkpoint.empty() == eval_scores.empty()) {
        throw ctrn::ValueError("eval needs exactly one of --checkpoint / --scores");
      }
      return cmd_eval(eval_checkpoint, eval_scores, eval_dataset, eval_split,
                      eval_taus, eval_out, eval_dump, eval_precision);
    }
    if (*gradcheck) return cmd_gradcheck(gc_config, gc_seed, gc_eps, gc_out, gc_flags);
    if (*fuse) return cmd_fuse(fuse_a, fuse_b, fuse_out);
    if (*export_adj) {
      return cmd_export_adjacency(adj_checkpoint, adj_out, adj_seed, adj_t,
                                  adj_precision);
    }
  } catch (const ctrn::NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const ctrn::ValueError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ctrn::Error& e) {  // io / format / shape
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
