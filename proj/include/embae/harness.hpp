#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "embae/checkpoint.hpp"
#include "embae/config.hpp"
#include "embae/core.hpp"
#include "embae/errors.hpp"
#include "embae/eval.hpp"
#include "embae/model.hpp"
#include "embae/providers.hpp"
#include "embae/training.hpp"

namespace embae {

// The shipped pipeline trains in float32; feature files and checkpoints
// round-trip bit-exactly at that precision.
using PipelineScalar = float;
using PipelineParams = ParamSet<PipelineScalar>;
using PipelineAdam = AdamState<PipelineScalar>;

// ---------------------------------------------------------------------------
// Dataset ingestion.

namespace detail {

// Parses "<id>_c<cam>..." stems, e.g. "0002_c1s1_000451_03" -> (2, 1).
// Identity "-1" marks a distractor.
inline std::pair<int, int> parse_reid_stem(const std::string& stem) {
  const std::size_t us = stem.find('_');
  if (us == std::string::npos || us == 0) throw IoError("cannot parse identity from '" + stem + "'");
  int identity = 0;
  try {
    std::size_t pos = 0;
    identity = std::stoi(stem.substr(0, us), &pos);
    if (pos != us) throw std::invalid_argument(stem);
  } catch (const std::exception&) {
    throw IoError("cannot parse identity from '" + stem + "'");
  }
  if (us + 1 >= stem.size() || stem[us + 1] != 'c')
    throw IoError("cannot parse camera from '" + stem + "' (expected '_c<digits>')");
  std::size_t end = us + 2;
  while (end < stem.size() && std::isdigit(static_cast<unsigned char>(stem[end]))) ++end;
  if (end == us + 2) throw IoError("cannot parse camera from '" + stem + "' (expected '_c<digits>')");
  return {identity, std::stoi(stem.substr(us + 2, end - us - 2))};
}

inline bool is_image_file(const std::filesystem::path& p) {
  const std::string ext = p.extension().string();
  return ext == ".jpg" || ext == ".jpeg" || ext == ".png" || ext == ".bmp";
}

// Reads one "<stem>.feat" sidecar: an EMBF1 file with one row (features) or
// two rows (features + flipped features).
inline std::pair<std::vector<float>, std::optional<std::vector<float>>> read_feat_file(
    const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  char magic[5] = {};
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kFeatureMagic, 5) != 0)
    throw IoError(p.string() + ": bad magic");
  const std::uint32_t rows = read_u32(in, "row count");
  const std::uint32_t f = read_u32(in, "feature dim");
  if (rows != 1 && rows != 2)
    throw IoError(p.string() + ": expected 1 or 2 rows, got " + std::to_string(rows));
  std::vector<float> base(f), flip;
  if (!in.read(reinterpret_cast<char*>(base.data()), static_cast<std::streamsize>(f * sizeof(float))))
    throw IoError(p.string() + ": truncated feature row");
  if (rows == 2) {
    flip.resize(f);
    if (!in.read(reinterpret_cast<char*>(flip.data()), static_cast<std::streamsize>(f * sizeof(float))))
      throw IoError(p.string() + ": truncated flip row");
  }
  return {std::move(base), rows == 2 ? std::optional<std::vector<float>>(std::move(flip)) : std::nullopt};
}

}  // namespace detail

// Loads a dataset directory. Two layouts are accepted:
//   - the precomputed-feature layout (manifest.csv + features.bin);
//   - image files named "<id>_c<cam>..." with a "<stem>.feat" sidecar each;
//     identity -1 rows are kept as distractors.
inline Dataset load_dataset_dir(const std::filesystem::path& path) {
  if (!std::filesystem::is_directory(path)) throw IoError("not a directory: " + path.string());
  if (std::filesystem::exists(path / "manifest.csv")) return load_precomputed(path).first;

  std::vector<std::filesystem::path> images;
  for (const auto& e : std::filesystem::directory_iterator(path))
    if (e.is_regular_file() && detail::is_image_file(e.path())) images.push_back(e.path());
  std::sort(images.begin(), images.end());

  const std::string name = path.filename().string();
  std::vector<ImageRecord> records;
  records.reserve(images.size());
  for (const auto& img : images) {
    const std::string stem = img.stem().string();
    const auto [identity, camera] = detail::parse_reid_stem(stem);
    const auto feat_path = img.parent_path() / (stem + ".feat");
    if (!std::filesystem::exists(feat_path))
      throw IoError("missing feature file for '" + img.filename().string() + "' (expected " +
                    feat_path.filename().string() + ")");
    ImageRecord rec;
    rec.sample_id = stem;
    rec.identity = identity;
    rec.camera = camera;
    rec.dataset = name;
    auto [base, flip] = detail::read_feat_file(feat_path);
    rec.features = std::move(base);
    rec.flip_features = std::move(flip);
    records.push_back(std::move(rec));
  }
  return Dataset::from_records(name, std::move(records));
}

// Directory-backed datasets keep the name carried by their records (the
// dataset tag is part of the record identity); synthetic ones take the
// spec's name.
inline Dataset materialize_dataset(const DatasetSpec& spec) {
  if (spec.type == DatasetSpec::Type::Synthetic) return synth_generate(spec.synth, spec.name);
  return load_dataset_dir(spec.path);
}

// ---------------------------------------------------------------------------
// Artifact paths and writers.

struct ExperimentPaths {
  std::filesystem::path root;
  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path embedding_ckpt() const { return checkpoints() / "embedding"; }
  std::filesystem::path embae_ckpt() const { return checkpoints() / "embae"; }
  std::filesystem::path finetuned_ckpt() const { return checkpoints() / "finetuned"; }
  std::filesystem::path traces() const { return root / "traces"; }
  std::filesystem::path report_csv() const { return root / "report.csv"; }
  std::filesystem::path report_json() const { return root / "report.json"; }
  std::filesystem::path resolved_config() const { return root / "config.resolved"; }
};

inline void write_trace_csv(const std::vector<TraceRow>& trace, const std::filesystem::path& path) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "step,epoch,lr,loss,phase,variant\n";
  char buf[160];
  for (const TraceRow& r : trace) {
    std::snprintf(buf, sizeof(buf), "%ld,%.17g,%.17g,%.17g,", r.step, r.epoch, r.lr, r.loss);
    out << buf << r.phase << ',' << r.variant << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

// One row of the final report: a scored checkpoint plus deltas against the
// baseline row.
struct ReportRow {
  std::string model;
  std::string variant;
  Scores scores;
  bool has_delta = false;
  double d_rank1 = 0, d_rank1_nd = 0, d_map = 0, d_map_nd = 0;
};

inline void write_report_csv(const std::vector<ReportRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "model,variant,rank1,rank1_nd,map,map_nd,n_query,delta_rank1,delta_rank1_nd,delta_map,delta_map_nd\n";
  char buf[256];
  for (const ReportRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%.6f,%.6f,%d", r.scores.rank1, r.scores.rank1_nd,
                  r.scores.map, r.scores.map_nd, r.scores.n_query);
    out << r.model << ',' << r.variant << ',' << buf;
    if (r.has_delta) {
      std::snprintf(buf, sizeof(buf), ",%.6f,%.6f,%.6f,%.6f", r.d_rank1, r.d_rank1_nd, r.d_map, r.d_map_nd);
      out << buf << '\n';
    } else {
      out << ",,,,\n";
    }
  }
  if (!out) throw IoError("failed writing " + path.string());
}

inline nlohmann::json report_row_json(const ReportRow& r) {
  nlohmann::json j{{"model", r.model},
                   {"variant", r.variant},
                   {"rank1", r.scores.rank1},
                   {"rank1_nd", r.scores.rank1_nd},
                   {"map", r.scores.map},
                   {"map_nd", r.scores.map_nd},
                   {"n_query", r.scores.n_query},
                   {"n_query_nd", r.scores.n_query_nd},
                   {"n_skipped", r.scores.n_skipped}};
  if (r.has_delta) {
    j["delta_rank1"] = r.d_rank1;
    j["delta_rank1_nd"] = r.d_rank1_nd;
    j["delta_map"] = r.d_map;
    j["delta_map_nd"] = r.d_map_nd;
  }
  return j;
}

inline void write_report_json(const std::vector<ReportRow>& rows, const nlohmann::json& resolved_config,
                              const std::filesystem::path& path) {
  nlohmann::json j;
  j["rows"] = nlohmann::json::array();
  for (const ReportRow& r : rows) j["rows"].push_back(report_row_json(r));
  j["metadata"] = {
      {"zero_positive_queries_excluded", true},
      {"tie_break", "ascending sample_id"},
  };
  j["config"] = resolved_config;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Stages. Each stage loads its input checkpoint, computes, and persists its
// own artifacts, so stages can be re-run in isolation and a full run is just
// the stages in order.

namespace detail {

inline std::vector<Dataset> materialize_sources(const ExperimentConfig& cfg) {
  std::vector<Dataset> out;
  out.reserve(cfg.sources.size());
  for (const auto& s : cfg.sources) out.push_back(materialize_dataset(s));
  return out;
}

inline int resolve_input_dim(const std::vector<Dataset>& sources, const Dataset& target) {
  if (sources.empty()) throw ConfigError("no source datasets");
  const int f = sources.front().feature_dim();
  for (const Dataset& d : sources)
    if (d.feature_dim() != f)
      throw ConfigError("dataset '" + d.name + "' has feature dim " + std::to_string(d.feature_dim()) +
                        ", expected " + std::to_string(f));
  if (target.feature_dim() != f)
    throw ConfigError("target dataset feature dim " + std::to_string(target.feature_dim()) +
                      " does not match sources (" + std::to_string(f) + ")");
  return f;
}

inline std::vector<std::string> source_nui_groups(const ExperimentConfig& cfg,
                                                  const std::vector<Dataset>& sources) {
  std::vector<std::string> keys;
  switch (cfg.nui_mode) {
    case NuiMode::Shared:
      keys.push_back("nui");
      break;
    case NuiMode::PerDataset:
      for (const Dataset& d : sources) keys.push_back(nui_key(NuiMode::PerDataset, d.name, 0));
      break;
    case NuiMode::PerCamera:
      for (const Dataset& d : sources)
        for (int cam : d.cameras) keys.push_back(nui_key(NuiMode::PerCamera, d.name, cam));
      break;
  }
  return keys;
}

}  // namespace detail

inline void write_resolved_config(const ExperimentConfig& cfg) {
  std::filesystem::create_directories(cfg.output_dir);
  std::ofstream out(ExperimentPaths{cfg.output_dir}.resolved_config(), std::ios::trunc);
  if (!out) throw IoError("cannot write config.resolved under " + cfg.output_dir.string());
  out << to_json(cfg).dump(2) << '\n';
}

// Stage 1: embedding training on the labeled sources.
inline void stage_train_embedding(const ExperimentConfig& cfg) {
  const ExperimentPaths paths{cfg.output_dir};
  write_resolved_config(cfg);
  std::vector<Dataset> sources = detail::materialize_sources(cfg);
  const Dataset target = materialize_dataset(cfg.target);

  HeadArchitecture arch;
  arch.input_dim = detail::resolve_input_dim(sources, target);
  arch.hidden_dim = cfg.hidden_dim;
  arch.output_dim = cfg.embed_dim;
  arch.bn_momentum = cfg.bn_momentum;
  arch.bn_epsilon = cfg.bn_epsilon;

  PipelineParams params = init_params<PipelineScalar>(arch, cfg.nui_mode,
                                                      detail::source_nui_groups(cfg, sources), cfg.seed);
  ScheduleConfig sched = cfg.schedule;
  sched.steps_per_epoch = compute_steps_per_epoch(sources, cfg.pk);
  validate(sched);

  PipelineAdam adam;
  EmbeddingTrainOptions opt;
  opt.steps = cfg.embed_steps;
  opt.flip_prob = cfg.flip_prob;
  opt.policy = cfg.policy;
  auto trace = train_embedding(sources, params, adam, cfg.pk, sched, cfg.margin,
                               derive_seed(cfg.seed, "stage/embedding"), opt);
  write_trace_csv(trace, paths.traces() / "embedding.csv");
  save_checkpoint(params, &adam, paths.embedding_ckpt());
}

// Stage 2: EmbAE pre-training (frozen embedding) on the same sources.
inline void stage_pretrain_embae(const ExperimentConfig& cfg) {
  const ExperimentPaths paths{cfg.output_dir};
  auto loaded = load_checkpoint<PipelineScalar>(paths.embedding_ckpt());
  std::vector<Dataset> sources = detail::materialize_sources(cfg);

  PipelineAdam adam;
  auto trace = pretrain_embae(sources, loaded.params, adam, cfg.pk, cfg.pretrain,
                              derive_seed(cfg.seed, "stage/pretrain"));
  write_trace_csv(trace, paths.traces() / "pretrain.csv");
  save_checkpoint(loaded.params, &adam, paths.embae_ckpt());
}

// Stage 3: unsupervised fine-tuning on the unlabeled target.
inline void stage_finetune(const ExperimentConfig& cfg) {
  const ExperimentPaths paths{cfg.output_dir};
  auto loaded = load_checkpoint<PipelineScalar>(paths.embae_ckpt());
  const Dataset target = materialize_dataset(cfg.target);
  auto trace = finetune(target, loaded.params, cfg.variant, cfg.finetune,
                        derive_seed(cfg.seed, "stage/finetune"));
  write_trace_csv(trace, paths.traces() / "finetune.csv");
  save_checkpoint(loaded.params, static_cast<const PipelineAdam*>(nullptr), paths.finetuned_ckpt());
}

inline Scores evaluate_checkpoint_on_split(const std::filesystem::path& ckpt, const Dataset& target,
                                           const EvalFlags& flags) {
  auto loaded = load_checkpoint<PipelineScalar>(ckpt);
  const QueryGallerySplit split = split_query_gallery(target);
  EmbeddingMap qe = embed_for_eval(split.query, loaded.params, flags.tta, flags.normalize);
  EmbeddingMap ge = embed_for_eval(split.gallery, loaded.params, flags.tta, flags.normalize);
  return score(split.query, qe, split.gallery, ge);
}

// Full pipeline: train -> baseline eval -> pre-train -> fine-tune -> final
// eval -> report with per-metric deltas against the baseline.
inline std::vector<ReportRow> run_experiment(const ExperimentConfig& cfg) {
  const ExperimentPaths paths{cfg.output_dir};
  stage_train_embedding(cfg);
  const Dataset target = materialize_dataset(cfg.target);

  ReportRow baseline;
  baseline.model = "baseline";
  baseline.variant = "none";
  baseline.scores = evaluate_checkpoint_on_split(paths.embedding_ckpt(), target, cfg.eval);

  stage_pretrain_embae(cfg);
  stage_finetune(cfg);

  ReportRow tuned;
  tuned.model = "embae_" + to_string(cfg.variant);
  tuned.variant = to_string(cfg.variant);
  tuned.scores = evaluate_checkpoint_on_split(paths.finetuned_ckpt(), target, cfg.eval);
  tuned.has_delta = true;
  tuned.d_rank1 = tuned.scores.rank1 - baseline.scores.rank1;
  tuned.d_rank1_nd = tuned.scores.rank1_nd - baseline.scores.rank1_nd;
  tuned.d_map = tuned.scores.map - baseline.scores.map;
  tuned.d_map_nd = tuned.scores.map_nd - baseline.scores.map_nd;

  std::vector<ReportRow> rows{baseline, tuned};
  write_report_csv(rows, paths.report_csv());
  write_report_json(rows, to_json(cfg), paths.report_json());
  return rows;
}

}  // namespace embae
