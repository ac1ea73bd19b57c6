// Command-line front end: synthetic data generation, the three training
// stages, evaluation, and the full experiment pipeline.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "embae/embae.hpp"

namespace {

embae::SyntheticWorldConfig load_synth_config(const std::filesystem::path& path, std::string& name) {
  std::ifstream in(path);
  if (!in) throw embae::IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw embae::IoError("config " + path.string() + ": " + e.what());
  }
  name = j.value("name", std::string("synth"));
  return embae::detail::parse_synth(j);
}

void print_scores_csv(const embae::Scores& s, const std::string& model, const std::string& variant) {
  std::printf("model,variant,rank1,rank1_nd,map,map_nd,n_query\n");
  std::printf("%s,%s,%.6f,%.6f,%.6f,%.6f,%d\n", model.c_str(), variant.c_str(), s.rank1, s.rank1_nd,
              s.map, s.map_nd, s.n_query);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EmbAE: metric-embedding autoencoder training and evaluation"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint_path, query_dir, gallery_dir, variant_flag;
  bool no_tta = false, no_normalize = false;

  auto* synth = app.add_subcommand("synth-gen", "Generate a synthetic dataset directory");
  synth->add_option("config", config_path, "Synthetic world config (JSON)")->required();
  synth->add_option("out", out_dir, "Output directory")->required();

  auto* train = app.add_subcommand("train-embedding", "Stage 1: triplet-loss embedding training");
  train->add_option("config", config_path, "Experiment config (JSON)")->required();

  auto* pretrain = app.add_subcommand("pretrain-embae", "Stage 2: autoencoder pre-training");
  pretrain->add_option("config", config_path, "Experiment config (JSON)")->required();

  auto* tune = app.add_subcommand("finetune", "Stage 3: unsupervised fine-tuning on the target");
  tune->add_option("config", config_path, "Experiment config (JSON)")->required();
  tune->add_option("--variant", variant_flag, "Override variant: full|fix-nui|new-nui|cam-nui");

  auto* evaluate = app.add_subcommand("evaluate", "Score a checkpoint on query/gallery directories");
  evaluate->add_option("checkpoint", checkpoint_path, "Checkpoint directory")->required();
  evaluate->add_option("query", query_dir, "Query dataset directory")->required();
  evaluate->add_option("gallery", gallery_dir, "Gallery dataset directory")->required();
  evaluate->add_flag("--no-tta", no_tta, "Disable test-time flip averaging");
  evaluate->add_flag("--no-normalize", no_normalize, "Disable embedding length normalization");

  auto* run = app.add_subcommand("run", "Full pipeline: train, pre-train, fine-tune, evaluate");
  run->add_option("config", config_path, "Experiment config (JSON)")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      std::string name;
      const auto cfg = load_synth_config(config_path, name);
      embae::save_precomputed(embae::synth_generate(cfg, name), out_dir);
      std::printf("wrote %s\n", out_dir.c_str());
    } else if (*train) {
      embae::stage_train_embedding(embae::load_experiment_config(config_path));
    } else if (*pretrain) {
      embae::stage_pretrain_embae(embae::load_experiment_config(config_path));
    } else if (*tune) {
      auto cfg = embae::load_experiment_config(config_path);
      if (!variant_flag.empty()) cfg.variant = embae::finetune_variant_from_string(variant_flag);
      embae::stage_finetune(cfg);
    } else if (*evaluate) {
      auto loaded = embae::load_checkpoint<embae::PipelineScalar>(checkpoint_path);
      const embae::Dataset query = embae::load_dataset_dir(query_dir);
      const embae::Dataset gallery = embae::load_dataset_dir(gallery_dir);
      embae::EmbeddingMap qe = embae::embed_for_eval(query.records, loaded.params, !no_tta, !no_normalize);
      embae::EmbeddingMap ge =
          embae::embed_for_eval(gallery.records, loaded.params, !no_tta, !no_normalize);
      print_scores_csv(embae::score(query.records, qe, gallery.records, ge), checkpoint_path, "none");
    } else if (*run) {
      const auto cfg = embae::load_experiment_config(config_path);
      const auto rows = embae::run_experiment(cfg);
      for (const auto& r : rows)
        std::printf("%s,%s,rank1=%.6f,rank1_nd=%.6f,map=%.6f,map_nd=%.6f\n", r.model.c_str(),
                    r.variant.c_str(), r.scores.rank1, r.scores.rank1_nd, r.scores.map, r.scores.map_nd);
    }
  } catch (const embae::ConfigError& e) {
    std::fprintf(stderr, "error: config: %s\n", e.what());
    return 2;
  } catch (const embae::IoError& e) {
    std::fprintf(stderr, "error: io: %s\n", e.what());
    return 3;
  } catch (const embae::ContractError& e) {
    std::fprintf(stderr, "error: contract: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: internal: %s\n", e.what());
    return 1;
  }
  return 0;
}
