#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "embae/errors.hpp"
#include "embae/loss.hpp"
#include "embae/model.hpp"
#include "embae/providers.hpp"
#include "embae/sampling.hpp"
#include "embae/training.hpp"

namespace embae {

// A dataset is either generated on the fly or loaded from a directory.
struct DatasetSpec {
  enum class Type { Synthetic, Directory };
  Type type = Type::Synthetic;
  std::string name;
  std::filesystem::path path;        // Directory type
  SyntheticWorldConfig synth;        // Synthetic type
};

struct EvalFlags {
  bool tta = true;
  bool normalize = true;
};

// Declarative description of one train / fine-tune / evaluate run. Parsed
// from a versioned JSON file; `seed` is mandatory so no run has implicit
// nondeterminism.
struct ExperimentConfig {
  int schema_version = 1;
  RngSeed seed;
  std::filesystem::path output_dir;

  int hidden_dim = 1024;
  int embed_dim = 128;
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;

  PKConfig pk;
  MarginMode margin = MarginMode::softplus();
  ScheduleConfig schedule;  // steps_per_epoch resolved from the data
  long embed_steps = -1;    // -1: full flat+decay schedule
  double flip_prob = 0.5;
  SchedulerPolicy policy = SchedulerPolicy::RoundRobin;

  NuiMode nui_mode = NuiMode::PerCamera;
  FinetuneVariant variant = FinetuneVariant::CamNui;
  PretrainOptions pretrain;
  FinetuneOptions finetune;  // batch_size resolved to P*K unless given
  bool finetune_batch_size_given = false;

  EvalFlags eval;
  std::vector<DatasetSpec> sources;
  DatasetSpec target;
};

namespace detail {

inline SyntheticWorldConfig parse_synth(const nlohmann::json& j) {
  SyntheticWorldConfig c;
  c.n_identities = j.at("n_identities").get<int>();
  c.n_cameras = j.at("n_cameras").get<int>();
  c.feature_dim = j.at("feature_dim").get<int>();
  c.id_subspace_dim = j.at("id_subspace_dim").get<int>();
  c.camera_shift_scale = j.at("camera_shift_scale").get<double>();
  c.nuisance_noise_scale = j.at("nuisance_noise_scale").get<double>();
  c.images_per_identity_per_camera = j.at("images_per_identity_per_camera").get<int>();
  c.seed = RngSeed{j.at("seed").get<std::uint64_t>()};
  if (j.contains("world_seed")) c.world_seed = RngSeed{j.at("world_seed").get<std::uint64_t>()};
  validate(c);
  return c;
}

inline nlohmann::json synth_to_json(const SyntheticWorldConfig& c) {
  nlohmann::json j{{"n_identities", c.n_identities},
                   {"n_cameras", c.n_cameras},
                   {"feature_dim", c.feature_dim},
                   {"id_subspace_dim", c.id_subspace_dim},
                   {"camera_shift_scale", c.camera_shift_scale},
                   {"nuisance_noise_scale", c.nuisance_noise_scale},
                   {"images_per_identity_per_camera", c.images_per_identity_per_camera},
                   {"seed", c.seed.seed}};
  if (c.world_seed) j["world_seed"] = c.world_seed->seed;
  return j;
}

inline DatasetSpec parse_dataset_spec(const nlohmann::json& j, const std::string& what) {
  DatasetSpec s;
  const std::string type = j.at("type").get<std::string>();
  if (type == "synthetic") {
    s.type = DatasetSpec::Type::Synthetic;
    s.name = j.at("name").get<std::string>();
    s.synth = parse_synth(j);
  } else if (type == "dir") {
    s.type = DatasetSpec::Type::Directory;
    s.path = j.at("path").get<std::string>();
    s.name = j.value("name", s.path.filename().string());
    if (!std::filesystem::exists(s.path))
      throw ConfigError(what + ": dataset path does not exist: " + s.path.string());
  } else {
    throw ConfigError(what + ": unknown dataset type '" + type + "' (expected synthetic|dir)");
  }
  return s;
}

inline nlohmann::json dataset_spec_to_json(const DatasetSpec& s) {
  if (s.type == DatasetSpec::Type::Synthetic) {
    nlohmann::json j = synth_to_json(s.synth);
    j["type"] = "synthetic";
    j["name"] = s.name;
    return j;
  }
  return nlohmann::json{{"type", "dir"}, {"path", s.path.string()}, {"name", s.name}};
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  ExperimentConfig c;
  c.schema_version = j.value("schema_version", 1);
  if (c.schema_version != 1)
    throw ConfigError("config: unsupported schema_version " + std::to_string(c.schema_version));
  if (!j.contains("seed")) throw ConfigError("config: 'seed' is required");
  c.seed = RngSeed{j.at("seed").get<std::uint64_t>()};
  if (!j.contains("output_dir")) throw ConfigError("config: 'output_dir' is required");
  c.output_dir = j.at("output_dir").get<std::string>();

  if (j.contains("arch")) {
    const auto& a = j.at("arch");
    c.hidden_dim = a.value("hidden_dim", c.hidden_dim);
    c.embed_dim = a.value("embed_dim", c.embed_dim);
    c.bn_momentum = a.value("bn_momentum", c.bn_momentum);
    c.bn_epsilon = a.value("bn_epsilon", c.bn_epsilon);
  }
  if (j.contains("pk")) {
    c.pk.P = j.at("pk").value("P", c.pk.P);
    c.pk.K = j.at("pk").value("K", c.pk.K);
    validate(c.pk);
  }
  if (j.contains("margin")) {
    const std::string kind = j.at("margin").at("kind").get<std::string>();
    if (kind == "softplus")
      c.margin = MarginMode::softplus();
    else if (kind == "hinge")
      c.margin = MarginMode::hinge(j.at("margin").at("m").get<double>());
    else
      throw ConfigError("config: unknown margin kind '" + kind + "' (expected hinge|softplus)");
  }
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    c.schedule.base_lr = s.value("base_lr", c.schedule.base_lr);
    c.schedule.final_lr = s.value("final_lr", c.schedule.final_lr);
    c.schedule.flat_epochs = s.value("flat_epochs", c.schedule.flat_epochs);
    c.schedule.decay_epochs = s.value("decay_epochs", c.schedule.decay_epochs);
  }
  c.embed_steps = j.value("embed_steps", c.embed_steps);
  c.flip_prob = j.value("flip_probability", c.flip_prob);
  if (j.contains("scheduler_policy"))
    c.policy = scheduler_policy_from_string(j.at("scheduler_policy").get<std::string>());
  if (j.contains("nui_mode")) c.nui_mode = nui_mode_from_string(j.at("nui_mode").get<std::string>());
  if (j.contains("variant")) c.variant = finetune_variant_from_string(j.at("variant").get<std::string>());
  if (j.contains("pretrain")) {
    c.pretrain.steps = j.at("pretrain").value("steps", c.pretrain.steps);
    c.pretrain.lr = j.at("pretrain").value("lr", c.pretrain.lr);
  }
  if (j.contains("finetune")) {
    const auto& f = j.at("finetune");
    c.finetune.phase1_steps = f.value("phase1_steps", c.finetune.phase1_steps);
    c.finetune.phase2_steps = f.value("phase2_steps", c.finetune.phase2_steps);
    c.finetune.lr = f.value("lr", c.finetune.lr);
    if (f.contains("batch_size")) {
      c.finetune.batch_size = f.at("batch_size").get<int>();
      c.finetune_batch_size_given = true;
    }
  }
  if (!c.finetune_batch_size_given) c.finetune.batch_size = c.pk.P * c.pk.K;
  c.finetune.flip_prob = c.flip_prob;
  c.pretrain.flip_prob = c.flip_prob;
  c.pretrain.policy = c.policy;
  if (j.contains("eval")) {
    c.eval.tta = j.at("eval").value("tta", true);
    c.eval.normalize = j.at("eval").value("normalize", true);
  }

  if (!j.contains("source_datasets") || !j.at("source_datasets").is_array() ||
      j.at("source_datasets").empty())
    throw ConfigError("config: 'source_datasets' must be a non-empty array");
  int idx = 0;
  for (const auto& sj : j.at("source_datasets"))
    c.sources.push_back(detail::parse_dataset_spec(sj, "source_datasets[" + std::to_string(idx++) + "]"));
  if (!j.contains("target_dataset")) throw ConfigError("config: 'target_dataset' is required");
  c.target = detail::parse_dataset_spec(j.at("target_dataset"), "target_dataset");

  // Variant / pre-training compatibility: full and fix_nui adapt the shared
  // nuisance head, so pre-training must have produced one.
  if ((c.variant == FinetuneVariant::Full || c.variant == FinetuneVariant::FixNui) &&
      c.nui_mode != NuiMode::Shared)
    throw ConfigError("config: variant '" + to_string(c.variant) + "' requires nui_mode 'shared'");
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw IoError("config " + path.string() + ": " + e.what());
  }
  return parse_experiment_config(j);
}

// Fully-resolved config echo, written as <output_dir>/config.resolved.
inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["schema_version"] = c.schema_version;
  j["seed"] = c.seed.seed;
  j["output_dir"] = c.output_dir.string();
  j["arch"] = {{"hidden_dim", c.hidden_dim},
               {"embed_dim", c.embed_dim},
               {"bn_momentum", c.bn_momentum},
               {"bn_epsilon", c.bn_epsilon}};
  j["pk"] = {{"P", c.pk.P}, {"K", c.pk.K}};
  j["margin"] = c.margin.kind == MarginMode::Kind::Softplus
                    ? nlohmann::json{{"kind", "softplus"}}
                    : nlohmann::json{{"kind", "hinge"}, {"m", c.margin.margin}};
  j["schedule"] = {{"base_lr", c.schedule.base_lr},
                   {"final_lr", c.schedule.final_lr},
                   {"flat_epochs", c.schedule.flat_epochs},
                   {"decay_epochs", c.schedule.decay_epochs}};
  j["embed_steps"] = c.embed_steps;
  j["flip_probability"] = c.flip_prob;
  j["scheduler_policy"] = to_string(c.policy);
  j["nui_mode"] = to_string(c.nui_mode);
  j["variant"] = to_string(c.variant);
  j["pretrain"] = {{"steps", c.pretrain.steps}, {"lr", c.pretrain.lr}};
  j["finetune"] = {{"phase1_steps", c.finetune.phase1_steps},
                   {"phase2_steps", c.finetune.phase2_steps},
                   {"lr", c.finetune.lr},
                   {"batch_size", c.finetune.batch_size}};
  j["eval"] = {{"tta", c.eval.tta}, {"normalize", c.eval.normalize}};
  j["source_datasets"] = nlohmann::json::array();
  for (const auto& s : c.sources) j["source_datasets"].push_back(detail::dataset_spec_to_json(s));
  j["target_dataset"] = detail::dataset_spec_to_json(c.target);
  return j;
}

}  // namespace embae
