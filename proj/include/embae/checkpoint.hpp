#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "embae/errors.hpp"
#include "embae/model.hpp"
#include "embae/training.hpp"

namespace embae {

// Checkpoint directory layout:
//   params.json  group names, tensor shapes, frozen flags, nui mode, arch
//                dims, optimizer metadata
//   params.bin   magic "EMBP1", u64 element count, then every tensor in
//                manifest order as little-endian float32 (model tensors
//                first, then ADAM m/v moments per trainable tensor)
// The round trip is bit-exact for float parameters.

namespace detail {

inline constexpr char kParamsMagic[5] = {'E', 'M', 'B', 'P', '1'};

template <typename T>
void append_floats(std::vector<float>& out, const Matrix<T>& m) {
  for (const T& v : m.data) out.push_back(static_cast<float>(v));
}

}  // namespace detail

template <typename T>
void save_checkpoint(const ParamSet<T>& params, const AdamState<T>* opt,
                     const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto& mut = const_cast<ParamSet<T>&>(params);
  auto entries = tensor_entries(mut);

  nlohmann::json j;
  j["format"] = "EMBAE-CKPT";
  j["version"] = 1;
  j["arch"] = {{"input_dim", params.arch.input_dim},
               {"hidden_dim", params.arch.hidden_dim},
               {"output_dim", params.arch.output_dim},
               {"bn_momentum", params.arch.bn_momentum},
               {"bn_epsilon", params.arch.bn_epsilon}};
  j["nui_mode"] = to_string(params.nui_mode);
  j["nui_groups"] = nlohmann::json::array();
  for (const auto& [key, head] : params.nui) j["nui_groups"].push_back(key);
  j["frozen_groups"] = nlohmann::json::array();
  for (const auto& g : params.frozen) j["frozen_groups"].push_back(g);

  std::vector<float> payload;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& e : entries) {
    tensors.push_back({{"group", e.group},
                       {"name", e.name},
                       {"kind", e.kind == TensorKind::Param ? "param" : "bn_stat"},
                       {"rows", e.tensor->rows},
                       {"cols", e.tensor->cols}});
    detail::append_floats(payload, *e.tensor);
  }
  j["tensors"] = std::move(tensors);

  if (opt) {
    nlohmann::json moments = nlohmann::json::array();
    for (const auto& [key, m] : opt->m) {
      const auto vit = opt->v.find(key);
      if (vit == opt->v.end()) throw ContractError("save_checkpoint: moment pair missing for '" + key + "'");
      moments.push_back({{"key", key}, {"rows", m.rows}, {"cols", m.cols}});
      detail::append_floats(payload, m);
      detail::append_floats(payload, vit->second);
    }
    j["optimizer"] = {{"beta1", opt->beta1},
                      {"beta2", opt->beta2},
                      {"epsilon", opt->epsilon},
                      {"step", opt->step},
                      {"moments", std::move(moments)}};
  }

  std::ofstream jf(dir / "params.json", std::ios::trunc);
  if (!jf) throw IoError("cannot open " + (dir / "params.json").string() + " for writing");
  jf << j.dump(2) << '\n';
  if (!jf) throw IoError("failed writing " + (dir / "params.json").string());

  std::ofstream bf(dir / "params.bin", std::ios::binary | std::ios::trunc);
  if (!bf) throw IoError("cannot open " + (dir / "params.bin").string() + " for writing");
  bf.write(detail::kParamsMagic, sizeof(detail::kParamsMagic));
  const std::uint64_t count = payload.size();
  bf.write(reinterpret_cast<const char*>(&count), sizeof(count));
  bf.write(reinterpret_cast<const char*>(payload.data()),
           static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!bf) throw IoError("failed writing " + (dir / "params.bin").string());
}

template <typename T>
struct LoadedCheckpoint {
  ParamSet<T> params;
  std::optional<AdamState<T>> optimizer;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& dir) {
  const auto json_path = dir / "params.json";
  const auto bin_path = dir / "params.bin";
  if (!std::filesystem::exists(json_path)) throw IoError("missing " + json_path.string());
  if (!std::filesystem::exists(bin_path)) throw IoError("missing " + bin_path.string());

  nlohmann::json j;
  try {
    std::ifstream jf(json_path);
    jf >> j;
  } catch (const std::exception& e) {
    throw IoError(json_path.string() + ": " + e.what());
  }
  if (j.value("format", "") != std::string("EMBAE-CKPT"))
    throw IoError(json_path.string() + ": bad checkpoint format tag");
  if (j.value("version", 0) != 1) throw IoError(json_path.string() + ": unsupported version");

  std::ifstream bf(bin_path, std::ios::binary);
  if (!bf) throw IoError("cannot open " + bin_path.string());
  char magic[5] = {};
  if (!bf.read(magic, sizeof(magic)) || std::memcmp(magic, detail::kParamsMagic, 5) != 0)
    throw IoError(bin_path.string() + ": bad magic");
  std::uint64_t count = 0;
  if (!bf.read(reinterpret_cast<char*>(&count), sizeof(count)))
    throw IoError(bin_path.string() + ": truncated header");
  std::vector<float> payload(count);
  if (count > 0 &&
      !bf.read(reinterpret_cast<char*>(payload.data()),
               static_cast<std::streamsize>(count * sizeof(float))))
    throw IoError(bin_path.string() + ": truncated payload (expected " + std::to_string(count) +
                  " values)");
  char extra = 0;
  if (bf.read(&extra, 1)) throw IoError(bin_path.string() + ": trailing bytes after payload");

  LoadedCheckpoint<T> out;
  out.params.arch.input_dim = j.at("arch").at("input_dim").get<int>();
  out.params.arch.hidden_dim = j.at("arch").at("hidden_dim").get<int>();
  out.params.arch.output_dim = j.at("arch").at("output_dim").get<int>();
  out.params.arch.bn_momentum = j.at("arch").at("bn_momentum").get<double>();
  out.params.arch.bn_epsilon = j.at("arch").at("bn_epsilon").get<double>();
  out.params.nui_mode = nui_mode_from_string(j.at("nui_mode").get<std::string>());
  for (const auto& g : j.at("nui_groups")) out.params.nui[g.get<std::string>()] = HeadParams<T>{};

  std::size_t cursor = 0;
  auto take = [&](Matrix<T>& dst, int rows, int cols, const std::string& what) {
    const std::size_t n = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
    if (cursor + n > payload.size())
      throw IoError(bin_path.string() + ": payload too short for tensor '" + what + "'");
    dst = Matrix<T>(rows, cols);
    for (std::size_t i = 0; i < n; ++i) dst.data[i] = static_cast<T>(payload[cursor + i]);
    cursor += n;
  };

  auto entries = tensor_entries(out.params);
  const auto& tensors = j.at("tensors");
  if (tensors.size() != entries.size())
    throw IoError(json_path.string() + ": manifest lists " + std::to_string(tensors.size()) +
                  " tensors, expected " + std::to_string(entries.size()));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& t = tensors[i];
    const std::string group = t.at("group").get<std::string>();
    const std::string name = t.at("name").get<std::string>();
    if (group != entries[i].group || name != entries[i].name)
      throw IoError(json_path.string() + ": manifest order mismatch at '" + group + "/" + name + "'");
    take(*entries[i].tensor, t.at("rows").get<int>(), t.at("cols").get<int>(), group + "/" + name);
  }
  for (const auto& g : j.at("frozen_groups")) {
    const std::string name = g.get<std::string>();
    if (!out.params.has_group(name))
      throw IoError(json_path.string() + ": frozen flag for unknown group '" + name + "'");
    out.params.frozen.insert(name);
  }

  if (j.contains("optimizer")) {
    AdamState<T> opt;
    const auto& oj = j.at("optimizer");
    opt.beta1 = oj.at("beta1").get<double>();
    opt.beta2 = oj.at("beta2").get<double>();
    opt.epsilon = oj.at("epsilon").get<double>();
    opt.step = oj.at("step").get<long>();
    for (const auto& mj : oj.at("moments")) {
      const std::string key = mj.at("key").get<std::string>();
      Matrix<T> m, v;
      take(m, mj.at("rows").get<int>(), mj.at("cols").get<int>(), key + "/m");
      take(v, mj.at("rows").get<int>(), mj.at("cols").get<int>(), key + "/v");
      opt.m[key] = std::move(m);
      opt.v[key] = std::move(v);
    }
    out.optimizer = std::move(opt);
  }
  if (cursor != payload.size())
    throw IoError(bin_path.string() + ": payload has " + std::to_string(payload.size() - cursor) +
                  " unread values");
  return out;
}

}  // namespace embae
