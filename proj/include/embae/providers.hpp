#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "embae/core.hpp"
#include "embae/errors.hpp"
#include "embae/rng.hpp"

namespace embae {

static_assert(std::endian::native == std::endian::little,
              "feature files are little-endian; big-endian hosts are unsupported");

// Configuration of the synthetic cross-camera world. Identities live in a
// low-dimensional subspace embedded into feature space; each camera applies
// its own affine distortion v -> v + s*(M_c*v + b_c) with s =
// camera_shift_scale (bias-dominant: M_c entries are drawn at 0.15/sqrt(F)
// so most of the shift is a per-camera offset), and per-record nuisance
// noise is added on top. The nuisance noise has a structured covariance:
// sigma * (G*w + 0.15*eta) with w a per-record vector of dimension
// 2*id_subspace_dim behind a fixed map G, plus an isotropic floor eta. The
// low-rank part gives the nuisance encoder identity-independent content to
// explain. Datasets generated with the same world_seed share the
// identity->feature map E and the nuisance map G (so an embedding learned
// on one transfers to another), while identities, cameras and noise are
// drawn from `seed`.
struct SyntheticWorldConfig {
  int n_identities = 0;
  int n_cameras = 0;
  int feature_dim = 0;
  int id_subspace_dim = 0;
  double camera_shift_scale = 1.0;
  double nuisance_noise_scale = 0.1;
  int images_per_identity_per_camera = 1;
  RngSeed seed;
  std::optional<RngSeed> world_seed;  // defaults to a stream derived from seed
};

inline void validate(const SyntheticWorldConfig& c) {
  if (c.n_identities <= 0) throw ConfigError("synthetic config: n_identities must be positive");
  if (c.n_cameras <= 0) throw ConfigError("synthetic config: n_cameras must be positive");
  if (c.feature_dim <= 0) throw ConfigError("synthetic config: feature_dim must be positive");
  if (c.id_subspace_dim <= 0) throw ConfigError("synthetic config: id_subspace_dim must be positive");
  if (c.id_subspace_dim > c.feature_dim)
    throw ConfigError("synthetic config: id_subspace_dim exceeds feature_dim");
  if (!(c.camera_shift_scale >= 0)) throw ConfigError("synthetic config: camera_shift_scale must be >= 0");
  if (!(c.nuisance_noise_scale >= 0))
    throw ConfigError("synthetic config: nuisance_noise_scale must be >= 0");
  if (c.images_per_identity_per_camera <= 0)
    throw ConfigError("synthetic config: images_per_identity_per_camera must be positive");
}

namespace detail {
inline constexpr double kCameraMixWeight = 0.15;   // M_c scale relative to 1/sqrt(F)
inline constexpr double kIsoNoiseWeight = 0.15;    // isotropic floor inside the nuisance noise
inline constexpr double kFlipNoiseWeight = 0.1;    // flip perturbation relative to nuisance scale
}  // namespace detail

// Deterministic synthetic dataset. Records are emitted in (identity, camera,
// image) order; the whole dataset is a pure function of the config.
inline Dataset synth_generate(const SyntheticWorldConfig& cfg, const std::string& name = "synth") {
  validate(cfg);
  const int f = cfg.feature_dim;
  const int idd = cfg.id_subspace_dim;
  const int wd = 2 * idd;  // structured-nuisance dimension

  const RngSeed world = cfg.world_seed ? *cfg.world_seed : derive_seed(cfg.seed, "synth/world");
  std::mt19937_64 world_rng = make_rng(derive_seed(world, "synth/embed"));
  std::mt19937_64 id_rng = make_rng(derive_seed(cfg.seed, "synth/ids"));
  std::mt19937_64 cam_rng = make_rng(derive_seed(cfg.seed, "synth/cameras"));
  std::mt19937_64 noise_rng = make_rng(derive_seed(cfg.seed, "synth/noise"));
  std::normal_distribution<double> gauss(0.0, 1.0);

  // World maps shared by every dataset generated with the same world_seed:
  // the identity embedding E (f x idd) and the nuisance map G (f x 2*idd).
  std::vector<double> embed(static_cast<std::size_t>(f) * idd);
  const double embed_scale = 1.0 / std::sqrt(static_cast<double>(idd));
  for (double& v : embed) v = gauss(world_rng) * embed_scale;
  std::vector<double> nui_map(static_cast<std::size_t>(f) * wd);
  const double nui_scale = 1.0 / std::sqrt(static_cast<double>(wd));
  for (double& v : nui_map) v = gauss(world_rng) * nui_scale;

  // Per-identity latent vectors.
  std::vector<std::vector<double>> latents(cfg.n_identities, std::vector<double>(idd));
  for (auto& u : latents)
    for (double& v : u) v = gauss(id_rng);

  // Per-camera distortions: a mild mixing matrix M_c plus a bias b_c.
  std::vector<std::vector<double>> cam_mix(cfg.n_cameras);
  std::vector<std::vector<double>> cam_bias(cfg.n_cameras);
  const double mix_scale = detail::kCameraMixWeight / std::sqrt(static_cast<double>(f));
  for (int c = 0; c < cfg.n_cameras; ++c) {
    cam_mix[c].resize(static_cast<std::size_t>(f) * f);
    for (double& v : cam_mix[c]) v = gauss(cam_rng) * mix_scale;
    cam_bias[c].resize(f);
    for (double& v : cam_bias[c]) v = gauss(cam_rng);
  }

  std::vector<ImageRecord> records;
  records.reserve(static_cast<std::size_t>(cfg.n_identities) * cfg.n_cameras *
                  cfg.images_per_identity_per_camera);
  std::vector<double> base(f), shifted(f), w(wd);
  char sid[128];
  for (int y = 0; y < cfg.n_identities; ++y) {
    // base = E * u_y
    for (int i = 0; i < f; ++i) {
      double s = 0.0;
      for (int j = 0; j < idd; ++j) s += embed[static_cast<std::size_t>(i) * idd + j] * latents[y][j];
      base[i] = s;
    }
    for (int c = 0; c < cfg.n_cameras; ++c) {
      for (int i = 0; i < f; ++i) {
        double m = 0.0;
        for (int j = 0; j < f; ++j) m += cam_mix[c][static_cast<std::size_t>(i) * f + j] * base[j];
        shifted[i] = base[i] + cfg.camera_shift_scale * (m + cam_bias[c][i]);
      }
      for (int k = 0; k < cfg.images_per_identity_per_camera; ++k) {
        ImageRecord rec;
        std::snprintf(sid, sizeof(sid), "%s_%04d_c%d_%03d", name.c_str(), y, c, k);
        rec.sample_id = sid;
        rec.identity = y;
        rec.camera = c;
        rec.dataset = name;
        rec.features.resize(f);
        for (double& v : w) v = gauss(noise_rng);
        for (int i = 0; i < f; ++i) {
          double nv = 0.0;
          for (int j = 0; j < wd; ++j) nv += nui_map[static_cast<std::size_t>(i) * wd + j] * w[j];
          rec.features[i] = static_cast<float>(
              shifted[i] +
              cfg.nuisance_noise_scale * (nv + detail::kIsoNoiseWeight * gauss(noise_rng)));
        }
        std::vector<float> flip(f);
        for (int i = 0; i < f; ++i)
          flip[i] = static_cast<float>(
              rec.features[i] + detail::kFlipNoiseWeight * cfg.nuisance_noise_scale * gauss(noise_rng));
        rec.flip_features = std::move(flip);
        records.push_back(std::move(rec));
      }
    }
  }
  return Dataset::from_records(name, std::move(records));
}

// ---------------------------------------------------------------------------
// Precomputed feature files.
//
// A dataset directory holds:
//   manifest.csv   sample_id,identity,camera,dataset,row_index,flip_row_index
//                  (flip_row_index is -1 when no flipped features exist)
//   features.bin   magic "EMBF1", u32 row count, u32 F, rows of F float32 LE
//
// The round trip is bit-exact: features are float32 in memory and on disk.

struct FeatureStore {
  int feature_dim = 0;
  std::map<std::string, std::pair<std::vector<float>, std::optional<std::vector<float>>>> by_sample;
};

namespace detail {

inline constexpr char kFeatureMagic[5] = {'E', 'M', 'B', 'F', '1'};

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline std::uint32_t read_u32(std::istream& is, const std::string& what) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(v)))
    throw IoError("features.bin: truncated header (" + what + ")");
  return v;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

inline int parse_int(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw IoError("manifest.csv: cannot parse " + what + " from '" + s + "'");
  }
}

}  // namespace detail

inline void save_precomputed(const Dataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const int f = d.feature_dim();

  // Base rows come first in record order; flip rows are appended after them.
  std::uint32_t n_rows = static_cast<std::uint32_t>(d.records.size());
  std::vector<std::int64_t> flip_row(d.records.size(), -1);
  for (std::size_t i = 0; i < d.records.size(); ++i)
    if (d.records[i].flip_features) flip_row[i] = n_rows++;

  std::ofstream bin(dir / "features.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw IoError("cannot open " + (dir / "features.bin").string() + " for writing");
  bin.write(detail::kFeatureMagic, sizeof(detail::kFeatureMagic));
  detail::write_u32(bin, n_rows);
  detail::write_u32(bin, static_cast<std::uint32_t>(f));
  for (const ImageRecord& r : d.records)
    bin.write(reinterpret_cast<const char*>(r.features.data()),
              static_cast<std::streamsize>(r.features.size() * sizeof(float)));
  for (const ImageRecord& r : d.records)
    if (r.flip_features)
      bin.write(reinterpret_cast<const char*>(r.flip_features->data()),
                static_cast<std::streamsize>(r.flip_features->size() * sizeof(float)));
  if (!bin) throw IoError("failed writing " + (dir / "features.bin").string());

  std::ofstream man(dir / "manifest.csv", std::ios::trunc);
  if (!man) throw IoError("cannot open " + (dir / "manifest.csv").string() + " for writing");
  man << "sample_id,identity,camera,dataset,row_index,flip_row_index\n";
  for (std::size_t i = 0; i < d.records.size(); ++i) {
    const ImageRecord& r = d.records[i];
    man << r.sample_id << ',' << r.identity << ',' << r.camera << ',' << r.dataset << ',' << i << ','
        << flip_row[i] << '\n';
  }
  if (!man) throw IoError("failed writing " + (dir / "manifest.csv").string());
}

inline std::pair<Dataset, FeatureStore> load_precomputed(const std::filesystem::path& dir) {
  const auto bin_path = dir / "features.bin";
  const auto man_path = dir / "manifest.csv";
  if (!std::filesystem::exists(man_path)) throw IoError("missing " + man_path.string());
  if (!std::filesystem::exists(bin_path)) throw IoError("missing " + bin_path.string());

  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw IoError("cannot open " + bin_path.string());
  char magic[5] = {};
  if (!bin.read(magic, sizeof(magic)) || std::memcmp(magic, detail::kFeatureMagic, 5) != 0)
    throw IoError(bin_path.string() + ": bad magic");
  const std::uint32_t n_rows = detail::read_u32(bin, "row count");
  const std::uint32_t f = detail::read_u32(bin, "feature dim");
  std::vector<float> rows(static_cast<std::size_t>(n_rows) * f);
  if (!rows.empty() &&
      !bin.read(reinterpret_cast<char*>(rows.data()),
                static_cast<std::streamsize>(rows.size() * sizeof(float)))) {
    const std::size_t got = static_cast<std::size_t>(bin.gcount()) / sizeof(float);
    throw IoError(bin_path.string() + ": feature data ends inside row " + std::to_string(got / f) +
                  " (row has fewer than " + std::to_string(f) + " values)");
  }

  auto row_vec = [&](std::uint32_t r) {
    return std::vector<float>(rows.begin() + static_cast<std::size_t>(r) * f,
                              rows.begin() + static_cast<std::size_t>(r + 1) * f);
  };

  std::ifstream man(man_path);
  if (!man) throw IoError("cannot open " + man_path.string());
  std::string line;
  std::vector<ImageRecord> records;
  FeatureStore store;
  store.feature_dim = static_cast<int>(f);
  std::string dataset_name;
  std::size_t line_no = 0;
  while (std::getline(man, line)) {
    ++line_no;
    if (line.empty() || (line_no == 1 && line.rfind("sample_id,", 0) == 0)) continue;
    const auto cols = detail::split_csv_line(line);
    if (cols.size() != 6)
      throw IoError("manifest.csv row " + std::to_string(line_no) + ": expected 6 columns, got " +
                    std::to_string(cols.size()));
    ImageRecord rec;
    rec.sample_id = cols[0];
    rec.identity = detail::parse_int(cols[1], "identity at row " + std::to_string(line_no));
    rec.camera = detail::parse_int(cols[2], "camera at row " + std::to_string(line_no));
    rec.dataset = cols[3];
    const int row_index = detail::parse_int(cols[4], "row_index at row " + std::to_string(line_no));
    const int flip_index = detail::parse_int(cols[5], "flip_row_index at row " + std::to_string(line_no));
    if (row_index < 0 || static_cast<std::uint32_t>(row_index) >= n_rows)
      throw IoError("manifest.csv row " + std::to_string(line_no) + ": row_index " +
                    std::to_string(row_index) + " out of range (file has " + std::to_string(n_rows) +
                    " rows)");
    if (flip_index != -1 && (flip_index < 0 || static_cast<std::uint32_t>(flip_index) >= n_rows))
      throw IoError("manifest.csv row " + std::to_string(line_no) + ": flip_row_index " +
                    std::to_string(flip_index) + " out of range");
    rec.features = row_vec(static_cast<std::uint32_t>(row_index));
    if (flip_index != -1) rec.flip_features = row_vec(static_cast<std::uint32_t>(flip_index));
    if (dataset_name.empty())
      dataset_name = rec.dataset;
    else if (rec.dataset != dataset_name)
      throw IoError("manifest.csv row " + std::to_string(line_no) + ": mixed dataset tags ('" +
                    dataset_name + "' vs '" + rec.dataset + "')");
    store.by_sample[rec.sample_id] = {rec.features, rec.flip_features};
    records.push_back(std::move(rec));
  }
  if (dataset_name.empty()) dataset_name = dir.filename().string();
  return {Dataset::from_records(dataset_name, std::move(records)), std::move(store)};
}

}  // namespace embae
