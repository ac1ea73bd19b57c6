#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "embae/errors.hpp"
#include "embae/loss.hpp"
#include "embae/rng.hpp"
#include "embae/tensor.hpp"

namespace embae {

// Dense head: dense(hidden) -> ReLU -> BatchNorm -> dense(output, linear).
// The same architecture serves the identity encoder and the nuisance
// encoder; the decoder reuses hidden_dim but has no batch norm.
struct HeadArchitecture {
  int input_dim = 0;
  int hidden_dim = 1024;
  int output_dim = 128;
  double bn_momentum = 0.1;   // weight of the fresh batch statistic
  double bn_epsilon = 1e-5;
};

inline void validate(const HeadArchitecture& a) {
  if (a.input_dim <= 0 || a.hidden_dim <= 0 || a.output_dim <= 0)
    throw ConfigError("head architecture: all dims must be positive");
  if (!(a.bn_momentum > 0) || !(a.bn_epsilon > 0))
    throw ConfigError("head architecture: bn_momentum and bn_epsilon must be positive");
}

enum class BnMode { Train, Eval };

template <typename T>
struct HeadParams {
  Matrix<T> w1, b1;                        // hidden x in, 1 x hidden
  Matrix<T> gamma, beta;                   // 1 x hidden
  Matrix<T> running_mean, running_var;     // 1 x hidden (BN statistics)
  Matrix<T> w2, b2;                        // out x hidden, 1 x out
};

template <typename T>
struct DecoderParams {
  Matrix<T> w1, b1;  // hidden x 2M
  Matrix<T> w2, b2;  // F x hidden
};

// ---------------------------------------------------------------------------
// Parameter registry.

enum class NuiMode { Shared, PerDataset, PerCamera };

inline std::string to_string(NuiMode m) {
  switch (m) {
    case NuiMode::Shared: return "shared";
    case NuiMode::PerDataset: return "per_dataset";
    case NuiMode::PerCamera: return "per_camera";
  }
  return "shared";
}

inline NuiMode nui_mode_from_string(const std::string& s) {
  if (s == "shared") return NuiMode::Shared;
  if (s == "per_dataset") return NuiMode::PerDataset;
  if (s == "per_camera") return NuiMode::PerCamera;
  throw ConfigError("unknown nui mode '" + s + "' (expected shared|per_dataset|per_camera)");
}

// Registry key of the nuisance group that serves a record. Camera ids
// collide across datasets, so per-camera groups are keyed by both.
inline std::string nui_key(NuiMode mode, const std::string& dataset, int camera) {
  switch (mode) {
    case NuiMode::Shared: return "nui";
    case NuiMode::PerDataset: return "nui/" + dataset;
    case NuiMode::PerCamera: return "nui/" + dataset + "/" + std::to_string(camera);
  }
  return "nui";
}

inline constexpr const char* kGroupEmb = "emb";
inline constexpr const char* kGroupDec = "dec";

// All trainable tensors partitioned into named groups ("emb", "dec", and one
// or more "nui*" groups), each group with a frozen flag. Frozen tensors are
// bit-identical before and after any optimizer step.
template <typename T>
struct ParamSet {
  HeadArchitecture arch;
  NuiMode nui_mode = NuiMode::Shared;
  HeadParams<T> emb;
  std::map<std::string, HeadParams<T>> nui;
  DecoderParams<T> dec;
  std::set<std::string> frozen;

  bool has_group(const std::string& g) const {
    return g == kGroupEmb || g == kGroupDec || nui.count(g) > 0;
  }
  bool is_frozen(const std::string& g) const { return frozen.count(g) > 0; }
  void freeze(const std::string& g) {
    if (!has_group(g)) throw ContractError("freeze: unknown group '" + g + "'");
    frozen.insert(g);
  }
  void unfreeze(const std::string& g) { frozen.erase(g); }

  std::vector<std::string> group_names() const {
    std::vector<std::string> names{kGroupEmb};
    for (const auto& [k, v] : nui) names.push_back(k);
    names.push_back(kGroupDec);
    return names;
  }

  // Freezes exactly the complement of `trainable`.
  void set_trainable(const std::set<std::string>& trainable) {
    frozen.clear();
    for (const std::string& g : group_names())
      if (trainable.count(g) == 0) frozen.insert(g);
  }
};

enum class TensorKind { Param, BnStat };

template <typename T>
struct TensorEntry {
  std::string group;
  std::string name;
  TensorKind kind = TensorKind::Param;
  Matrix<T>* tensor = nullptr;
};

namespace detail {

template <typename T>
void append_head_entries(std::vector<TensorEntry<T>>& out, const std::string& group, HeadParams<T>& h) {
  out.push_back({group, "w1", TensorKind::Param, &h.w1});
  out.push_back({group, "b1", TensorKind::Param, &h.b1});
  out.push_back({group, "bn_gamma", TensorKind::Param, &h.gamma});
  out.push_back({group, "bn_beta", TensorKind::Param, &h.beta});
  out.push_back({group, "bn_running_mean", TensorKind::BnStat, &h.running_mean});
  out.push_back({group, "bn_running_var", TensorKind::BnStat, &h.running_var});
  out.push_back({group, "w2", TensorKind::Param, &h.w2});
  out.push_back({group, "b2", TensorKind::Param, &h.b2});
}

}  // namespace detail

// Deterministic manifest order: emb head, nui groups sorted by key, decoder.
template <typename T>
std::vector<TensorEntry<T>> tensor_entries(ParamSet<T>& p) {
  std::vector<TensorEntry<T>> out;
  detail::append_head_entries(out, kGroupEmb, p.emb);
  for (auto& [key, head] : p.nui) detail::append_head_entries(out, key, head);
  out.push_back({kGroupDec, "w1", TensorKind::Param, &p.dec.w1});
  out.push_back({kGroupDec, "b1", TensorKind::Param, &p.dec.b1});
  out.push_back({kGroupDec, "w2", TensorKind::Param, &p.dec.w2});
  out.push_back({kGroupDec, "b2", TensorKind::Param, &p.dec.b2});
  return out;
}

// Number of trainable scalars (BN statistics excluded).
template <typename T>
std::size_t parameter_count(const ParamSet<T>& p) {
  std::size_t n = 0;
  for (const auto& e : tensor_entries(const_cast<ParamSet<T>&>(p)))
    if (e.kind == TensorKind::Param) n += e.tensor->size();
  return n;
}

// ---------------------------------------------------------------------------
// Initialization: scaled uniform fan-in for weights, zero biases, BN gamma 1
// beta 0, stats (0, 1). In per-camera / per-dataset mode every nuisance group
// starts from the same sub-seed, so later divergence is attributable to data.

namespace detail {

template <typename T>
Matrix<T> uniform_fan_in(int rows, int cols, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix<T> m(rows, cols);
  for (auto& v : m.data) v = static_cast<T>(dist(rng));
  return m;
}

template <typename T>
HeadParams<T> init_head(int in, int hidden, int out, RngSeed seed) {
  std::mt19937_64 rng = make_rng(seed);
  HeadParams<T> h;
  h.w1 = uniform_fan_in<T>(hidden, in, rng);
  h.b1 = Matrix<T>(1, hidden);
  h.gamma = Matrix<T>(1, hidden, T(1));
  h.beta = Matrix<T>(1, hidden);
  h.running_mean = Matrix<T>(1, hidden);
  h.running_var = Matrix<T>(1, hidden, T(1));
  h.w2 = uniform_fan_in<T>(out, hidden, rng);
  h.b2 = Matrix<T>(1, out);
  return h;
}

template <typename T>
DecoderParams<T> init_decoder(int latent, int hidden, int out, RngSeed seed) {
  std::mt19937_64 rng = make_rng(seed);
  DecoderParams<T> d;
  d.w1 = uniform_fan_in<T>(hidden, latent, rng);
  d.b1 = Matrix<T>(1, hidden);
  d.w2 = uniform_fan_in<T>(out, hidden, rng);
  d.b2 = Matrix<T>(1, out);
  return d;
}

}  // namespace detail

// Builds the full parameter set. `nui_groups` lists the registry keys for the
// nuisance heads (ignored in shared mode). All nuisance groups receive an
// identical initialization.
template <typename T>
ParamSet<T> init_params(const HeadArchitecture& arch, NuiMode mode,
                        const std::vector<std::string>& nui_groups, RngSeed seed) {
  validate(arch);
  if (mode != NuiMode::Shared && nui_groups.empty())
    throw ConfigError("init_params: per-camera / per-dataset mode needs a non-empty group list");
  ParamSet<T> p;
  p.arch = arch;
  p.nui_mode = mode;
  p.emb = detail::init_head<T>(arch.input_dim, arch.hidden_dim, arch.output_dim,
                               derive_seed(seed, "init/emb"));
  const RngSeed nui_seed = derive_seed(seed, "init/nui");
  if (mode == NuiMode::Shared) {
    p.nui["nui"] = detail::init_head<T>(arch.input_dim, arch.hidden_dim, arch.output_dim, nui_seed);
  } else {
    for (const std::string& key : nui_groups)
      p.nui[key] = detail::init_head<T>(arch.input_dim, arch.hidden_dim, arch.output_dim, nui_seed);
  }
  p.dec = detail::init_decoder<T>(2 * arch.output_dim, arch.hidden_dim, arch.input_dim,
                                  derive_seed(seed, "init/dec"));
  return p;
}

// ---------------------------------------------------------------------------
// Forward/backward kernels. Activations are double matrices; parameters stay
// in T. Each output element is a fixed-order reduction, so eval-mode forward
// passes are bit-identical however the batch is split.

struct HeadCache {
  MatrixD x;       // B x F
  MatrixD pre1;    // B x H, dense1 output
  MatrixD act1;    // B x H, after ReLU (BN input)
  MatrixD xhat;    // B x H, normalized
  MatrixD bn_out;  // B x H, gamma*xhat + beta (dense2 input)
  std::vector<double> mean, invstd;  // batch stats (train mode)
  bool train_bn = false;
};

struct DecoderCache {
  MatrixD zcat;  // B x 2M
  MatrixD pre1;  // B x H
  MatrixD act1;  // B x H
};

namespace detail {

// y = x * W^T + b with W stored out x in.
template <typename T>
MatrixD dense_forward(const MatrixD& x, const Matrix<T>& w, const Matrix<T>& b) {
  MatrixD y(x.rows, w.rows);
  for (int r = 0; r < x.rows; ++r) {
    const double* xr = x.row_ptr(r);
    for (int o = 0; o < w.rows; ++o) {
      const T* wr = w.row_ptr(o);
      double acc = static_cast<double>(b(0, o));
      for (int i = 0; i < w.cols; ++i) acc += static_cast<double>(wr[i]) * xr[i];
      y(r, o) = acc;
    }
  }
  return y;
}

// Accumulates dW, db and optionally dx for y = x * W^T + b.
template <typename T>
void dense_backward(const MatrixD& x, const Matrix<T>& w, const MatrixD& dy, MatrixD& dw, MatrixD& db,
                    MatrixD* dx) {
  dw = MatrixD(w.rows, w.cols);
  db = MatrixD(1, w.rows);
  for (int r = 0; r < x.rows; ++r) {
    const double* xr = x.row_ptr(r);
    const double* dyr = dy.row_ptr(r);
    for (int o = 0; o < w.rows; ++o) {
      const double g = dyr[o];
      if (g == 0.0) continue;
      db(0, o) += g;
      double* dwr = dw.row_ptr(o);
      for (int i = 0; i < w.cols; ++i) dwr[i] += g * xr[i];
    }
  }
  if (dx) {
    *dx = MatrixD(x.rows, x.cols);
    for (int r = 0; r < x.rows; ++r) {
      const double* dyr = dy.row_ptr(r);
      double* dxr = dx->row_ptr(r);
      for (int o = 0; o < w.rows; ++o) {
        const double g = dyr[o];
        if (g == 0.0) continue;
        const T* wr = w.row_ptr(o);
        for (int i = 0; i < w.cols; ++i) dxr[i] += g * static_cast<double>(wr[i]);
      }
    }
  }
}

inline void relu_inplace(MatrixD& m) {
  for (double& v : m.data) v = v > 0.0 ? v : 0.0;
}

}  // namespace detail

// Forward through one head. In train mode BN uses (biased) batch statistics;
// running stats are updated only when `update_stats` is set. In eval mode the
// output is a pointwise function of each input row.
template <typename T>
MatrixD head_forward(const HeadParams<T>& h, const HeadArchitecture& arch, const MatrixD& x, BnMode mode,
                     bool update_stats, HeadParams<T>* mutable_head = nullptr, HeadCache* cache = nullptr) {
  if (x.cols != arch.input_dim)
    throw ContractError("head_forward: input dim " + std::to_string(x.cols) + ", expected " +
                        std::to_string(arch.input_dim));
  const int bsz = x.rows;
  const int hd = arch.hidden_dim;

  MatrixD pre1 = detail::dense_forward(x, h.w1, h.b1);
  MatrixD act1 = pre1;
  detail::relu_inplace(act1);

  MatrixD xhat(bsz, hd);
  std::vector<double> mean(hd, 0.0), invstd(hd, 0.0);
  if (mode == BnMode::Train) {
    for (int j = 0; j < hd; ++j) {
      double m = 0.0;
      for (int r = 0; r < bsz; ++r) m += act1(r, j);
      m /= bsz;
      double var = 0.0;
      for (int r = 0; r < bsz; ++r) {
        const double d = act1(r, j) - m;
        var += d * d;
      }
      var /= bsz;
      mean[j] = m;
      invstd[j] = 1.0 / std::sqrt(var + arch.bn_epsilon);
      for (int r = 0; r < bsz; ++r) xhat(r, j) = (act1(r, j) - m) * invstd[j];
      if (update_stats) {
        if (!mutable_head) throw ContractError("head_forward: stats update requested on a const head");
        const double mom = arch.bn_momentum;
        const double var_run = bsz > 1 ? var * bsz / (bsz - 1) : var;  // unbiased when possible
        mutable_head->running_mean(0, j) =
            static_cast<T>((1.0 - mom) * static_cast<double>(h.running_mean(0, j)) + mom * m);
        mutable_head->running_var(0, j) =
            static_cast<T>((1.0 - mom) * static_cast<double>(h.running_var(0, j)) + mom * var_run);
      }
    }
  } else {
    for (int j = 0; j < hd; ++j) {
      const double m = static_cast<double>(h.running_mean(0, j));
      const double inv = 1.0 / std::sqrt(static_cast<double>(h.running_var(0, j)) + arch.bn_epsilon);
      for (int r = 0; r < bsz; ++r) xhat(r, j) = (act1(r, j) - m) * inv;
    }
  }

  MatrixD bn_out(bsz, hd);
  for (int j = 0; j < hd; ++j) {
    const double g = static_cast<double>(h.gamma(0, j));
    const double b = static_cast<double>(h.beta(0, j));
    for (int r = 0; r < bsz; ++r) bn_out(r, j) = g * xhat(r, j) + b;
  }

  MatrixD z = detail::dense_forward(bn_out, h.w2, h.b2);

  if (cache) {
    cache->x = x;
    cache->pre1 = std::move(pre1);
    cache->act1 = std::move(act1);
    cache->xhat = std::move(xhat);
    cache->bn_out = std::move(bn_out);
    cache->mean = std::move(mean);
    cache->invstd = std::move(invstd);
    cache->train_bn = (mode == BnMode::Train);
  }
  return z;
}

// Gradients of one head's parameters given d(loss)/d(output). Only valid for
// caches produced with train-mode BN (the batch statistics terms are part of
// the gradient).
template <typename T>
std::map<std::string, MatrixD> head_backward(const HeadParams<T>& h, const HeadCache& cache,
                                             const MatrixD& dz) {
  if (!cache.train_bn)
    throw ContractError("head_backward: gradients require a train-mode forward pass");
  const int bsz = cache.x.rows;
  const int hd = cache.act1.cols;

  std::map<std::string, MatrixD> g;
  MatrixD d_bn_out;
  detail::dense_backward(cache.bn_out, h.w2, dz, g["w2"], g["b2"], &d_bn_out);

  // BN backward with batch statistics.
  MatrixD d_act1(bsz, hd);
  MatrixD dgamma(1, hd), dbeta(1, hd);
  for (int j = 0; j < hd; ++j) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    const double gam = static_cast<double>(h.gamma(0, j));
    for (int r = 0; r < bsz; ++r) {
      const double dy = d_bn_out(r, j);
      sum_dy += dy;
      sum_dy_xhat += dy * cache.xhat(r, j);
    }
    dgamma(0, j) = sum_dy_xhat;
    dbeta(0, j) = sum_dy;
    const double inv_b = cache.invstd[j] / bsz;
    for (int r = 0; r < bsz; ++r) {
      const double dxhat_r = d_bn_out(r, j) * gam;
      d_act1(r, j) = inv_b * (bsz * dxhat_r - gam * sum_dy - cache.xhat(r, j) * gam * sum_dy_xhat);
    }
  }
  g["bn_gamma"] = std::move(dgamma);
  g["bn_beta"] = std::move(dbeta);

  // ReLU mask, then dense1.
  for (int r = 0; r < bsz; ++r)
    for (int j = 0; j < hd; ++j)
      if (cache.pre1(r, j) <= 0.0) d_act1(r, j) = 0.0;
  detail::dense_backward(cache.x, h.w1, d_act1, g["w1"], g["b1"], nullptr);
  return g;
}

// ---------------------------------------------------------------------------
// ParamSet-level encoders and decoder.

// Identity embedding z_id = f_emb(x). When the emb group is frozen, train
// mode never updates its running statistics.
template <typename T>
MatrixD encode_id(ParamSet<T>& p, const MatrixD& x, BnMode mode, HeadCache* cache = nullptr) {
  const bool update = mode == BnMode::Train && !p.is_frozen(kGroupEmb);
  return head_forward(p.emb, p.arch, x, mode, update, &p.emb, cache);
}

template <typename T>
MatrixD encode_id(const ParamSet<T>& p, const MatrixD& x, BnMode mode) {
  return head_forward(p.emb, p.arch, x, mode, false, static_cast<HeadParams<T>*>(nullptr), nullptr);
}

// Nuisance encoding for a batch whose rows may belong to different registry
// groups. `row_keys[r]` selects the head for row r (use nui_key()). Rows of
// one group form a sub-batch: train-mode BN statistics are computed per
// group. Per-group caches and row lists are exposed for the backward pass.
template <typename T>
MatrixD encode_nui_rows(ParamSet<T>& p, const MatrixD& x, const std::vector<std::string>& row_keys,
                        BnMode mode, std::map<std::string, HeadCache>* caches = nullptr,
                        std::map<std::string, std::vector<int>>* group_rows_out = nullptr) {
  if (static_cast<int>(row_keys.size()) != x.rows)
    throw ContractError("encode_nui_rows: row_keys size mismatch");
  std::map<std::string, std::vector<int>> groups;
  for (int r = 0; r < x.rows; ++r) groups[row_keys[r]].push_back(r);

  MatrixD z(x.rows, p.arch.output_dim);
  for (const auto& [key, rows] : groups) {
    auto it = p.nui.find(key);
    if (it == p.nui.end())
      throw ContractError("encode_nui: unknown nuisance group '" + key + "'");
    MatrixD sub(static_cast<int>(rows.size()), x.cols);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (int c = 0; c < x.cols; ++c) sub(static_cast<int>(i), c) = x(rows[i], c);
    const bool update = mode == BnMode::Train && !p.is_frozen(key);
    HeadCache* cache = nullptr;
    if (caches) cache = &(*caches)[key];
    MatrixD zs = head_forward(it->second, p.arch, sub, mode, update, &it->second, cache);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (int c = 0; c < z.cols; ++c) z(rows[i], c) = zs(static_cast<int>(i), c);
  }
  if (group_rows_out) *group_rows_out = std::move(groups);
  return z;
}

// Uniform-batch nuisance encoding. In shared mode the camera argument is
// ignored; in per-dataset / per-camera mode the (dataset, camera) pair must
// name a registered group.
template <typename T>
MatrixD encode_nui(ParamSet<T>& p, const MatrixD& x, const std::string& dataset, int camera, BnMode mode,
                   HeadCache* cache = nullptr) {
  const std::string key = nui_key(p.nui_mode, dataset, camera);
  auto it = p.nui.find(key);
  if (it == p.nui.end()) throw ContractError("encode_nui: unknown nuisance group '" + key + "'");
  const bool update = mode == BnMode::Train && !p.is_frozen(key);
  return head_forward(it->second, p.arch, x, mode, update, &it->second, cache);
}

// Reconstruction decode: dense(hidden) -> ReLU -> dense(F) over the
// concatenated latent code [z_id, z_nui].
template <typename T>
MatrixD decode(const ParamSet<T>& p, const MatrixD& z_id, const MatrixD& z_nui,
               DecoderCache* cache = nullptr) {
  if (z_id.rows != z_nui.rows)
    throw ContractError("decode: z_id batch (" + std::to_string(z_id.rows) + ") and z_nui batch (" +
                        std::to_string(z_nui.rows) + ") are misaligned");
  if (z_id.cols != p.arch.output_dim || z_nui.cols != p.arch.output_dim)
    throw ContractError("decode: latent dim mismatch");
  MatrixD zcat(z_id.rows, 2 * p.arch.output_dim);
  for (int r = 0; r < z_id.rows; ++r) {
    for (int c = 0; c < z_id.cols; ++c) zcat(r, c) = z_id(r, c);
    for (int c = 0; c < z_nui.cols; ++c) zcat(r, z_id.cols + c) = z_nui(r, c);
  }
  MatrixD pre1 = detail::dense_forward(zcat, p.dec.w1, p.dec.b1);
  MatrixD act1 = pre1;
  detail::relu_inplace(act1);
  MatrixD out = detail::dense_forward(act1, p.dec.w2, p.dec.b2);
  if (cache) {
    cache->zcat = std::move(zcat);
    cache->pre1 = std::move(pre1);
    cache->act1 = std::move(act1);
  }
  return out;
}

// Decoder gradients plus d(loss)/d(z_id) and d(loss)/d(z_nui).
template <typename T>
std::map<std::string, MatrixD> decoder_backward(const ParamSet<T>& p, const DecoderCache& cache,
                                                const MatrixD& dout, MatrixD& dz_id, MatrixD& dz_nui) {
  std::map<std::string, MatrixD> g;
  MatrixD d_act1;
  detail::dense_backward(cache.act1, p.dec.w2, dout, g["w2"], g["b2"], &d_act1);
  for (int r = 0; r < d_act1.rows; ++r)
    for (int c = 0; c < d_act1.cols; ++c)
      if (cache.pre1(r, c) <= 0.0) d_act1(r, c) = 0.0;
  MatrixD d_zcat;
  detail::dense_backward(cache.zcat, p.dec.w1, d_act1, g["w1"], g["b1"], &d_zcat);
  const int m = p.arch.output_dim;
  dz_id = MatrixD(d_zcat.rows, m);
  dz_nui = MatrixD(d_zcat.rows, m);
  for (int r = 0; r < d_zcat.rows; ++r) {
    for (int c = 0; c < m; ++c) dz_id(r, c) = d_zcat(r, c);
    for (int c = 0; c < m; ++c) dz_nui(r, c) = d_zcat(r, m + c);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Loss gradients. These two entry points realize the differentiation
// contract: exact reverse-mode gradients of the scalar loss w.r.t. every
// non-frozen tensor, with train-mode BN statistics handled in the chain.
// Frozen groups receive no entry.

// group -> tensor name -> gradient
using GradMap = std::map<std::string, std::map<std::string, MatrixD>>;

template <typename T>
struct LossAndGrads {
  double loss = 0.0;
  GradMap grads;
};

// Triplet loss through the identity encoder (train-mode BN). `update_stats`
// folds the BN statistics update of the same forward pass into the call; the
// loss value and gradients do not depend on it.
template <typename T>
LossAndGrads<T> triplet_loss_gradients(ParamSet<T>& p, const MatrixD& x, const std::vector<int>& labels,
                                       const MarginMode& margin, bool update_stats = false) {
  HeadCache cache;
  const bool frozen = p.is_frozen(kGroupEmb);
  MatrixD z = head_forward(p.emb, p.arch, x, BnMode::Train, update_stats && !frozen, &p.emb, &cache);
  BatchHardResult bh = batch_hard_triplet_loss_with_grad(z, labels, margin);
  LossAndGrads<T> out;
  out.loss = bh.loss;
  if (!frozen) out.grads[kGroupEmb] = head_backward(p.emb, cache, bh.grad);
  return out;
}

// Reconstruction loss through encode_id + encode_nui + decode. Frozen
// encoders run in eval-mode BN (their statistics are part of the frozen
// state); trainable encoders run train-mode BN. Gradients flow to every
// non-frozen group touched by the batch.
template <typename T>
LossAndGrads<T> reconstruction_gradients(ParamSet<T>& p, const MatrixD& x,
                                         const std::vector<std::string>& row_keys,
                                         bool update_stats = false) {
  LossAndGrads<T> out;

  const bool emb_frozen = p.is_frozen(kGroupEmb);
  HeadCache emb_cache;
  MatrixD z_id = head_forward(p.emb, p.arch, x, emb_frozen ? BnMode::Eval : BnMode::Train,
                              update_stats && !emb_frozen, &p.emb, emb_frozen ? nullptr : &emb_cache);

  // Per-group nuisance forward; frozen groups are encoded in eval mode.
  std::map<std::string, std::vector<int>> groups;
  for (int r = 0; r < x.rows; ++r) groups[row_keys[r]].push_back(r);
  MatrixD z_nui(x.rows, p.arch.output_dim);
  std::map<std::string, HeadCache> nui_caches;
  for (const auto& [key, rows] : groups) {
    auto it = p.nui.find(key);
    if (it == p.nui.end())
      throw ContractError("reconstruction_gradients: unknown nuisance group '" + key + "'");
    MatrixD sub(static_cast<int>(rows.size()), x.cols);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (int c = 0; c < x.cols; ++c) sub(static_cast<int>(i), c) = x(rows[i], c);
    const bool frozen = p.is_frozen(key);
    HeadCache* cache = frozen ? nullptr : &nui_caches[key];
    MatrixD zs = head_forward(it->second, p.arch, sub, frozen ? BnMode::Eval : BnMode::Train,
                              update_stats && !frozen, &it->second, cache);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (int c = 0; c < z_nui.cols; ++c) z_nui(rows[i], c) = zs(static_cast<int>(i), c);
  }

  DecoderCache dec_cache;
  MatrixD recon = decode(p, z_id, z_nui, &dec_cache);
  out.loss = reconstruction_loss(recon, x);
  MatrixD drecon = reconstruction_loss_grad(recon, x);

  MatrixD dz_id, dz_nui;
  auto dec_grads = decoder_backward(p, dec_cache, drecon, dz_id, dz_nui);
  if (!p.is_frozen(kGroupDec)) out.grads[kGroupDec] = std::move(dec_grads);

  if (!emb_frozen) out.grads[kGroupEmb] = head_backward(p.emb, emb_cache, dz_id);

  for (const auto& [key, rows] : groups) {
    if (p.is_frozen(key)) continue;
    MatrixD dz_sub(static_cast<int>(rows.size()), dz_nui.cols);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (int c = 0; c < dz_nui.cols; ++c) dz_sub(static_cast<int>(i), c) = dz_nui(rows[i], c);
    out.grads[key] = head_backward(p.nui.at(key), nui_caches.at(key), dz_sub);
  }
  return out;
}

// Pure loss evaluations (no mutation anywhere): used by finite-difference
// checks and tests.
template <typename T>
double triplet_loss_value(const ParamSet<T>& p, const MatrixD& x, const std::vector<int>& labels,
                          const MarginMode& margin) {
  MatrixD z = head_forward(p.emb, p.arch, x, BnMode::Train, false, static_cast<HeadParams<T>*>(nullptr),
                           nullptr);
  return batch_hard_triplet_loss(z, labels, margin);
}

template <typename T>
double reconstruction_loss_value(const ParamSet<T>& p, const MatrixD& x,
                                 const std::vector<std::string>& row_keys) {
  auto& mut = const_cast<ParamSet<T>&>(p);
  const bool emb_frozen = p.is_frozen(kGroupEmb);
  MatrixD z_id = head_forward(p.emb, p.arch, x, emb_frozen ? BnMode::Eval : BnMode::Train, false,
                              static_cast<HeadParams<T>*>(nullptr), nullptr);
  std::map<std::string, std::vector<int>> groups;
  for (int r = 0; r < x.rows; ++r) groups[row_keys[r]].push_back(r);
  MatrixD z_nui(x.rows, p.arch.output_dim);
  for (const auto& [key, rows] : groups) {
    auto it = mut.nui.find(key);
    if (it == mut.nui.end())
      throw ContractError("reconstruction_loss_value: unknown nuisance group '" + key + "'");
    MatrixD sub(static_cast<int>(rows.size()), x.cols);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (int c = 0; c < x.cols; ++c) sub(static_cast<int>(i), c) = x(rows[i], c);
    const bool frozen = p.is_frozen(key);
    MatrixD zs = head_forward(it->second, p.arch, sub, frozen ? BnMode::Eval : BnMode::Train, false,
                              static_cast<HeadParams<T>*>(nullptr), nullptr);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (int c = 0; c < z_nui.cols; ++c) z_nui(rows[i], c) = zs(static_cast<int>(i), c);
  }
  return reconstruction_loss(decode(p, z_id, z_nui, nullptr), x);
}

}  // namespace embae
