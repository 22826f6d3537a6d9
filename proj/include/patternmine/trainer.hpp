#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "patternmine/error.hpp"
#include "patternmine/feature_store.hpp"
#include "patternmine/log.hpp"
#include "patternmine/miner.hpp"
#include "patternmine/parallel.hpp"

namespace patternmine {

/// Trainable per-location linear map y = normalize(W x + b) applied on top of
/// frozen base features.
struct AdapterParams {
  Eigen::MatrixXd W;
  Eigen::VectorXd b;

  static AdapterParams identity(int channels) {
    return {Eigen::MatrixXd::Identity(channels, channels), Eigen::VectorXd::Zero(channels)};
  }
  static AdapterParams zeros_like(const AdapterParams& p) {
    return {Eigen::MatrixXd::Zero(p.W.rows(), p.W.cols()), Eigen::VectorXd::Zero(p.b.size())};
  }

  int in_dim() const { return static_cast<int>(W.cols()); }
  int out_dim() const { return static_cast<int>(W.rows()); }

  bool is_identity() const {
    return W.rows() == W.cols() && W == Eigen::MatrixXd::Identity(W.rows(), W.cols()) && b.isZero(0.0);
  }
};

using AdapterGrad = AdapterParams;

struct LossConfig {
  double lambda = 0.8;
  int n_neg = 20;
};

/// Positive pair plus its negatives, as base (pre-adapter) features.
struct Triplet {
  Eigen::VectorXd p1;
  Eigen::VectorXd p2;
  std::vector<Eigen::VectorXd> negatives;
};

using TripletBatch = std::vector<Triplet>;

struct AdamConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  AdapterParams m;
  AdapterParams v;
  std::int64_t t = 0;

  static AdamState fresh(const AdapterParams& like, AdamConfig cfg = {}) {
    return {cfg, AdapterParams::zeros_like(like), AdapterParams::zeros_like(like), 0};
  }
};

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

inline Eigen::VectorXd to_vector(std::span<const float> x) {
  Eigen::VectorXd v(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) v[static_cast<Eigen::Index>(i)] = x[i];
  return v;
}

/// normalize(W x + b); a zero input or zero pre-activation maps to zero.
inline Eigen::VectorXd apply_adapter(const AdapterParams& params, const Eigen::VectorXd& x) {
  if (x.size() != params.W.cols())
    throw DimensionError("apply_adapter: input has " + std::to_string(x.size()) + " channels, adapter expects " +
                         std::to_string(params.W.cols()));
  if (x.isZero(0.0)) return Eigen::VectorXd::Zero(params.W.rows());
  Eigen::VectorXd u = params.W * x + params.b;
  const double n = u.norm();
  if (n == 0.0) return Eigen::VectorXd::Zero(u.size());
  return u / n;
}

inline FeaturePyramid adapt_pyramid(const AdapterParams& params, const FeaturePyramid& base) {
  if (params.is_identity()) return base;
  if (base.channels() != params.in_dim()) throw DimensionError("adapt_pyramid: channel mismatch");
  FeaturePyramid out{base.image_id, {}, base.cell_stride_px};
  for (const auto& m : base.maps) {
    FeatureMap a(m.scale_factor, m.height, m.width, params.out_dim());
    for (int r = 0; r < m.height; ++r)
      for (int c = 0; c < m.width; ++c) {
        const auto y = apply_adapter(params, to_vector(m.cell(r, c)));
        auto dst = a.cell(r, c);
        for (int k = 0; k < params.out_dim(); ++k) dst[k] = static_cast<float>(y[k]);
      }
    out.maps.push_back(std::move(a));
  }
  return out;
}

inline std::vector<FeaturePyramid> adapt_all(const AdapterParams& params, std::span<const FeaturePyramid> base,
                                             int jobs = 1) {
  std::vector<FeaturePyramid> out(base.size());
  parallel_for(base.size(), jobs, [&](std::size_t i) { out[i] = adapt_pyramid(params, base[i]); });
  return out;
}

/// L = -min(lambda, s(P1,P2)) + mean_i max(s(P1,N_i), 1 - lambda), on adapted unit vectors.
inline double triplet_loss(const Eigen::VectorXd& p1, const Eigen::VectorXd& p2,
                           std::span<const Eigen::VectorXd> negatives, const LossConfig& cfg) {
  if (negatives.empty()) throw PreconditionError("triplet_loss: no negatives");
  double neg = 0.0;
  for (const auto& n : negatives) neg += std::max(p1.dot(n), 1.0 - cfg.lambda);
  return -std::min(cfg.lambda, p1.dot(p2)) + neg / static_cast<double>(negatives.size());
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace detail {

struct AdaptedVector {
  Eigen::VectorXd y;
  double norm = 0.0;  // |W x + b|; zero marks a dead (zero) output
};

inline AdaptedVector forward(const AdapterParams& params, const Eigen::VectorXd& x) {
  if (x.isZero(0.0)) return {Eigen::VectorXd::Zero(params.W.rows()), 0.0};
  Eigen::VectorXd u = params.W * x + params.b;
  const double n = u.norm();
  if (n == 0.0) return {Eigen::VectorXd::Zero(u.size()), 0.0};
  return {u / n, n};
}

// Accumulates dL/dparams given dL/dy for one adapted vector.
inline void backward(const AdaptedVector& a, const Eigen::VectorXd& x, const Eigen::VectorXd& grad_y,
                     AdapterGrad& grad) {
  if (a.norm == 0.0) return;
  const Eigen::VectorXd grad_u = (grad_y - a.y * a.y.dot(grad_y)) / a.norm;
  grad.W.noalias() += grad_u * x.transpose();
  grad.b += grad_u;
}

} // namespace detail

struct LossAndGrad {
  double loss = 0.0;
  AdapterGrad grad;
};

/// Batch-mean loss and its exact gradient through the adapter and the
/// normalization. Clamped terms contribute nothing.
inline LossAndGrad triplet_loss_and_grad(const TripletBatch& batch, const AdapterParams& params, const LossConfig& cfg) {
  LossAndGrad out{0.0, AdapterParams::zeros_like(params)};
  if (batch.empty()) return out;
  for (const auto& t : batch) {
    if (t.negatives.empty()) throw PreconditionError("triplet_loss_grad: triplet without negatives");
    const auto a1 = detail::forward(params, t.p1);
    const auto a2 = detail::forward(params, t.p2);
    std::vector<detail::AdaptedVector> an;
    an.reserve(t.negatives.size());
    for (const auto& n : t.negatives) an.push_back(detail::forward(params, n));

    const double inv_n = 1.0 / static_cast<double>(t.negatives.size());
    Eigen::VectorXd g1 = Eigen::VectorXd::Zero(a1.y.size());
    const double s12 = a1.y.dot(a2.y);
    double loss = -std::min(cfg.lambda, s12);
    if (s12 < cfg.lambda) {
      g1 -= a2.y;
      detail::backward(a2, t.p2, -a1.y, out.grad);
    }
    for (std::size_t i = 0; i < an.size(); ++i) {
      const double s = a1.y.dot(an[i].y);
      loss += inv_n * std::max(s, 1.0 - cfg.lambda);
      if (s > 1.0 - cfg.lambda) {
        g1 += inv_n * an[i].y;
        detail::backward(an[i], t.negatives[i], inv_n * a1.y, out.grad);
      }
    }
    detail::backward(a1, t.p1, g1, out.grad);
    out.loss += loss;
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  out.loss *= inv_b;
  out.grad.W *= inv_b;
  out.grad.b *= inv_b;
  return out;
}

inline AdapterGrad triplet_loss_grad(const TripletBatch& batch, const AdapterParams& params, const LossConfig& cfg) {
  return triplet_loss_and_grad(batch, params, cfg).grad;
}

/// Batch-mean loss computed through apply_adapter (no gradient bookkeeping).
inline double batch_loss(const TripletBatch& batch, const AdapterParams& params, const LossConfig& cfg) {
  if (batch.empty()) return 0.0;
  double total = 0.0;
  for (const auto& t : batch) {
    std::vector<Eigen::VectorXd> negs;
    for (const auto& n : t.negatives) negs.push_back(apply_adapter(params, n));
    total += triplet_loss(apply_adapter(params, t.p1), apply_adapter(params, t.p2), negs, cfg);
  }
  return total / static_cast<double>(batch.size());
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Bias-corrected Adam update, in place.
inline void adam_step(AdamState& state, AdapterParams& params, const AdapterGrad& grad) {
  if (grad.W.rows() != params.W.rows() || grad.W.cols() != params.W.cols() || grad.b.size() != params.b.size())
    throw DimensionError("adam_step: gradient shape does not match parameters");
  const auto& c = state.config;
  state.t += 1;
  const double corr1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double corr2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  auto update = [&](auto& p, auto& m, auto& v, const auto& g) {
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseProduct(g);
    p.array() -= c.lr * (m.array() / corr1) / ((v.array() / corr2).sqrt() + c.epsilon);
  };
  update(params.W, state.m.W, state.v.W, grad.W);
  update(params.b, state.m.b, state.v.b, grad.b);
}

// ---------------------------------------------------------------------------
// Checkpoints: "AMCK" u32 version, u32 C_out, u32 C_in, i64 t, f64 lr beta1
// beta2 epsilon, then f64 arrays W (row-major), b, m.W, m.b, v.W, v.b.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'A', 'M', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_matrix(std::vector<char>& buf, const Eigen::MatrixXd& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) put<double>(buf, m(r, c));
}

inline void put_vector(std::vector<char>& buf, const Eigen::VectorXd& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) put<double>(buf, v[i]);
}

inline Eigen::MatrixXd get_matrix(ByteReader& in, int rows, int cols) {
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = in.get<double>();
  return m;
}

inline Eigen::VectorXd get_vector(ByteReader& in, int n) {
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = in.get<double>();
  return v;
}

} // namespace detail

inline void write_checkpoint(const std::filesystem::path& path, const AdapterParams& params, const AdamState& state) {
  std::vector<char> buf(kCheckpointMagic, kCheckpointMagic + 4);
  detail::put<std::uint32_t>(buf, kCheckpointVersion);
  detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(params.out_dim()));
  detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(params.in_dim()));
  detail::put<std::int64_t>(buf, state.t);
  for (double v : {state.config.lr, state.config.beta1, state.config.beta2, state.config.epsilon})
    detail::put<double>(buf, v);
  detail::put_matrix(buf, params.W);
  detail::put_vector(buf, params.b);
  detail::put_matrix(buf, state.m.W);
  detail::put_vector(buf, state.m.b);
  detail::put_matrix(buf, state.v.W);
  detail::put_vector(buf, state.v.b);
  detail::write_file_bytes(path, buf);
}

struct Checkpoint {
  AdapterParams params;
  AdamState state;
};

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  const auto bytes = detail::read_file_bytes(path);
  detail::ByteReader in(bytes, path.string());
  in.require(4);
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw FormatError(FormatErrorKind::BadMagic, path.string() + ": expected \"AMCK\"");
  in.get<std::uint32_t>();
  if (const auto v = in.get<std::uint32_t>(); v != kCheckpointVersion)
    throw FormatError(FormatErrorKind::VersionMismatch, path.string() + ": version " + std::to_string(v));
  const int out_dim = static_cast<int>(in.get<std::uint32_t>());
  const int in_dim = static_cast<int>(in.get<std::uint32_t>());
  Checkpoint ck;
  ck.state.t = in.get<std::int64_t>();
  ck.state.config.lr = in.get<double>();
  ck.state.config.beta1 = in.get<double>();
  ck.state.config.beta2 = in.get<double>();
  ck.state.config.epsilon = in.get<double>();
  ck.params.W = detail::get_matrix(in, out_dim, in_dim);
  ck.params.b = detail::get_vector(in, out_dim);
  ck.state.m.W = detail::get_matrix(in, out_dim, in_dim);
  ck.state.m.b = detail::get_vector(in, out_dim);
  ck.state.v.W = detail::get_matrix(in, out_dim, in_dim);
  ck.state.v.b = detail::get_vector(in, out_dim);
  if (!ck.params.W.allFinite() || !ck.params.b.allFinite())
    throw FormatError(FormatErrorKind::NonFinite, path.string());
  return ck;
}

// ---------------------------------------------------------------------------
// Alternating mine / step loop
// ---------------------------------------------------------------------------

struct TrainConfig {
  int rounds = 200;
  AdamConfig adam;
  int checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::filesystem::path checkpoint_dir;
  int jobs = 1;
};

struct RoundRecord {
  int round = 0;
  double loss = std::numeric_limits<double>::quiet_NaN();  // NaN for skipped rounds
  std::size_t n_verified = 0;
  double mean_votes = 0.0;
  std::size_t n_pairs = 0;
};

struct TrainResult {
  AdapterParams params;
  AdamState state;
  std::vector<RoundRecord> history;
  int skipped_rounds = 0;
};

/// Gathers base (pre-adapter) features for every mined pair.
inline TripletBatch build_batch(std::span<const PositivePair> pairs, std::span<const FeaturePyramid> base) {
  TripletBatch batch;
  batch.reserve(pairs.size());
  for (const auto& p : pairs) {
    if (p.negatives.empty()) continue;
    Triplet t{to_vector(base[p.p1.image_index].cell(p.p1.pos)), to_vector(base[p.p2.image_index].cell(p.p2.pos)), {}};
    for (const auto& n : p.negatives) t.negatives.push_back(to_vector(base[n.image_index].cell(n.pos)));
    batch.push_back(std::move(t));
  }
  return batch;
}

using RoundCallback = std::function<void(const RoundRecord&, const AdapterParams&)>;

/// Each round: adapt all features with the current parameters, mine hard
/// positives/negatives on the adapted features, then take one Adam step on
/// the mean triplet loss of every mined pair.
inline TrainResult train(std::span<const FeaturePyramid> base, const MiningConfig& mining, const LossConfig& loss_cfg,
                         const TrainConfig& cfg, std::uint64_t seed, const RoundCallback& on_round = {}) {
  if (base.empty()) throw PreconditionError("train: empty dataset");
  MiningConfig mcfg = mining;
  mcfg.n_neg = loss_cfg.n_neg;
  TrainResult result{AdapterParams::identity(base.front().channels()), {}, {}, 0};
  result.state = AdamState::fresh(result.params, cfg.adam);
  std::mt19937_64 rng(seed);

  for (int round = 1; round <= cfg.rounds; ++round) {
    const auto adapted = adapt_all(result.params, base, cfg.jobs);
    const auto mined = mine_round(adapted, mcfg, rng, cfg.jobs);
    RoundRecord rec;
    rec.round = round;
    rec.n_verified = mined.verified.size();
    for (const auto& c : mined.candidates) rec.mean_votes += c.votes;
    if (!mined.candidates.empty()) rec.mean_votes /= static_cast<double>(mined.candidates.size());

    const auto batch = build_batch(mined.pairs, base);
    rec.n_pairs = batch.size();
    if (batch.empty()) {
      logger().warn("train: round {} produced no verified pairs; skipped", round);
      ++result.skipped_rounds;
    } else {
      const auto lg = triplet_loss_and_grad(batch, result.params, loss_cfg);
      rec.loss = lg.loss;
      adam_step(result.state, result.params, lg.grad);
    }
    logger().info("train: round {} loss {:.5f} verified {} mean votes {:.2f}", round, rec.loss, rec.n_verified,
                  rec.mean_votes);
    result.history.push_back(rec);
    if (cfg.checkpoint_every > 0 && round % cfg.checkpoint_every == 0 && !cfg.checkpoint_dir.empty())
      write_checkpoint(cfg.checkpoint_dir / ("checkpoint_" + std::to_string(round) + ".amck"), result.params,
                       result.state);
    if (on_round) on_round(rec, result.params);
  }
  return result;
}

inline void write_history_csv(const std::filesystem::path& path, const std::vector<RoundRecord>& history) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "round,loss,n_verified,mean_votes\n";
  char buf[128];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%zu,%.6g\n", r.round, r.loss, r.n_verified, r.mean_votes);
    out << buf;
  }
}

} // namespace patternmine
