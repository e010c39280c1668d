#pragma once

#include "reachpred/core.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace reachpred::reduce {

enum class Variant { pca, pcanmf, fda, fda_imu };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::pca: return "PCA";
    case Variant::pcanmf: return "PCANMF";
    case Variant::fda: return "FDA";
    case Variant::fda_imu: return "FDA_IMU";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  std::string u(s);
  for (auto& c : u) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  std::replace(u.begin(), u.end(), '-', '_');
  if (u == "PCA") return Variant::pca;
  if (u == "PCANMF" || u == "PCA_NMF") return Variant::pcanmf;
  if (u == "FDA") return Variant::fda;
  if (u == "FDA_IMU") return Variant::fda_imu;
  throw Error("unknown reducer variant '" + std::string(s) + "'");
}

inline std::vector<int> channel_range(std::size_t first, std::size_t count) {
  std::vector<int> v(count);
  std::iota(v.begin(), v.end(), static_cast<int>(first));
  return v;
}
inline std::vector<int> all_channels() { return channel_range(0, kChannels); }
inline std::vector<int> imu_channels() { return channel_range(0, kImuChannels); }
inline std::vector<int> emg_channels() { return channel_range(kImuChannels, kEmgChannels); }

inline Eigen::MatrixXd select_columns(const Eigen::MatrixXd& x, const std::vector<int>& cols) {
  Eigen::MatrixXd out(x.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = x.col(cols[j]);
  return out;
}

// Makes each row's largest-magnitude coefficient positive.
inline void canonical_signs(Eigen::MatrixXd& rows) {
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    Eigen::Index arg = 0;
    rows.row(r).cwiseAbs().maxCoeff(&arg);
    if (rows(r, arg) < 0) rows.row(r) *= -1.0;
  }
}

struct PcaFit {
  Eigen::MatrixXd components;  // C x M, orthonormal rows, descending eigenvalue
  Eigen::VectorXd mean;
  Eigen::VectorXd eigenvalues;        // all positive eigenvalues, descending
  Eigen::VectorXd explained_ratio;    // eigenvalues / total variance
  int dim = 0;
};

inline PcaFit fit_pca(const Eigen::MatrixXd& x, double variance_target = 0.90) {
  if (x.rows() < 2) throw Error("fit_pca: need at least 2 samples");
  if (!(variance_target > 0.0 && variance_target <= 1.0)) throw Error("fit_pca: variance target must be in (0, 1]");
  PcaFit fit;
  fit.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - fit.mean.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw Error("fit_pca: eigendecomposition failed");
  const Eigen::Index m = cov.rows();
  const double total = cov.trace();
  const double tiny = std::max(1e-12 * std::max(total, 0.0), 1e-300);
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = m - 1; i >= 0; --i)
    if (es.eigenvalues()[i] > tiny) keep.push_back(i);
  if (keep.empty()) throw Error("fit_pca: data has no variance");
  fit.eigenvalues.resize(static_cast<Eigen::Index>(keep.size()));
  fit.explained_ratio.resize(fit.eigenvalues.size());
  for (std::size_t k = 0; k < keep.size(); ++k) {
    fit.eigenvalues[static_cast<Eigen::Index>(k)] = es.eigenvalues()[keep[k]];
    fit.explained_ratio[static_cast<Eigen::Index>(k)] = es.eigenvalues()[keep[k]] / total;
  }
  double cum = 0.0;
  int c = 0;
  for (Eigen::Index k = 0; k < fit.explained_ratio.size(); ++k) {
    cum += fit.explained_ratio[k];
    c = static_cast<int>(k) + 1;
    if (cum >= variance_target - 1e-12) break;
  }
  fit.dim = c;
  fit.components.resize(c, m);
  for (int k = 0; k < c; ++k) fit.components.row(k) = es.eigenvectors().col(keep[static_cast<std::size_t>(k)]).transpose();
  canonical_signs(fit.components);
  return fit;
}

struct NmfOptions {
  double vaf_target = 0.90;
  int max_iter = 300;
  double tol = 1e-5;  // relative objective change
  int max_dim = 0;    // 0 = number of columns
  unsigned seed = 1;
};

struct NmfFit {
  Eigen::MatrixXd synergies;    // H: C x M, non-negative
  Eigen::MatrixXd activations;  // W: N x C, non-negative
  int dim = 0;
  double vaf = 0.0;
  std::vector<double> vaf_by_dim;
  std::vector<double> objective_trace;  // of the selected fit
  std::vector<std::string> warnings;
};

// Variance accounted for, against the column-centred total.
inline double variance_accounted_for(const Eigen::MatrixXd& x, const Eigen::MatrixXd& recon) {
  const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
  const double denom = centered.squaredNorm();
  if (denom <= 0.0) return (x - recon).squaredNorm() <= 0.0 ? 1.0 : 0.0;
  return 1.0 - (x - recon).squaredNorm() / denom;
}

namespace detail {

struct MuResult {
  Eigen::MatrixXd w, h;
  std::vector<double> objective;
};

// Lee-Seung multiplicative updates for ||X - W H||_F^2.
inline MuResult multiplicative_updates(const Eigen::MatrixXd& x, int c, const NmfOptions& opt, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double scale = std::sqrt(std::max(x.mean(), 1e-12) / c);
  MuResult r;
  r.w.resize(x.rows(), c);
  r.h.resize(c, x.cols());
  for (Eigen::Index i = 0; i < r.w.size(); ++i) r.w.data()[i] = scale * (0.1 + unif(rng));
  for (Eigen::Index i = 0; i < r.h.size(); ++i) r.h.data()[i] = scale * (0.1 + unif(rng));
  constexpr double eps = 1e-12;
  double prev = (x - r.w * r.h).squaredNorm();
  r.objective.push_back(prev);
  for (int it = 0; it < opt.max_iter; ++it) {
    const Eigen::MatrixXd wtx = r.w.transpose() * x;
    const Eigen::MatrixXd wtwh = (r.w.transpose() * r.w) * r.h;
    r.h = r.h.cwiseProduct(wtx.cwiseQuotient(wtwh.array().max(eps).matrix()));
    const Eigen::MatrixXd xht = x * r.h.transpose();
    const Eigen::MatrixXd whht = r.w * (r.h * r.h.transpose());
    r.w = r.w.cwiseProduct(xht.cwiseQuotient(whht.array().max(eps).matrix()));
    const double obj = (x - r.w * r.h).squaredNorm();
    r.objective.push_back(obj);
    if (prev - obj <= opt.tol * std::max(prev, 1e-300)) break;
    prev = obj;
  }
  return r;
}

}  // namespace detail

// NMF with the embedding dimension chosen as the smallest C whose VAF reaches
// the target.
inline NmfFit fit_nmf(const Eigen::MatrixXd& x, const NmfOptions& opt = {}) {
  if (x.rows() < 1 || x.cols() < 1) throw Error("fit_nmf: empty data");
  if ((x.array() < 0.0).any()) throw Error("fit_nmf: input has negative entries");
  if (!x.allFinite()) throw Error("fit_nmf: non-finite input");
  NmfFit fit;
  if (x.squaredNorm() == 0.0) {
    fit.dim = 1;
    fit.synergies = Eigen::MatrixXd::Zero(1, x.cols());
    fit.activations = Eigen::MatrixXd::Zero(x.rows(), 1);
    fit.vaf = 1.0;
    fit.vaf_by_dim = {1.0};
    fit.warnings.push_back("fit_nmf: all-zero input, returning a single zero synergy");
    return fit;
  }
  const int max_dim = opt.max_dim > 0 ? opt.max_dim : static_cast<int>(x.cols());
  for (int c = 1; c <= max_dim; ++c) {
    auto r = detail::multiplicative_updates(x, c, opt, opt.seed + static_cast<unsigned>(c));
    const double vaf = variance_accounted_for(x, r.w * r.h);
    fit.vaf_by_dim.push_back(vaf);
    if (vaf >= opt.vaf_target || c == max_dim) {
      if (vaf < opt.vaf_target) fit.warnings.push_back("fit_nmf: VAF target not reached, using C = " + std::to_string(c));
      fit.dim = c;
      fit.vaf = vaf;
      fit.synergies = std::move(r.h);
      fit.activations = std::move(r.w);
      fit.objective_trace = std::move(r.objective);
      break;
    }
  }
  return fit;
}

// min ||x - H^T w|| s.t. w >= 0, by cyclic coordinate descent on the normal
// equations; gram = H H^T.
inline Eigen::VectorXd nnls_activations(const Eigen::MatrixXd& synergies, const Eigen::MatrixXd& gram, const Eigen::VectorXd& x, int max_sweeps = 1000, double tol = 1e-12) {
  const Eigen::Index c = synergies.rows();
  const Eigen::VectorXd b = synergies * x;
  Eigen::VectorXd w = Eigen::VectorXd::Zero(c);
  Eigen::VectorXd grad = -b;  // gram * w - b
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double change = 0.0;
    for (Eigen::Index k = 0; k < c; ++k) {
      if (gram(k, k) <= 0.0) continue;
      const double nw = std::max(0.0, w[k] - grad[k] / gram(k, k));
      const double d = nw - w[k];
      if (d != 0.0) {
        grad += d * gram.col(k);
        w[k] = nw;
        change = std::max(change, std::abs(d) * std::sqrt(gram(k, k)));
      }
    }
    if (change <= tol * std::max(1.0, std::sqrt(b.squaredNorm()))) break;
  }
  return w;
}

struct FdaOptions {
  double ridge = 1e-6;  // times trace(S_W) / M
};

struct FdaFit {
  Eigen::MatrixXd components;  // (L-1) x M, unit-norm rows
  Eigen::VectorXd mean;
  Eigen::VectorXd eigenvalues;  // descending, of S_W^-1 (S_W + S_B)
  int dim = 0;
};

// Fisher discriminant directions: generalized eigenvectors of
// (S_W + S_B) v = lambda S_W v, solved in the S_W-whitened space.
inline FdaFit fit_fda(const Eigen::MatrixXd& x, const std::vector<int>& labels, const FdaOptions& opt = {}) {
  if (static_cast<Eigen::Index>(labels.size()) != x.rows()) throw Error("fit_fda: label count does not match samples");
  std::vector<int> classes(labels.begin(), labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  const int n_classes = static_cast<int>(classes.size());
  if (n_classes < 2) throw Error("fit_fda: need at least 2 classes");
  const Eigen::Index m = x.cols();

  FdaFit fit;
  fit.mean = x.colwise().mean().transpose();
  Eigen::MatrixXd sw = Eigen::MatrixXd::Zero(m, m), sb = Eigen::MatrixXd::Zero(m, m);
  for (int cls : classes) {
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == cls) rows.push_back(static_cast<Eigen::Index>(i));
    if (rows.size() < 2) throw Error("fit_fda: class " + std::to_string(cls) + " has fewer than 2 samples");
    Eigen::MatrixXd xc(static_cast<Eigen::Index>(rows.size()), m);
    for (std::size_t r = 0; r < rows.size(); ++r) xc.row(static_cast<Eigen::Index>(r)) = x.row(rows[r]);
    const Eigen::VectorXd mu = xc.colwise().mean().transpose();
    const Eigen::MatrixXd d = xc.rowwise() - mu.transpose();
    sw += d.transpose() * d;
    const Eigen::VectorXd dm = mu - fit.mean;
    sb += static_cast<double>(rows.size()) * dm * dm.transpose();
  }
  sw += (opt.ridge * sw.trace() / static_cast<double>(m)) * Eigen::MatrixXd::Identity(m, m);
  Eigen::LLT<Eigen::MatrixXd> llt(sw);
  if (llt.info() != Eigen::Success) throw Error("fit_fda: within-class scatter is singular after regularisation");
  const Eigen::MatrixXd lower = llt.matrixL();
  const Eigen::MatrixXd total = sw + sb;
  // A = L^-1 S L^-T
  Eigen::MatrixXd a = lower.triangularView<Eigen::Lower>().solve(total);
  a = lower.triangularView<Eigen::Lower>().solve(a.transpose()).transpose();
  a = 0.5 * (a + a.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  if (es.info() != Eigen::Success) throw Error("fit_fda: eigendecomposition failed");

  const int c = n_classes - 1;
  fit.dim = c;
  fit.components.resize(c, m);
  fit.eigenvalues.resize(c);
  for (int k = 0; k < c; ++k) {
    const Eigen::Index col = m - 1 - k;
    Eigen::VectorXd v = lower.transpose().triangularView<Eigen::Upper>().solve(es.eigenvectors().col(col));
    v.normalize();
    fit.components.row(k) = v.transpose();
    fit.eigenvalues[k] = es.eigenvalues()[col];
  }
  canonical_signs(fit.components);
  return fit;
}

// Fitted transform from a full frame to C features. The linear block covers
// PCA / FDA; PCANMF appends non-negative activations against the synergies.
struct ReducerMap {
  Variant variant = Variant::fda;
  std::vector<int> linear_channels;
  Eigen::VectorXd offset;       // means of the linear-block channels
  Eigen::MatrixXd projection;   // C_lin x |linear_channels|
  std::vector<int> nmf_channels;
  Eigen::MatrixXd synergies;    // C_nmf x |nmf_channels|
  Eigen::MatrixXd synergy_gram; // cached H H^T
  unsigned seed = 0;
  double nmf_vaf = 0.0;
  std::vector<double> pca_explained;

  int dim() const { return static_cast<int>(projection.rows() + synergies.rows()); }
  int input_channels() const {
    int mx = -1;
    for (int c : linear_channels) mx = std::max(mx, c);
    for (int c : nmf_channels) mx = std::max(mx, c);
    return mx + 1;
  }
  void prepare() { synergy_gram = synergies * synergies.transpose(); }

  bool operator==(const ReducerMap& o) const {
    return variant == o.variant && linear_channels == o.linear_channels && offset == o.offset && projection == o.projection &&
           nmf_channels == o.nmf_channels && synergies == o.synergies && seed == o.seed;
  }
};

inline Eigen::VectorXd transform(const ReducerMap& map, const Eigen::Ref<const Eigen::VectorXd>& frame) {
  if (frame.size() < map.input_channels()) throw Error("transform: frame has " + std::to_string(frame.size()) + " channels, map needs " + std::to_string(map.input_channels()));
  if (!frame.allFinite()) throw Error("transform: non-finite input");
  Eigen::VectorXd out(map.dim());
  const Eigen::Index cl = map.projection.rows();
  if (cl > 0) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(map.linear_channels.size()));
    for (std::size_t j = 0; j < map.linear_channels.size(); ++j) v[static_cast<Eigen::Index>(j)] = frame[map.linear_channels[j]];
    out.head(cl) = map.projection * (v - map.offset);
  }
  if (map.synergies.rows() > 0) {
    Eigen::VectorXd e(static_cast<Eigen::Index>(map.nmf_channels.size()));
    for (std::size_t j = 0; j < map.nmf_channels.size(); ++j) e[static_cast<Eigen::Index>(j)] = frame[map.nmf_channels[j]];
    if (map.synergy_gram.rows() == map.synergies.rows())
      out.tail(map.synergies.rows()) = nnls_activations(map.synergies, map.synergy_gram, e);
    else
      out.tail(map.synergies.rows()) = nnls_activations(map.synergies, map.synergies * map.synergies.transpose(), e);
  }
  return out;
}

inline Eigen::MatrixXd transform_rows(const ReducerMap& map, const Eigen::MatrixXd& frames) {
  Eigen::MatrixXd out(frames.rows(), map.dim());
  for (Eigen::Index r = 0; r < frames.rows(); ++r) out.row(r) = transform(map, frames.row(r).transpose()).transpose();
  return out;
}

struct VariantOptions {
  double pca_variance = 0.90;
  NmfOptions nmf;
  FdaOptions fda;
};

struct VariantFit {
  ReducerMap map;
  std::vector<std::string> warnings;
};

// x: N x 28 full frames; labels only used by the FDA variants.
inline VariantFit fit_variant(Variant variant, const Eigen::MatrixXd& x, const std::vector<int>& labels, unsigned seed, const VariantOptions& opt = {}) {
  if (static_cast<std::size_t>(x.cols()) != kChannels) throw Error("fit_variant: expected 28-channel frames, got " + std::to_string(x.cols()));
  VariantFit res;
  ReducerMap& map = res.map;
  map.variant = variant;
  map.seed = seed;
  auto set_linear = [&](const std::vector<int>& ch, const Eigen::MatrixXd& comps, const Eigen::VectorXd& mean) {
    map.linear_channels = ch;
    map.projection = comps;
    map.offset = mean;
  };
  switch (variant) {
    case Variant::pca: {
      auto p = fit_pca(x, opt.pca_variance);
      set_linear(all_channels(), p.components, p.mean);
      map.pca_explained.assign(p.explained_ratio.data(), p.explained_ratio.data() + p.explained_ratio.size());
      break;
    }
    case Variant::pcanmf: {
      auto p = fit_pca(select_columns(x, imu_channels()), opt.pca_variance);
      set_linear(imu_channels(), p.components, p.mean);
      map.pca_explained.assign(p.explained_ratio.data(), p.explained_ratio.data() + p.explained_ratio.size());
      NmfOptions nopt = opt.nmf;
      nopt.seed = seed;
      auto n = fit_nmf(select_columns(x, emg_channels()), nopt);
      map.nmf_channels = emg_channels();
      map.synergies = n.synergies;
      map.nmf_vaf = n.vaf;
      res.warnings.insert(res.warnings.end(), n.warnings.begin(), n.warnings.end());
      break;
    }
    case Variant::fda: {
      auto f = fit_fda(x, labels, opt.fda);
      set_linear(all_channels(), f.components, f.mean);
      break;
    }
    case Variant::fda_imu: {
      auto f = fit_fda(select_columns(x, imu_channels()), labels, opt.fda);
      set_linear(imu_channels(), f.components, f.mean);
      break;
    }
  }
  map.prepare();
  return res;
}

}  // namespace reachpred::reduce
