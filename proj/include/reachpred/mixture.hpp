#pragma once

#include "reachpred/core.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

namespace reachpred::mixture {

inline constexpr double kLog2Pi = 1.8378770664093454836;

struct KMeansResult {
  Eigen::MatrixXd centroids;  // K x C
  std::vector<int> assignment;
  std::vector<double> sse_trace;
  double sse = 0.0;
};

// Lloyd's algorithm with k-means++ seeding. An emptied cluster is re-seeded
// at the point farthest from its current centroid.
inline KMeansResult kmeans(const Eigen::MatrixXd& pts, int k, unsigned long seed, int max_iter = 100) {
  const Eigen::Index n = pts.rows();
  if (k < 1) throw Error("kmeans: K must be >= 1");
  if (k > n) throw Error("kmeans: K = " + std::to_string(k) + " exceeds the number of points " + std::to_string(n));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  KMeansResult r;
  r.centroids.resize(k, pts.cols());
  std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  Eigen::Index first = static_cast<Eigen::Index>(unif(rng) * static_cast<double>(n));
  first = std::min(first, n - 1);
  r.centroids.row(0) = pts.row(first);
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      d2[static_cast<std::size_t>(i)] = std::min(d2[static_cast<std::size_t>(i)], (pts.row(i) - r.centroids.row(c - 1)).squaredNorm());
      total += d2[static_cast<std::size_t>(i)];
    }
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double u = unif(rng) * total, run = 0.0;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        run += d2[static_cast<std::size_t>(i)];
        if (run >= u && d2[static_cast<std::size_t>(i)] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = std::min<Eigen::Index>(c, n - 1);
    }
    r.centroids.row(c) = pts.row(pick);
  }

  r.assignment.assign(static_cast<std::size_t>(n), -1);
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    double sse = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = (pts.row(i) - r.centroids.row(c)).squaredNorm();
        if (d < bd) bd = d, best = c;
      }
      if (r.assignment[static_cast<std::size_t>(i)] != best) changed = true;
      r.assignment[static_cast<std::size_t>(i)] = best;
      sse += bd;
    }
    r.sse_trace.push_back(sse);
    r.sse = sse;
    if (!changed && it > 0) break;

    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(k, pts.cols());
    std::vector<int> count(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sum.row(r.assignment[static_cast<std::size_t>(i)]) += pts.row(i);
      ++count[static_cast<std::size_t>(r.assignment[static_cast<std::size_t>(i)])];
    }
    for (int c = 0; c < k; ++c) {
      if (count[static_cast<std::size_t>(c)] > 0) {
        r.centroids.row(c) = sum.row(c) / count[static_cast<std::size_t>(c)];
        continue;
      }
      Eigen::Index far = 0;
      double fd = -1.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double d = (pts.row(i) - r.centroids.row(r.assignment[static_cast<std::size_t>(i)])).squaredNorm();
        if (d > fd) fd = d, far = i;
      }
      r.centroids.row(c) = pts.row(far);
    }
  }
  return r;
}

struct GaussianComponent {
  double prior = 1.0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Weighted sum of full-covariance Gaussians. prepare() caches the Cholesky
// factors used by log_pdf.
class Mixture {
 public:
  Mixture() = default;
  explicit Mixture(std::vector<GaussianComponent> comps) : comps_(std::move(comps)) { prepare(); }

  const std::vector<GaussianComponent>& components() const { return comps_; }
  int size() const { return static_cast<int>(comps_.size()); }
  int dim() const { return comps_.empty() ? 0 : static_cast<int>(comps_.front().mean.size()); }

  void prepare() {
    cache_.clear();
    for (const auto& c : comps_) {
      Eigen::LLT<Eigen::MatrixXd> llt(c.cov);
      if (llt.info() != Eigen::Success) throw Error("Mixture: covariance is not positive definite");
      Cache k;
      k.lower = llt.matrixL();
      k.log_norm = std::log(c.prior) - 0.5 * (static_cast<double>(c.mean.size()) * kLog2Pi) - k.lower.diagonal().array().log().sum();
      cache_.push_back(std::move(k));
    }
  }

  // log of pi_k N(x; mu_k, Sigma_k) for every component
  void component_log_terms(const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::VectorXd& out) const {
    out.resize(size());
    for (int k = 0; k < size(); ++k) {
      const Eigen::VectorXd z = cache_[static_cast<std::size_t>(k)].lower.triangularView<Eigen::Lower>().solve(x - comps_[static_cast<std::size_t>(k)].mean);
      out[k] = cache_[static_cast<std::size_t>(k)].log_norm - 0.5 * z.squaredNorm();
    }
  }

  // Row i, column k: log of pi_k N(x_i; mu_k, Sigma_k).
  Eigen::MatrixXd component_log_terms_batch(const Eigen::MatrixXd& pts) const {
    Eigen::MatrixXd out(pts.rows(), size());
    for (int k = 0; k < size(); ++k) {
      const auto& c = cache_[static_cast<std::size_t>(k)];
      Eigen::MatrixXd z = (pts.rowwise() - comps_[static_cast<std::size_t>(k)].mean.transpose()).transpose();
      c.lower.triangularView<Eigen::Lower>().solveInPlace(z);
      out.col(k) = (c.log_norm - 0.5 * z.colwise().squaredNorm().array()).matrix().transpose();
    }
    return out;
  }

  double log_pdf(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    Eigen::VectorXd t;
    component_log_terms(x, t);
    const double m = t.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((t.array() - m).exp().sum());
  }

  bool operator==(const Mixture& o) const {
    if (comps_.size() != o.comps_.size()) return false;
    for (std::size_t i = 0; i < comps_.size(); ++i)
      if (comps_[i].prior != o.comps_[i].prior || comps_[i].mean != o.comps_[i].mean || comps_[i].cov != o.comps_[i].cov) return false;
    return true;
  }

 private:
  struct Cache {
    Eigen::MatrixXd lower;
    double log_norm = 0.0;
  };
  std::vector<GaussianComponent> comps_;
  std::vector<Cache> cache_;
};

struct EmOptions {
  double tol = 1e-6;  // relative change of the log-likelihood
  int max_iter = 300;
  double ridge = 1e-6;
  int kmeans_iter = 100;
};

struct EmResult {
  Mixture mixture;
  std::vector<double> ll_trace;  // log-likelihood after each E-step
  double log_likelihood = 0.0;
  int iterations = 0;
  std::vector<std::string> warnings;
};

inline double total_log_likelihood(const Mixture& m, const Eigen::MatrixXd& pts) {
  const Eigen::MatrixXd t = m.component_log_terms_batch(pts);
  double ll = 0.0;
  for (Eigen::Index i = 0; i < t.rows(); ++i) {
    const double mx = t.row(i).maxCoeff();
    ll += mx + std::log((t.row(i).array() - mx).exp().sum());
  }
  return ll;
}

// EM for a K-component mixture seeded by k-means. Covariances get ridge * I
// after every M-step.
inline EmResult em_fit(const Eigen::MatrixXd& pts, int k, unsigned long seed, const EmOptions& opt = {}) {
  const Eigen::Index n = pts.rows(), d = pts.cols();
  if (n < 5 * k) throw Error("em_fit: need at least 5*K points (N=" + std::to_string(n) + ", K=" + std::to_string(k) + ")");
  if (!pts.allFinite()) throw Error("em_fit: non-finite input");
  const Eigen::MatrixXd ridge = opt.ridge * Eigen::MatrixXd::Identity(d, d);

  EmResult res;
  auto km = kmeans(pts, k, seed, opt.kmeans_iter);
  std::vector<GaussianComponent> comps;
  for (int c = 0; c < k; ++c) {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < n; ++i)
      if (km.assignment[static_cast<std::size_t>(i)] == c) rows.push_back(i);
    GaussianComponent g;
    g.mean = km.centroids.row(c).transpose();
    g.cov = ridge;
    if (rows.size() >= 2) {
      Eigen::MatrixXd sub(static_cast<Eigen::Index>(rows.size()), d);
      for (std::size_t r = 0; r < rows.size(); ++r) sub.row(static_cast<Eigen::Index>(r)) = pts.row(rows[r]);
      const Eigen::MatrixXd cen = sub.rowwise() - g.mean.transpose();
      g.cov += cen.transpose() * cen / static_cast<double>(rows.size());
    } else {
      const Eigen::MatrixXd cen = pts.rowwise() - pts.colwise().mean();
      g.cov += (cen.transpose() * cen / static_cast<double>(n)).diagonal().asDiagonal();
    }
    g.prior = std::max<double>(static_cast<double>(rows.size()), 1.0) / static_cast<double>(n);
    comps.push_back(std::move(g));
  }
  double psum = 0.0;
  for (auto& g : comps) psum += g.prior;
  for (auto& g : comps) g.prior /= psum;

  Mixture mix(comps);
  Eigen::MatrixXd resp(n, k);
  double prev = -std::numeric_limits<double>::infinity();
  int it = 0;
  for (; it < opt.max_iter; ++it) {
    // E-step
    const int kk = mix.size();
    resp = mix.component_log_terms_batch(pts);
    double ll = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double m = resp.row(i).maxCoeff();
      resp.row(i) = (resp.row(i).array() - m).exp().matrix();
      const double s = resp.row(i).sum();
      ll += m + std::log(s);
      resp.row(i) /= s;
    }
    res.ll_trace.push_back(ll);
    if (it > 0 && std::abs(ll - prev) <= opt.tol * std::abs(prev)) {
      prev = ll;
      break;
    }
    prev = ll;

    // M-step
    std::vector<GaussianComponent> next;
    for (int c = 0; c < kk; ++c) {
      const double nk = resp.col(c).sum();
      if (nk < 1e-8 * static_cast<double>(n)) {
        res.warnings.push_back("em_fit: dropped a component with vanishing responsibility");
        continue;
      }
      GaussianComponent g;
      g.prior = nk / static_cast<double>(n);
      g.mean = (pts.transpose() * resp.col(c)) / nk;
      const Eigen::MatrixXd cen = pts.rowwise() - g.mean.transpose();
      g.cov = (cen.transpose() * resp.col(c).asDiagonal() * cen) / nk + ridge;
      g.cov = 0.5 * (g.cov + g.cov.transpose());
      Eigen::LLT<Eigen::MatrixXd> llt(g.cov);
      if (llt.info() != Eigen::Success) {
        res.warnings.push_back("em_fit: removed a component with singular covariance");
        continue;
      }
      next.push_back(std::move(g));
    }
    if (next.empty()) throw Error("em_fit: all components collapsed");
    double tot = 0.0;
    for (auto& g : next) tot += g.prior;
    for (auto& g : next) g.prior /= tot;
    mix = Mixture(std::move(next));
  }
  res.iterations = it;
  res.log_likelihood = prev;
  res.mixture = std::move(mix);
  return res;
}

inline int free_parameters(int k, int d) { return (k - 1) + k * d + k * d * (d + 1) / 2; }

struct SelectResult {
  int best_k = 0;
  std::vector<int> candidates;
  std::vector<double> bic;  // +inf for failed fits
  Mixture mixture;
  std::vector<std::string> warnings;
};

// BIC = -2 ll + p ln N, argmin over the candidates; ties go to the smaller K.
inline SelectResult select_k(const Eigen::MatrixXd& pts, const std::vector<int>& candidates, unsigned long seed, const EmOptions& opt = {}) {
  if (candidates.empty()) throw Error("select_k: no candidates");
  SelectResult r;
  std::vector<int> ks = candidates;
  std::sort(ks.begin(), ks.end());
  double best = std::numeric_limits<double>::infinity();
  for (int k : ks) {
    r.candidates.push_back(k);
    try {
      auto fit = em_fit(pts, k, seed, opt);
      const int kk = fit.mixture.size();
      const double bic = -2.0 * fit.log_likelihood + free_parameters(kk, static_cast<int>(pts.cols())) * std::log(static_cast<double>(pts.rows()));
      r.bic.push_back(bic);
      if (bic < best) {
        best = bic;
        r.best_k = k;
        r.mixture = std::move(fit.mixture);
        r.warnings = std::move(fit.warnings);
      }
    } catch (const Error& e) {
      r.bic.push_back(std::numeric_limits<double>::infinity());
      r.warnings.push_back(std::string("select_k: K=") + std::to_string(k) + " failed: " + e.what());
    }
  }
  if (r.best_k == 0) throw Error("select_k: every candidate fit failed");
  return r;
}

// Per-class mixtures over the reduced features.
struct DirectionModel {
  int classes = 0;
  int dim = 0;
  std::vector<Mixture> mixtures;  // index l-1 for class l
  unsigned long seed = 0;
  std::vector<int> k_table;
  std::vector<std::vector<double>> bic_table;
  std::vector<int> k_candidates;

  void validate() const {
    if (classes < 2 || static_cast<int>(mixtures.size()) != classes) throw Error("DirectionModel: class count mismatch");
    for (const auto& m : mixtures)
      if (m.size() < 1 || m.dim() != dim) throw Error("DirectionModel: mixture dimension mismatch");
  }
};

inline Eigen::VectorXd class_log_pdf(const DirectionModel& model, const Eigen::Ref<const Eigen::VectorXd>& x) {
  if (x.size() != model.dim) throw Error("class_log_pdf: feature dimension " + std::to_string(x.size()) + " != " + std::to_string(model.dim));
  if (!x.allFinite()) throw Error("class_log_pdf: non-finite input");
  Eigen::VectorXd out(model.classes);
  for (int l = 0; l < model.classes; ++l) out[l] = model.mixtures[static_cast<std::size_t>(l)].log_pdf(x);
  return out;
}

// Softmax with max subtraction: exp(log_rho - max) / sum.
inline Eigen::VectorXd normalize_over_classes(const Eigen::Ref<const Eigen::VectorXd>& log_rho) {
  const double m = log_rho.maxCoeff();
  Eigen::VectorXd out(log_rho.size());
  if (!std::isfinite(m)) {
    out.setConstant(1.0 / static_cast<double>(log_rho.size()));
    return out;
  }
  out = (log_rho.array() - m).exp().matrix();
  out /= out.sum();
  return out;
}

struct DirectionFitOptions {
  std::vector<int> k_candidates{1, 2, 3, 4, 5};
  EmOptions em;
};

// features: rows of reduced samples; labels in 1..L per row.
inline DirectionModel fit_direction_model(const Eigen::MatrixXd& features, const std::vector<int>& labels, int classes, unsigned long seed, const DirectionFitOptions& opt = {},
                                          std::vector<std::string>* warnings = nullptr) {
  DirectionModel dm;
  dm.classes = classes;
  dm.dim = static_cast<int>(features.cols());
  dm.seed = seed;
  dm.k_candidates = opt.k_candidates;
  for (int l = 1; l <= classes; ++l) {
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == l) rows.push_back(static_cast<Eigen::Index>(i));
    if (rows.empty()) throw Error("fit_direction_model: class " + std::to_string(l) + " has no samples");
    Eigen::MatrixXd sub(static_cast<Eigen::Index>(rows.size()), features.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) sub.row(static_cast<Eigen::Index>(r)) = features.row(rows[r]);
    std::vector<int> feasible;
    for (int k : opt.k_candidates)
      if (static_cast<Eigen::Index>(5 * k) <= sub.rows()) feasible.push_back(k);
    if (feasible.empty()) throw Error("fit_direction_model: class " + std::to_string(l) + " has too few samples");
    auto sel = select_k(sub, feasible, seed + static_cast<unsigned long>(l), opt.em);
    if (warnings) warnings->insert(warnings->end(), sel.warnings.begin(), sel.warnings.end());
    dm.k_table.push_back(sel.mixture.size());
    dm.bic_table.push_back(sel.bic);
    dm.mixtures.push_back(std::move(sel.mixture));
  }
  return dm;
}

}  // namespace reachpred::mixture
