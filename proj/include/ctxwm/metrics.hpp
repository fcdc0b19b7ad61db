#pragma once

// Representation diagnostics: spectral ranks of an activation matrix,
// dormant-unit ratio, and DCI disentanglement of (factor, representation)
// pairs. All computations are double precision on Eigen matrices.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include "ctxwm/common.hpp"
#include "ctxwm/tensor.hpp"

namespace ctxwm {

inline Eigen::MatrixXd to_eigen(const Tensor<double>& t) {
  if (t.shape.size() != 2) fail(Errc::dimension, "to_eigen needs a rank-2 tensor");
  Eigen::MatrixXd m(t.shape[0], t.shape[1]);
  for (int64_t i = 0; i < t.shape[0]; ++i)
    for (int64_t j = 0; j < t.shape[1]; ++j) m(i, j) = t.at(i, j);
  return m;
}

namespace detail {

inline void check_activations(const Eigen::MatrixXd& m, const char* who) {
  if (m.rows() < 2) fail(Errc::dimension, std::string(who) + " needs at least 2 rows");
  if (m.cols() < 1) fail(Errc::dimension, std::string(who) + " needs at least 1 column");
  if (!m.allFinite()) fail(Errc::numeric, std::string(who) + ": non-finite activations");
}

inline Eigen::MatrixXd center_columns(const Eigen::MatrixXd& m) {
  return m.rowwise() - m.colwise().mean();
}

inline Eigen::VectorXd singular_values(const Eigen::MatrixXd& m) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  return svd.singularValues();
}

// midranks: ties share the average of the ranks they occupy
inline Eigen::VectorXd midrank(const Eigen::VectorXd& v) {
  const int64_t n = v.size();
  std::vector<int64_t> order(size_t(n), 0);
  std::iota(order.begin(), order.end(), int64_t(0));
  std::sort(order.begin(), order.end(),
            [&](int64_t a, int64_t b) { return v[a] < v[b]; });
  Eigen::VectorXd ranks(n);
  int64_t i = 0;
  while (i < n) {
    int64_t j = i;
    while (j + 1 < n && v[order[size_t(j + 1)]] == v[order[size_t(i)]]) ++j;
    double mid = 0.5 * double(i + j) + 1.0;
    for (int64_t k = i; k <= j; ++k) ranks[order[size_t(k)]] = mid;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  Eigen::VectorXd xc = x.array() - x.mean();
  Eigen::VectorXd yc = y.array() - y.mean();
  double den = xc.norm() * yc.norm();
  if (den == 0) return 0.0;
  return xc.dot(yc) / den;
}

inline double spearman(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  return pearson(midrank(x), midrank(y));
}

inline double entropy_nats(const Eigen::VectorXd& p) {
  double h = 0;
  for (int64_t i = 0; i < p.size(); ++i)
    if (p[i] > 0) h -= p[i] * std::log(p[i]);
  return h;
}

}  // namespace detail

// Smallest k whose leading singular directions of the column-centered matrix
// retain a (1 - eps) share of the total variance. An all-zero (or constant)
// matrix carries no variance and has feature rank 0.
inline int64_t feature_rank(const Eigen::MatrixXd& m, double eps = 0.01) {
  if (!(eps > 0 && eps < 1)) fail(Errc::config, "feature_rank: eps must lie in (0, 1)");
  detail::check_activations(m, "feature_rank");
  Eigen::VectorXd sv = detail::singular_values(detail::center_columns(m));
  double total = sv.squaredNorm();
  if (total == 0) return 0;
  double acc = 0;
  for (int64_t k = 0; k < sv.size(); ++k) {
    acc += sv[k] * sv[k];
    if (acc >= (1 - eps) * total) return k + 1;
  }
  return sv.size();
}

// Count of singular values above a relative tolerance of the largest.
inline int64_t matrix_rank(const Eigen::MatrixXd& m, double tol = 1e-6) {
  if (!(tol > 0)) fail(Errc::config, "matrix_rank: tol must be positive");
  if (m.size() == 0) fail(Errc::dimension, "matrix_rank: empty matrix");
  if (!m.allFinite()) fail(Errc::numeric, "matrix_rank: non-finite entries");
  Eigen::VectorXd sv = detail::singular_values(m);
  double cutoff = tol * sv[0];
  if (sv[0] == 0) return 0;
  int64_t rank = 0;
  for (int64_t k = 0; k < sv.size(); ++k)
    if (sv[k] > cutoff) ++rank;
  return rank;
}

// A unit is dormant when its mean |activation|, normalized by the layer-wide
// mean |activation|, falls at or below the threshold. A silent layer is
// entirely dormant.
inline double dormant_ratio(const Eigen::MatrixXd& m, double threshold = 0.025) {
  if (!(threshold >= 0)) fail(Errc::config, "dormant_ratio: threshold must be >= 0");
  detail::check_activations(m, "dormant_ratio");
  Eigen::VectorXd unit_mean = m.cwiseAbs().colwise().mean();
  double layer_mean = unit_mean.mean();
  if (layer_mean == 0) return 1.0;
  int64_t dormant = 0;
  for (int64_t j = 0; j < unit_mean.size(); ++j)
    if (unit_mean[j] / layer_mean <= threshold) ++dormant;
  return double(dormant) / double(unit_mean.size());
}

struct DciResult {
  double disentanglement = 0;
  double completeness = 0;
  double informativeness = 0;
  std::vector<int64_t> used_factors;          // columns that survived the constant filter
  Eigen::MatrixXd importance;                 // [rep dims, used factors]
};

namespace detail {

// Ridge probe with 5-fold interleaved splits; per-fold held-out R^2 clamped
// at zero so a useless probe scores as chance, not negative.
inline double probe_r2(const Eigen::MatrixXd& reps, const Eigen::VectorXd& y) {
  const int64_t n = reps.rows(), d = reps.cols(), folds = 5;
  double score = 0;
  int64_t scored = 0;
  for (int64_t f = 0; f < folds; ++f) {
    std::vector<int64_t> tr, te;
    for (int64_t i = 0; i < n; ++i) (i % folds == f ? te : tr).push_back(i);
    Eigen::MatrixXd xtr(int64_t(tr.size()), d);
    Eigen::VectorXd ytr(int64_t(tr.size()));
    for (size_t i = 0; i < tr.size(); ++i) {
      xtr.row(int64_t(i)) = reps.row(tr[i]);
      ytr[int64_t(i)] = y[tr[i]];
    }
    Eigen::RowVectorXd xmean = xtr.colwise().mean();
    double ymean = ytr.mean();
    Eigen::MatrixXd xc = xtr.rowwise() - xmean;
    Eigen::VectorXd yc = ytr.array() - ymean;
    double lambda = 1e-4 * double(tr.size());
    Eigen::MatrixXd gram = xc.transpose() * xc;
    gram.diagonal().array() += lambda;
    Eigen::VectorXd w = gram.ldlt().solve(xc.transpose() * yc);

    double ss_res = 0, ss_tot = 0, te_mean = 0;
    for (int64_t i : te) te_mean += y[i] / double(te.size());
    for (int64_t i : te) {
      double pred = (reps.row(i) - xmean).dot(w) + ymean;
      ss_res += (y[i] - pred) * (y[i] - pred);
      ss_tot += (y[i] - te_mean) * (y[i] - te_mean);
    }
    if (ss_tot == 0) continue;  // fold with a constant target says nothing
    score += std::max(0.0, 1.0 - ss_res / ss_tot);
    ++scored;
  }
  return scored == 0 ? 0.0 : score / double(scored);
}

}  // namespace detail

// DCI over aligned (factor, representation) rows. Importances are absolute
// Spearman correlations between each representation dimension and each
// factor; disentanglement weights each dimension by its share of the total
// importance; completeness averages over factors; informativeness is the
// mean held-out ridge-probe R^2.
inline DciResult dci(const Eigen::MatrixXd& factors, const Eigen::MatrixXd& reps) {
  if (factors.rows() != reps.rows())
    fail(Errc::dimension, "dci: factors and representations disagree on rows");
  if (factors.rows() < 20) fail(Errc::dimension, "dci needs at least 20 samples");
  if (factors.cols() < 1 || reps.cols() < 1)
    fail(Errc::dimension, "dci: empty factor or representation matrix");
  if (!factors.allFinite() || !reps.allFinite())
    fail(Errc::numeric, "dci: non-finite entries");

  DciResult out;
  for (int64_t k = 0; k < factors.cols(); ++k) {
    if (factors.col(k).maxCoeff() == factors.col(k).minCoeff()) {
      std::cerr << "dci: factor column " << k << " is constant; excluded\n";
      continue;
    }
    out.used_factors.push_back(k);
  }
  if (out.used_factors.empty()) fail(Errc::domain, "dci: every factor column is constant");

  const int64_t nf = int64_t(out.used_factors.size()), nz = reps.cols();
  out.importance.resize(nz, nf);
  for (int64_t i = 0; i < nz; ++i)
    for (int64_t k = 0; k < nf; ++k)
      out.importance(i, k) =
          std::fabs(detail::spearman(reps.col(i), factors.col(out.used_factors[size_t(k)])));

  double total = out.importance.sum();
  if (total > 0) {
    for (int64_t i = 0; i < nz; ++i) {
      double w = out.importance.row(i).sum();
      if (w == 0) continue;
      double di = nf == 1
                      ? 1.0
                      : 1.0 - detail::entropy_nats(out.importance.row(i).transpose() / w) /
                                  std::log(double(nf));
      out.disentanglement += (w / total) * di;
    }
  }
  for (int64_t k = 0; k < nf; ++k) {
    double u = out.importance.col(k).sum();
    if (u == 0) continue;
    double ck = nz == 1 ? 1.0
                        : 1.0 - detail::entropy_nats(out.importance.col(k) / u) /
                                    std::log(double(nz));
    out.completeness += ck / double(nf);
  }
  for (int64_t k = 0; k < nf; ++k)
    out.informativeness +=
        detail::probe_r2(reps, factors.col(out.used_factors[size_t(k)])) / double(nf);
  return out;
}

}  // namespace ctxwm
