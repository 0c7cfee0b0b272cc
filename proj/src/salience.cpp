#include "squeeze10/salience.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "squeeze10/error.hpp"

namespace squeeze10 {

void accumulate_hessian(HessianState& state, const MatrixF& x_batch) {
  const std::size_t d = state.dim();
  if (x_batch.cols() != d)
    throw Error(ErrorCode::DimensionMismatch, "activation batch has " + std::to_string(x_batch.cols()) +
                                                  " columns, Hessian expects " + std::to_string(d));
  std::vector<double> row(d);
  MatrixD batch(d, d);
  for (std::size_t t = 0; t < x_batch.rows(); ++t) {
    const auto xr = x_batch.row(t);
    std::copy(xr.begin(), xr.end(), row.begin());
    for (std::size_t a = 0; a < d; ++a) {
      const double xa = row[a];
      if (xa == 0.0) continue;
      for (std::size_t b = a; b < d; ++b) batch(a, b) += xa * row[b];
    }
  }
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = a; b < d; ++b) {
      state.h(a, b) += 2.0 * batch(a, b);
      state.h(b, a) = state.h(a, b);
    }
  }
  state.n_samples += x_batch.rows();
}

HessianInverse invert_hessian(const HessianState& state, double damping_fraction) {
  if (state.n_samples == 0) throw Error(ErrorCode::ZeroSamples, "Hessian has no accumulated samples");
  if (damping_fraction < 0.0) throw Error(ErrorCode::InvalidConfig, "damping fraction must be non-negative");
  const auto d = static_cast<Eigen::Index>(state.dim());
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> h(state.h.data().data(), d, d);

  const double mean_diag = h.diagonal().mean();
  const double delta = damping_fraction * mean_diag;
  Eigen::MatrixXd a = h;
  a.diagonal().array() += delta;

  Eigen::LLT<Eigen::MatrixXd> llt(a);
  const double max_diag = a.diagonal().maxCoeff();
  bool ok = llt.info() == Eigen::Success && max_diag > 0.0;
  if (ok) {
    const Eigen::VectorXd pivots = llt.matrixLLT().diagonal();
    ok = (pivots.array().square() > 1e-12 * max_diag).all();
  }
  if (!ok) throw Error(ErrorCode::NotPositiveDefinite, "damped Hessian is not positive definite");

  Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(d, d));
  HessianInverse out;
  out.damping = delta;
  out.inverse = MatrixD(state.dim(), state.dim());
  out.diag.resize(state.dim());
  for (Eigen::Index r = 0; r < d; ++r) {
    for (Eigen::Index c = 0; c < d; ++c) out.inverse(r, c) = 0.5 * (inv(r, c) + inv(c, r));
    out.diag[r] = out.inverse(r, r);
  }
  return out;
}

MatrixD compute_v(const MatrixF& w, std::span<const double> hinv_diag) {
  if (hinv_diag.size() != w.cols())
    throw Error(ErrorCode::DimensionMismatch, "inverse-Hessian diagonal length differs from d_in");
  for (double d : hinv_diag) {
    if (!(d > 0.0)) throw Error(ErrorCode::NonPositiveDiagonal, "inverse-Hessian diagonal entry is not positive");
  }
  MatrixD v(w.rows(), w.cols());
  for (std::size_t i = 0; i < w.rows(); ++i) {
    for (std::size_t j = 0; j < w.cols(); ++j) {
      const double wij = w(i, j);
      v(i, j) = (wij * wij) / (hinv_diag[j] * hinv_diag[j]);
    }
  }
  return v;
}

double channel_range(std::span<const double> column, RangeMode mode) {
  double lo = 0.0;
  double hi = 0.0;
  bool first = true;
  for (double y : column) {
    const double v = mode == RangeMode::absolute ? std::abs(y) : y;
    if (first) {
      lo = hi = v;
      first = false;
    } else {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  return hi - lo;
}

MatrixD compute_b(const MatrixF& w, const MatrixF& x, const ElementBinarizer& binarize, RangeMode mode) {
  if (x.cols() != w.cols())
    throw Error(ErrorCode::DimensionMismatch, "activations have " + std::to_string(x.cols()) +
                                                  " features, weights expect " + std::to_string(w.cols()));
  if (x.rows() == 0) throw Error(ErrorCode::DimensionMismatch, "no activation tokens");
  const std::size_t n = x.rows();
  const std::size_t d_out = w.rows();
  const std::size_t d_in = w.cols();

  // Column-major copies: channel i of Y and feature j of X are contiguous.
  std::vector<double> xt(d_in * n);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < d_in; ++j) xt[j * n + t] = x(t, j);

  MatrixD b(d_out, d_in);
  std::vector<double> y(n);
  std::vector<double> y_hat(n);
  for (std::size_t i = 0; i < d_out; ++i) {
    for (std::size_t t = 0; t < n; ++t) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d_in; ++j) acc += xt[j * n + t] * static_cast<double>(w(i, j));
      y[t] = acc;
    }
    const double baseline = channel_range(y, mode);
    for (std::size_t j = 0; j < d_in; ++j) {
      const double delta = static_cast<double>(binarize(i, j, w(i, j))) - static_cast<double>(w(i, j));
      if (delta == 0.0) {
        b(i, j) = baseline;
        continue;
      }
      const double* xj = &xt[j * n];
      for (std::size_t t = 0; t < n; ++t) y_hat[t] = y[t] + delta * xj[t];
      b(i, j) = channel_range(y_hat, mode);
    }
  }
  return b;
}

MatrixD combine_pbar(const MatrixD& v, const MatrixD& b, double lambda) {
  if (v.rows() != b.rows() || v.cols() != b.cols())
    throw Error(ErrorCode::ShapeMismatch, "V and B shapes differ");
  if (lambda < 0.0) throw Error(ErrorCode::InvalidConfig, "lambda must be non-negative");
  MatrixD m(v.rows(), v.cols());
  for (std::size_t k = 0; k < m.size(); ++k) m.data()[k] = v.data()[k] + lambda * b.data()[k];
  return m;
}

std::size_t salient_target_count(double ratio, std::size_t total) {
  const double want = std::round(ratio * static_cast<double>(total));
  return static_cast<std::size_t>(std::clamp(want, 0.0, static_cast<double>(total)));
}

SalienceMask select_salient(const MatrixD& m, double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw Error(ErrorCode::InvalidConfig, "salient ratio outside [0, 1]");
  const std::size_t total = m.size();
  SalienceMask out;
  out.rows = m.rows();
  out.cols = m.cols();
  out.ratio_requested = ratio;
  out.count_selected = salient_target_count(ratio, total);
  out.mask.assign(total, false);

  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto& s = m.data();
  auto before = [&](std::size_t a, std::size_t b) { return s[a] > s[b] || (s[a] == s[b] && a < b); };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(out.count_selected), order.end(), before);
  for (std::size_t k = 0; k < out.count_selected; ++k) out.mask[order[k]] = true;
  return out;
}

void export_salience(const SalienceMaps& maps, const std::string& layer, TensorContainer& container) {
  container.put(layer + ".V", matrix_cast<float>(maps.v));
  container.put(layer + ".B", matrix_cast<float>(maps.b));
  container.put(layer + ".M", matrix_cast<float>(maps.m));
}

}  // namespace squeeze10
