#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "squeeze10/matrix.hpp"
#include "squeeze10/tensor_store.hpp"

namespace squeeze10 {

inline constexpr double kDefaultLambda = 3e-4;
inline constexpr double kDefaultDampingFraction = 0.01;

/// Running H = 2 * sum of X^T X over calibration batches (d_in x d_in).
struct HessianState {
  MatrixD h;
  std::uint64_t n_samples = 0;
  double damping_applied = 0.0;

  static HessianState zeros(std::size_t d_in) { return HessianState{MatrixD(d_in, d_in), 0, 0.0}; }
  std::size_t dim() const { return h.rows(); }
};

void accumulate_hessian(HessianState& state, const MatrixF& x_batch);

struct HessianInverse {
  MatrixD inverse;           // (H + delta I)^-1
  std::vector<double> diag;  // its diagonal
  double damping = 0.0;      // delta actually added
};

/// delta = damping_fraction * mean(diag(H)); the inverse comes from a
/// Cholesky factorization and throws NotPositiveDefinite when that fails.
HessianInverse invert_hessian(const HessianState& state, double damping_fraction);

/// v_ij = w_ij^2 / hinv_diag[j]^2.
MatrixD compute_v(const MatrixF& w, std::span<const double> hinv_diag);

enum class RangeMode { raw, absolute };

// Returns the binarized replacement for element (row, col) holding value.
using ElementBinarizer = std::function<float(std::size_t row, std::size_t col, float value)>;

/// B_ij is the token range of output channel i after replacing w_ij alone
/// with its binarized value. Computed from Y = X W^T with a rank-1 column
/// update per element, O(d_out * d_in * N).
MatrixD compute_b(const MatrixF& w, const MatrixF& x, const ElementBinarizer& binarize, RangeMode mode);

double channel_range(std::span<const double> column, RangeMode mode);

MatrixD combine_pbar(const MatrixD& v, const MatrixD& b, double lambda);

struct SalienceMaps {
  MatrixD v;
  MatrixD b;
  MatrixD m;
  double lambda_used = 0.0;
};

struct SalienceMask {
  std::vector<bool> mask;  // row-major, true = salient
  std::size_t rows = 0;
  std::size_t cols = 0;
  double ratio_requested = 0.0;
  std::size_t count_selected = 0;
};

std::size_t salient_target_count(double ratio, std::size_t total);

/// Layer-wide top-k of M. Equal scores go to the lower row-major index.
SalienceMask select_salient(const MatrixD& m, double ratio);

// Adds "<layer>.V", "<layer>.B", "<layer>.M" as float tensors.
void export_salience(const SalienceMaps& maps, const std::string& layer, TensorContainer& container);

}  // namespace squeeze10
