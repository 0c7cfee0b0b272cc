#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "squeeze10/matrix.hpp"
#include "squeeze10/pipeline.hpp"

namespace squeeze10 {

struct OutputError {
  double mse = 0.0;      // ||Y - Y_hat||_F^2 / (N * d_out)
  double max_abs = 0.0;  // ||Y - Y_hat||_max
};

// Y = X W^T versus Y_hat = X W_hat^T.
OutputError layer_output_error(const MatrixF& w, const MatrixF& w_hat, const MatrixF& x);

struct HistogramRange {
  double min = 0.0;
  double max = 0.0;
};

struct HistogramSpec {
  std::size_t bin_count = 256;
  std::optional<HistogramRange> range;  // auto: union range of both samples
  double smoothing = 1e-10;             // added to every bin mass before normalizing
};

/// D_KL(p || q) with p from the full-precision sample and q from the
/// quantized one, both histogrammed over the same bins.
double activation_kl(std::span<const float> sample_fp, std::span<const float> sample_q, const HistogramSpec& spec = {});

struct ChannelStats {
  std::size_t channel = 0;
  double min = 0.0;
  double max = 0.0;
  double range = 0.0;
  std::size_t outlier_count = 0;  // |v - median| > k * IQR
};

inline constexpr double kOutlierIqrMultiplier = 4.0;

// Linear-interpolated quantile of sorted data, q in [0, 1].
double quantile_sorted(std::span<const double> sorted, double q);

std::vector<ChannelStats> range_stats(const MatrixF& y, double iqr_multiplier = kOutlierIqrMultiplier);
std::string range_stats_csv(const std::vector<ChannelStats>& stats);

enum class SweepAxis { intermediate_bits, salient_ratio, lambda };
std::string_view to_string(SweepAxis axis);

struct SweepPoint {
  double setting = 0.0;
  std::vector<double> layer_mse;
  double final_mse = 0.0;
  double mean_bits = 0.0;  // payload bits over all layers
  double kl = 0.0;
  std::vector<std::size_t> hamming;  // lambda sweep: mask distance from the lambda = 0 masks
  std::vector<std::vector<bool>> masks;
};

struct SweepResult {
  SweepAxis axis = SweepAxis::intermediate_bits;
  std::vector<SweepPoint> points;
  QuantConfig config;
  std::size_t kl_layer = 0;
};

struct SweepOptions {
  std::optional<std::size_t> kl_layer;  // default: last layer
  HistogramSpec histogram;
  unsigned threads = 1;
};

SweepResult sweep_bits(const Model& model, const MatrixF& inputs, const QuantConfig& config, std::vector<int> k_list,
                       const SweepOptions& options = {});
SweepResult sweep_ratio(const Model& model, const MatrixF& inputs, const QuantConfig& config,
                        std::vector<double> ratios, const SweepOptions& options = {});
SweepResult sweep_lambda(const Model& model, const MatrixF& inputs, const QuantConfig& config,
                         std::vector<double> lambdas, const SweepOptions& options = {});

std::string sweep_to_json(const SweepResult& result);
// Columns: setting,layer,metric,value. Model-level metrics use layer "all".
std::string sweep_to_csv(const SweepResult& result);

struct SupervisionComparison {
  std::vector<double> activation_drift;  // ||X_l^fias - X_l^general||_F per layer
  std::vector<double> fias_layer_mse;
  std::vector<double> general_layer_mse;
  double fias_final_mse = 0.0;
  double general_final_mse = 0.0;
};

SupervisionComparison compare_supervision(const Model& model, const MatrixF& inputs, const QuantConfig& config,
                                          unsigned threads = 1);
std::string comparison_to_json(const SupervisionComparison& cmp, const QuantConfig& config);

// Output of layer `layer` (0-based) when running the model forward.
MatrixF layer_output(const Model& model, const MatrixF& inputs, std::size_t layer);
double final_output_mse(const Model& reference, const Model& quantized, const MatrixF& inputs);

}  // namespace squeeze10
