#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "squeeze10/matrix.hpp"
#include "squeeze10/packed_model.hpp"
#include "squeeze10/quant_kernels.hpp"
#include "squeeze10/salience.hpp"
#include "squeeze10/tensor_store.hpp"

namespace squeeze10 {

enum class Granularity { per_row, per_layer };

struct QuantConfig {
  int high_bits = 4;
  double salient_ratio = 0.2;
  double lambda = kDefaultLambda;
  Supervision supervision = Supervision::fias;
  BinarizeMode binarize = BinarizeMode::scaled_sign;
  bool compensate = false;
  double damping_fraction = kDefaultDampingFraction;
  RangeMode range_mode = RangeMode::raw;
  Granularity granularity = Granularity::per_row;

  // Throws InvalidConfig / BadBits.
  void validate() const;
};

std::string_view to_string(Supervision s);
std::string_view to_string(BinarizeMode m);
std::string_view to_string(RangeMode m);
std::string_view to_string(Granularity g);
nlohmann::json config_to_json(const QuantConfig& config);

struct Layer {
  std::string name;
  MatrixF weight;  // d_out x d_in
  Nonlinearity nonlinearity = Nonlinearity::identity;
};

struct Model {
  std::vector<Layer> layers;
};

// Resolves the spec against the container; throws on any validate_model diagnostic.
Model build_model(const ModelSpec& spec, const TensorContainer& weights);

/// act(X * W^T), accumulated in double.
MatrixF apply_layer(const MatrixF& x, const MatrixF& w, Nonlinearity nonlinearity);
MatrixF forward(const Model& model, const MatrixF& inputs);

// Same architecture with each layer's weight replaced by its unpacked values.
Model dequantized_model(const Model& model, const PackedModel& packed);

struct CalibrationRecord {
  std::vector<MatrixF> inputs;  // inputs[l] is X for layer l, N x d_in(l)
  Supervision mode = Supervision::fias;
  std::uint64_t source_hash = 0;
};

/// fias: X_l from the full-precision layers before l; prefix is ignored.
/// general: layers before l use the unpacked prefix weights, so X is produced
/// for layers 0..prefix.size(). through_layer asks for X up to that layer and
/// raises MissingPrefix when the prefix is too short.
CalibrationRecord calibration_pass(const Model& model, const MatrixF& inputs, Supervision mode,
                                   std::span<const PackedLayer> prefix = {},
                                   std::optional<std::size_t> through_layer = std::nullopt);

/// Upper Cholesky factor U of H^-1 (H^-1 = U^T U). Row q of U carries the
/// inverse Hessian with columns < q already eliminated.
struct CompensationFactor {
  MatrixD upper;
};

CompensationFactor compensation_factor(const MatrixD& hinv);

// Maps (column, current value) to the value that column is stored as.
using ColumnQuantizer = std::function<float(std::size_t col, float value)>;

struct CompensatedRow {
  std::vector<float> adjusted;   // value of each column when it was quantized
  std::vector<float> quantized;  // stored value of each column
};

/// Quantizes a row left to right; after column q is stored as q_hat, every
/// later column j gets w_j -= (w_q - q_hat) * U[q][j] / U[q][q].
CompensatedRow gptq_compensate(std::span<const float> row, const CompensationFactor& factor,
                               const ColumnQuantizer& quantize_column);

struct SummaryStats {
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
};

SummaryStats summarize(const MatrixD& m);

struct LayerReport {
  std::string name;
  std::size_t d_out = 0;
  std::size_t d_in = 0;
  MeanBits bits;
  double mse = 0.0;         // ||(W - W_hat) X^T||_F^2 / (N * d_out)
  double stage1_mse = 0.0;  // same for the plain k-bit stage
  std::size_t salient_count = 0;
  SummaryStats v_stats;
  SummaryStats b_stats;
};

struct LayerResult {
  PackedLayer packed;
  LayerReport report;
  SalienceMaps salience;
  SalienceMask mask;
  HessianState hessian;
  MatrixF stage1;       // k-bit dequantized weights
  MatrixF dequantized;  // unpacked mixed-precision weights
};

/// Staged quantization of one layer against its calibration activations:
/// k-bit fit, Hessian and PBAR salience on the k-bit weights, top-ratio
/// selection, partial binarization, optional column compensation.
LayerResult quantize_layer(const std::string& name, const MatrixF& w, const MatrixF& x, const QuantConfig& config);

struct QuantReport {
  std::vector<LayerReport> layers;
  QuantConfig config;
  double wall_time_s = 0.0;
};

inline constexpr const char* kReportNote =
    "Errors are layer reconstruction MSE and activation statistics on the supplied calibration data; "
    "they stand in for task accuracy and perplexity, which are not measured.";

nlohmann::json layer_report_to_json(const LayerReport& r);
// Wall time is emitted only when include_timing is set, so reports stay reproducible.
std::string report_to_json(const QuantReport& report, bool include_timing = false);

struct QuantizeOptions {
  unsigned threads = 1;  // 0 = hardware concurrency; layer-parallel only under fias
  bool keep_hessians = false;
  bool keep_salience = false;
};

struct QuantizeResult {
  PackedModel packed;
  QuantReport report;
  std::vector<HessianState> hessians;  // filled when keep_hessians
  std::vector<SalienceMaps> salience;  // filled when keep_salience
  std::vector<SalienceMask> masks;
  CalibrationRecord calibration;
};

QuantizeResult quantize_model(const Model& model, const MatrixF& inputs, const QuantConfig& config,
                              const QuantizeOptions& options = {});

// Layer-level parallelism is allowed only when supervision is fias.
bool layer_parallel_allowed(const QuantConfig& config);

}  // namespace squeeze10
