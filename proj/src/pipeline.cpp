#include "squeeze10/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <thread>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "squeeze10/error.hpp"

namespace squeeze10 {

using nlohmann::json;

void QuantConfig::validate() const {
  if (high_bits < 2 || high_bits > 8) throw Error(ErrorCode::BadBits, "high bits must be in [2, 8]");
  if (!(salient_ratio >= 0.0 && salient_ratio <= 1.0))
    throw Error(ErrorCode::InvalidConfig, "salient ratio must be in [0, 1]");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw Error(ErrorCode::InvalidConfig, "lambda must be >= 0");
  if (!(damping_fraction >= 0.0) || !std::isfinite(damping_fraction))
    throw Error(ErrorCode::InvalidConfig, "damping fraction must be >= 0");
}

std::string_view to_string(Supervision s) { return s == Supervision::fias ? "fias" : "general"; }
std::string_view to_string(BinarizeMode m) { return m == BinarizeMode::scaled_sign ? "scaled" : "bare"; }
std::string_view to_string(RangeMode m) { return m == RangeMode::raw ? "raw" : "absolute"; }
std::string_view to_string(Granularity g) { return g == Granularity::per_row ? "per-row" : "per-layer"; }

json config_to_json(const QuantConfig& c) {
  return {{"high_bits", c.high_bits},
          {"salient_ratio", c.salient_ratio},
          {"lambda", c.lambda},
          {"supervision", to_string(c.supervision)},
          {"binarize", to_string(c.binarize)},
          {"compensate", c.compensate},
          {"damping", c.damping_fraction},
          {"range_mode", to_string(c.range_mode)},
          {"granularity", to_string(c.granularity)}};
}

Model build_model(const ModelSpec& spec, const TensorContainer& weights) {
  const auto diagnostics = validate_model(spec, weights);
  if (!diagnostics.empty()) {
    const auto code = diagnostics.front().kind == DiagnosticKind::MissingTensor ? ErrorCode::ShapeMismatch
                                                                                : ErrorCode::DimensionMismatch;
    throw Error(code, diagnostics.front().message);
  }
  if (spec.layers.empty()) throw Error(ErrorCode::InvalidConfig, "model spec has no layers");
  Model model;
  for (const auto& ls : spec.layers) {
    model.layers.push_back({ls.weight, weights.at(ls.weight).values, ls.nonlinearity});
  }
  return model;
}

MatrixF apply_layer(const MatrixF& x, const MatrixF& w, Nonlinearity nonlinearity) {
  if (x.cols() != w.cols())
    throw Error(ErrorCode::DimensionMismatch, "input has " + std::to_string(x.cols()) + " features, layer expects " +
                                                  std::to_string(w.cols()));
  MatrixF y(x.rows(), w.rows());
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const auto xr = x.row(t);
    for (std::size_t o = 0; o < w.rows(); ++o) {
      const auto wr = w.row(o);
      double acc = 0.0;
      for (std::size_t j = 0; j < xr.size(); ++j) acc += static_cast<double>(xr[j]) * static_cast<double>(wr[j]);
      if (nonlinearity == Nonlinearity::relu && acc < 0.0) acc = 0.0;
      y(t, o) = static_cast<float>(acc);
    }
  }
  return y;
}

MatrixF forward(const Model& model, const MatrixF& inputs) {
  MatrixF x = inputs;
  for (const auto& layer : model.layers) x = apply_layer(x, layer.weight, layer.nonlinearity);
  return x;
}

Model dequantized_model(const Model& model, const PackedModel& packed) {
  if (packed.layers.size() != model.layers.size())
    throw Error(ErrorCode::DimensionMismatch, "packed model has " + std::to_string(packed.layers.size()) +
                                                  " layers, model has " + std::to_string(model.layers.size()));
  Model out = model;
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    MatrixF w = unpack_mixed(packed.layers[l]);
    if (w.rows() != out.layers[l].weight.rows() || w.cols() != out.layers[l].weight.cols())
      throw Error(ErrorCode::DimensionMismatch, "packed layer '" + packed.layers[l].name + "' has a different shape");
    out.layers[l].weight = std::move(w);
  }
  return out;
}

namespace {

// FNV-1a, 64 bit.
class Fnv1a {
 public:
  void add(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      hash_ ^= p[i];
      hash_ *= 0x100000001b3ULL;
    }
  }
  void add(const MatrixF& m) {
    const std::uint64_t dims[2] = {m.rows(), m.cols()};
    add(dims, sizeof(dims));
    add(m.data().data(), m.size() * sizeof(float));
  }
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

std::uint64_t source_digest(const Model& model, const MatrixF& inputs) {
  Fnv1a h;
  for (const auto& layer : model.layers) {
    h.add(layer.name.data(), layer.name.size());
    const auto nl = static_cast<unsigned char>(layer.nonlinearity);
    h.add(&nl, 1);
    h.add(layer.weight);
  }
  h.add(inputs);
  return h.value();
}

}  // namespace

CalibrationRecord calibration_pass(const Model& model, const MatrixF& inputs, Supervision mode,
                                   std::span<const PackedLayer> prefix, std::optional<std::size_t> through_layer) {
  const std::size_t n_layers = model.layers.size();
  if (n_layers == 0) throw Error(ErrorCode::InvalidConfig, "model has no layers");
  if (inputs.cols() != model.layers.front().weight.cols())
    throw Error(ErrorCode::DimensionMismatch, "inputs have " + std::to_string(inputs.cols()) +
                                                  " features, first layer expects " +
                                                  std::to_string(model.layers.front().weight.cols()));
  CalibrationRecord rec;
  rec.mode = mode;
  rec.source_hash = source_digest(model, inputs);

  std::size_t last = n_layers - 1;
  if (mode == Supervision::general) {
    if (through_layer) {
      if (*through_layer >= n_layers) throw Error(ErrorCode::DimensionMismatch, "layer index past end of model");
      if (*through_layer > prefix.size())
        throw Error(ErrorCode::MissingPrefix, "general supervision needs " + std::to_string(*through_layer) +
                                                  " packed layers, got " + std::to_string(prefix.size()));
      last = *through_layer;
    } else {
      last = std::min(prefix.size(), n_layers - 1);
    }
  } else if (through_layer) {
    if (*through_layer >= n_layers) throw Error(ErrorCode::DimensionMismatch, "layer index past end of model");
    last = *through_layer;
  }

  rec.inputs.reserve(last + 1);
  rec.inputs.push_back(inputs);
  for (std::size_t l = 0; l < last; ++l) {
    const Layer& layer = model.layers[l];
    if (mode == Supervision::general) {
      const MatrixF w = unpack_mixed(prefix[l]);
      if (w.rows() != layer.weight.rows() || w.cols() != layer.weight.cols())
        throw Error(ErrorCode::DimensionMismatch, "packed prefix layer " + std::to_string(l) + " has a different shape");
      rec.inputs.push_back(apply_layer(rec.inputs.back(), w, layer.nonlinearity));
    } else {
      rec.inputs.push_back(apply_layer(rec.inputs.back(), layer.weight, layer.nonlinearity));
    }
  }
  return rec;
}

CompensationFactor compensation_factor(const MatrixD& hinv) {
  const auto d = static_cast<Eigen::Index>(hinv.rows());
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> a(hinv.data().data(), d, d);
  Eigen::LLT<Eigen::MatrixXd> llt{Eigen::MatrixXd(a)};
  if (llt.info() != Eigen::Success) throw Error(ErrorCode::ZeroPivot, "inverse Hessian is not positive definite");
  const Eigen::MatrixXd l = llt.matrixL();
  CompensationFactor f;
  f.upper = MatrixD(hinv.rows(), hinv.cols());
  for (Eigen::Index r = 0; r < d; ++r)
    for (Eigen::Index c = r; c < d; ++c) f.upper(r, c) = l(c, r);
  return f;
}

CompensatedRow gptq_compensate(std::span<const float> row, const CompensationFactor& factor,
                               const ColumnQuantizer& quantize_column) {
  const std::size_t n = row.size();
  if (factor.upper.rows() != n) throw Error(ErrorCode::DimensionMismatch, "compensation factor size differs from row");
  std::vector<double> w(row.begin(), row.end());
  CompensatedRow out;
  out.adjusted.resize(n);
  out.quantized.resize(n);
  for (std::size_t q = 0; q < n; ++q) {
    const double pivot = factor.upper(q, q);
    if (!(pivot > 0.0)) throw Error(ErrorCode::ZeroPivot, "pivot at column " + std::to_string(q) + " is not positive");
    const auto current = static_cast<float>(w[q]);
    const float stored = quantize_column(q, current);
    out.adjusted[q] = current;
    out.quantized[q] = stored;
    const double err = (static_cast<double>(current) - static_cast<double>(stored)) / pivot;
    for (std::size_t j = q + 1; j < n; ++j) w[j] -= err * factor.upper(q, j);
  }
  return out;
}

SummaryStats summarize(const MatrixD& m) {
  SummaryStats s;
  if (m.empty()) return s;
  const auto [lo, hi] = std::minmax_element(m.data().begin(), m.data().end());
  s.min = *lo;
  s.max = *hi;
  double sum = 0.0;
  for (double v : m.data()) sum += v;
  s.mean = sum / static_cast<double>(m.size());
  return s;
}

namespace {

// ||(W - W_hat) X^T||_F^2 / (N * d_out).
double output_mse(const MatrixF& w, const MatrixF& w_hat, const MatrixF& x) {
  double sum = 0.0;
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const auto xr = x.row(t);
    for (std::size_t o = 0; o < w.rows(); ++o) {
      double acc = 0.0;
      for (std::size_t j = 0; j < xr.size(); ++j)
        acc += static_cast<double>(xr[j]) * (static_cast<double>(w(o, j)) - static_cast<double>(w_hat(o, j)));
      sum += acc * acc;
    }
  }
  return sum / static_cast<double>(x.rows() * w.rows());
}

}  // namespace

LayerResult quantize_layer(const std::string& name, const MatrixF& w, const MatrixF& x, const QuantConfig& config) {
  config.validate();
  if (x.rows() == 0) throw Error(ErrorCode::DimensionMismatch, "layer '" + name + "': no calibration tokens");
  if (x.cols() != w.cols())
    throw Error(ErrorCode::DimensionMismatch, "layer '" + name + "': activations have " + std::to_string(x.cols()) +
                                                  " features, weight d_in is " + std::to_string(w.cols()));
  const std::size_t d_out = w.rows();
  const std::size_t d_in = w.cols();

  LayerResult res;

  // Stage 1: k-bit uniform quantization of every weight.
  std::vector<QuantParams> row_params(d_out);
  if (config.granularity == Granularity::per_layer) {
    std::fill(row_params.begin(), row_params.end(), compute_uniform_params(w.data(), config.high_bits));
  } else {
    for (std::size_t r = 0; r < d_out; ++r) row_params[r] = compute_uniform_params(w.row(r), config.high_bits);
  }
  Matrix<std::uint8_t> codes(d_out, d_in);
  res.stage1 = MatrixF(d_out, d_in);
  for (std::size_t r = 0; r < d_out; ++r) {
    for (std::size_t c = 0; c < d_in; ++c) {
      codes(r, c) = quantize_value(w(r, c), row_params[r]);
      res.stage1(r, c) = dequantize_value(codes(r, c), row_params[r]);
    }
  }

  // Stage 2: salience on the k-bit weights.
  res.hessian = HessianState::zeros(d_in);
  accumulate_hessian(res.hessian, x);
  const HessianInverse hinv = invert_hessian(res.hessian, config.damping_fraction);
  res.hessian.damping_applied = hinv.damping;

  std::vector<float> probe_alpha(d_out, 1.0f);
  if (config.binarize == BinarizeMode::scaled_sign) {
    for (std::size_t r = 0; r < d_out; ++r) probe_alpha[r] = binarize_row(res.stage1.row(r), config.binarize).params.alpha;
  }
  const ElementBinarizer probe = [&](std::size_t r, std::size_t, float v) {
    return binarized_value(sign_code(v), BinParams{probe_alpha[r], config.binarize});
  };
  res.salience.v = compute_v(res.stage1, hinv.diag);
  res.salience.b = compute_b(res.stage1, x, probe, config.range_mode);
  res.salience.lambda_used = config.lambda;
  res.salience.m = combine_pbar(res.salience.v, res.salience.b, config.lambda);
  res.mask = select_salient(res.salience.m, config.salient_ratio);

  // Stage 3: binarize the non-salient k-bit weights.
  std::vector<BinParams> row_bin(d_out, BinParams{1.0f, config.binarize});
  if (config.binarize == BinarizeMode::scaled_sign) {
    for (std::size_t r = 0; r < d_out; ++r) {
      double sum = 0.0;
      std::size_t n = 0;
      for (std::size_t c = 0; c < d_in; ++c) {
        if (!res.mask.mask[r * d_in + c]) {
          sum += std::abs(static_cast<double>(res.stage1(r, c)));
          ++n;
        }
      }
      row_bin[r].alpha = n == 0 ? 0.0f : static_cast<float>(sum / static_cast<double>(n));
    }
  }

  std::vector<std::uint8_t> salient_codes;
  std::vector<std::int8_t> signs;
  salient_codes.reserve(res.mask.count_selected);
  signs.reserve(d_out * d_in - res.mask.count_selected);

  if (!config.compensate) {
    for (std::size_t r = 0; r < d_out; ++r) {
      for (std::size_t c = 0; c < d_in; ++c) {
        if (res.mask.mask[r * d_in + c]) {
          salient_codes.push_back(codes(r, c));
        } else {
          signs.push_back(sign_code(res.stage1(r, c)));
        }
      }
    }
  } else {
    const CompensationFactor factor = compensation_factor(hinv.inverse);
    for (std::size_t r = 0; r < d_out; ++r) {
      const QuantParams& p = row_params[r];
      const ColumnQuantizer quantize_column = [&](std::size_t c, float value) {
        const std::uint8_t code = quantize_value(value, p);
        const float staged = dequantize_value(code, p);
        if (res.mask.mask[r * d_in + c]) {
          salient_codes.push_back(code);
          return staged;
        }
        const std::int8_t s = sign_code(staged);
        signs.push_back(s);
        return binarized_value(s, row_bin[r]);
      };
      gptq_compensate(w.row(r), factor, quantize_column);
    }
  }

  ConfigEcho echo;
  echo.ratio = static_cast<float>(config.salient_ratio);
  echo.lambda = static_cast<float>(config.lambda);
  echo.per_layer_params = config.granularity == Granularity::per_layer;
  res.packed = pack_mixed(name, static_cast<std::uint32_t>(d_out), static_cast<std::uint32_t>(d_in), salient_codes,
                          signs, res.mask.mask, std::move(row_params), std::move(row_bin), echo);
  res.dequantized = unpack_mixed(res.packed);

  LayerReport& rep = res.report;
  rep.name = name;
  rep.d_out = d_out;
  rep.d_in = d_in;
  rep.bits = mean_bits(res.packed);
  rep.mse = output_mse(w, res.dequantized, x);
  rep.stage1_mse = output_mse(w, res.stage1, x);
  rep.salient_count = res.mask.count_selected;
  rep.v_stats = summarize(res.salience.v);
  rep.b_stats = summarize(res.salience.b);
  return res;
}

json layer_report_to_json(const LayerReport& r) {
  return {{"name", r.name},
          {"d_out", r.d_out},
          {"d_in", r.d_in},
          {"mean_bits", r.bits.payload_bits},
          {"total_bits", r.bits.total_bits},
          {"mse", r.mse},
          {"stage1_mse", r.stage1_mse},
          {"salient_count", r.salient_count},
          {"v_mean", r.v_stats.mean},
          {"v_max", r.v_stats.max},
          {"b_mean", r.b_stats.mean},
          {"b_max", r.b_stats.max}};
}

std::string report_to_json(const QuantReport& report, bool include_timing) {
  json layers = json::array();
  for (const auto& l : report.layers) layers.push_back(layer_report_to_json(l));
  json j = {{"note", kReportNote}, {"config", config_to_json(report.config)}, {"layers", layers}};
  if (include_timing) j["wall_time_s"] = report.wall_time_s;
  return j.dump(2) + "\n";
}

bool layer_parallel_allowed(const QuantConfig& config) { return config.supervision == Supervision::fias; }

QuantizeResult quantize_model(const Model& model, const MatrixF& inputs, const QuantConfig& config,
                              const QuantizeOptions& options) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const std::size_t n_layers = model.layers.size();
  std::vector<LayerResult> results(n_layers);
  QuantizeResult out;

  if (config.supervision == Supervision::fias) {
    out.calibration = calibration_pass(model, inputs, Supervision::fias);
    unsigned threads = options.threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : options.threads;
    threads = static_cast<unsigned>(std::min<std::size_t>(threads, n_layers));
    std::vector<std::exception_ptr> errors(n_layers);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t l = next++; l < n_layers; l = next++) {
        try {
          results[l] = quantize_layer(model.layers[l].name, model.layers[l].weight, out.calibration.inputs[l], config);
        } catch (...) {
          errors[l] = std::current_exception();
        }
      }
    };
    if (threads <= 1) {
      worker();
    } else {
      std::vector<std::jthread> pool;
      for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    }
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
  } else {
    if (inputs.cols() != model.layers.front().weight.cols())
      throw Error(ErrorCode::DimensionMismatch, "inputs do not match the first layer");
    out.calibration.mode = Supervision::general;
    out.calibration.source_hash = calibration_pass(model, inputs, Supervision::fias, {}, 0).source_hash;
    MatrixF x = inputs;
    for (std::size_t l = 0; l < n_layers; ++l) {
      const Layer& layer = model.layers[l];
      results[l] = quantize_layer(layer.name, layer.weight, x, config);
      out.calibration.inputs.push_back(x);
      if (l + 1 < n_layers) x = apply_layer(x, results[l].dequantized, layer.nonlinearity);
    }
  }

  for (auto& r : results) {
    out.packed.layers.push_back(std::move(r.packed));
    out.report.layers.push_back(std::move(r.report));
    out.masks.push_back(std::move(r.mask));
    if (options.keep_hessians) out.hessians.push_back(std::move(r.hessian));
    if (options.keep_salience) out.salience.push_back(std::move(r.salience));
  }
  out.report.config = config;
  out.report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace squeeze10
