#include "squeeze10/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <json.hpp>

#include "squeeze10/error.hpp"

namespace squeeze10 {

using nlohmann::json;

OutputError layer_output_error(const MatrixF& w, const MatrixF& w_hat, const MatrixF& x) {
  if (w.rows() != w_hat.rows() || w.cols() != w_hat.cols() || x.cols() != w.cols())
    throw Error(ErrorCode::DimensionMismatch, "layer_output_error: inconsistent shapes");
  OutputError e;
  if (x.rows() == 0) return e;
  double sum = 0.0;
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const auto xr = x.row(t);
    for (std::size_t o = 0; o < w.rows(); ++o) {
      double y = 0.0;
      double y_hat = 0.0;
      for (std::size_t j = 0; j < xr.size(); ++j) {
        y += static_cast<double>(xr[j]) * static_cast<double>(w(o, j));
        y_hat += static_cast<double>(xr[j]) * static_cast<double>(w_hat(o, j));
      }
      const double d = y - y_hat;
      sum += d * d;
      e.max_abs = std::max(e.max_abs, std::abs(d));
    }
  }
  e.mse = sum / static_cast<double>(x.rows() * w.rows());
  return e;
}

namespace {

std::vector<double> histogram_mass(std::span<const float> sample, double lo, double hi, const HistogramSpec& spec) {
  std::vector<double> counts(spec.bin_count, 0.0);
  const double width = hi - lo;
  const auto last = static_cast<double>(spec.bin_count - 1);
  for (float v : sample) {
    double pos = width > 0.0 ? (static_cast<double>(v) - lo) / width * static_cast<double>(spec.bin_count) : 0.0;
    pos = std::clamp(std::floor(pos), 0.0, last);
    counts[static_cast<std::size_t>(pos)] += 1.0;
  }
  double total = 0.0;
  for (double& c : counts) {
    c = c / static_cast<double>(sample.size()) + spec.smoothing;
    total += c;
  }
  for (double& c : counts) c /= total;
  return counts;
}

}  // namespace

double activation_kl(std::span<const float> sample_fp, std::span<const float> sample_q, const HistogramSpec& spec) {
  if (sample_fp.empty() || sample_q.empty()) throw Error(ErrorCode::EmptySample, "KL needs two non-empty samples");
  if (spec.bin_count == 0) throw Error(ErrorCode::InvalidConfig, "histogram needs at least one bin");
  if (spec.smoothing < 0.0) throw Error(ErrorCode::InvalidConfig, "histogram smoothing must be >= 0");
  double lo = 0.0;
  double hi = 0.0;
  if (spec.range) {
    lo = spec.range->min;
    hi = spec.range->max;
    if (!(hi >= lo)) throw Error(ErrorCode::InvalidConfig, "histogram range max < min");
  } else {
    const auto [a_lo, a_hi] = std::minmax_element(sample_fp.begin(), sample_fp.end());
    const auto [b_lo, b_hi] = std::minmax_element(sample_q.begin(), sample_q.end());
    lo = std::min<double>(*a_lo, *b_lo);
    hi = std::max<double>(*a_hi, *b_hi);
  }
  const auto p = histogram_mass(sample_fp, lo, hi, spec);
  const auto q = histogram_mass(sample_q, lo, hi, spec);
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) kl += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(kl, 0.0);
}

double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

std::vector<ChannelStats> range_stats(const MatrixF& y, double iqr_multiplier) {
  std::vector<ChannelStats> out;
  if (y.rows() == 0) return out;
  std::vector<double> col(y.rows());
  for (std::size_t c = 0; c < y.cols(); ++c) {
    for (std::size_t t = 0; t < y.rows(); ++t) col[t] = y(t, c);
    std::sort(col.begin(), col.end());
    ChannelStats s;
    s.channel = c;
    s.min = col.front();
    s.max = col.back();
    s.range = s.max - s.min;
    const double median = quantile_sorted(col, 0.5);
    const double iqr = quantile_sorted(col, 0.75) - quantile_sorted(col, 0.25);
    s.outlier_count = static_cast<std::size_t>(
        std::count_if(col.begin(), col.end(), [&](double v) { return std::abs(v - median) > iqr_multiplier * iqr; }));
    out.push_back(s);
  }
  return out;
}

std::string range_stats_csv(const std::vector<ChannelStats>& stats) {
  std::string out = "channel,min,max,range,outlier_count\n";
  for (const auto& s : stats) out += fmt::format("{},{},{},{},{}\n", s.channel, s.min, s.max, s.range, s.outlier_count);
  return out;
}

std::string_view to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::intermediate_bits: return "intermediate_bits";
    case SweepAxis::salient_ratio: return "salient_ratio";
    case SweepAxis::lambda: return "lambda";
  }
  return "unknown";
}

MatrixF layer_output(const Model& model, const MatrixF& inputs, std::size_t layer) {
  if (layer >= model.layers.size()) throw Error(ErrorCode::DimensionMismatch, "layer index past end of model");
  MatrixF x = inputs;
  for (std::size_t l = 0; l <= layer; ++l) x = apply_layer(x, model.layers[l].weight, model.layers[l].nonlinearity);
  return x;
}

double final_output_mse(const Model& reference, const Model& quantized, const MatrixF& inputs) {
  const MatrixF y = forward(reference, inputs);
  const MatrixF y_hat = forward(quantized, inputs);
  double sum = 0.0;
  for (std::size_t k = 0; k < y.size(); ++k) {
    const double d = static_cast<double>(y.data()[k]) - static_cast<double>(y_hat.data()[k]);
    sum += d * d;
  }
  return y.size() == 0 ? 0.0 : sum / static_cast<double>(y.size());
}

namespace {

struct PointRun {
  SweepPoint point;
  QuantizeResult result;
};

PointRun run_point(const Model& model, const MatrixF& inputs, const QuantConfig& config, double setting,
                   std::size_t kl_layer, const SweepOptions& options) {
  QuantizeOptions qopts;
  qopts.threads = options.threads;
  PointRun run;
  run.result = quantize_model(model, inputs, config, qopts);
  const Model q = dequantized_model(model, run.result.packed);

  SweepPoint& p = run.point;
  p.setting = setting;
  std::uint64_t num = 0;
  std::uint64_t den = 0;
  for (const auto& lr : run.result.report.layers) {
    p.layer_mse.push_back(lr.mse);
    num += lr.bits.payload_numerator;
    den += lr.bits.element_count;
  }
  p.mean_bits = static_cast<double>(num) / static_cast<double>(den);
  p.final_mse = final_output_mse(model, q, inputs);
  const MatrixF y_fp = layer_output(model, inputs, kl_layer);
  const MatrixF y_q = layer_output(q, inputs, kl_layer);
  p.kl = activation_kl(y_fp.data(), y_q.data(), options.histogram);
  for (const auto& m : run.result.masks) p.masks.push_back(m.mask);
  return run;
}

std::size_t resolve_kl_layer(const Model& model, const SweepOptions& options) {
  if (model.layers.empty()) throw Error(ErrorCode::InvalidConfig, "model has no layers");
  const std::size_t layer = options.kl_layer.value_or(model.layers.size() - 1);
  if (layer >= model.layers.size()) throw Error(ErrorCode::DimensionMismatch, "KL layer index past end of model");
  return layer;
}

template <typename T, typename Apply>
SweepResult run_sweep(SweepAxis axis, const Model& model, const MatrixF& inputs, const QuantConfig& config,
                      std::vector<T> settings, const SweepOptions& options, Apply apply) {
  std::stable_sort(settings.begin(), settings.end());
  SweepResult res;
  res.axis = axis;
  res.config = config;
  res.kl_layer = resolve_kl_layer(model, options);
  for (T s : settings) {
    QuantConfig c = config;
    apply(c, s);
    c.validate();
    res.points.push_back(run_point(model, inputs, c, static_cast<double>(s), res.kl_layer, options).point);
  }
  return res;
}

}  // namespace

SweepResult sweep_bits(const Model& model, const MatrixF& inputs, const QuantConfig& config, std::vector<int> k_list,
                       const SweepOptions& options) {
  for (int k : k_list)
    if (k < 2 || k > 8) throw Error(ErrorCode::BadBits, "intermediate bits must be in [2, 8]");
  return run_sweep(SweepAxis::intermediate_bits, model, inputs, config, std::move(k_list), options,
                   [](QuantConfig& c, int k) { c.high_bits = k; });
}

SweepResult sweep_ratio(const Model& model, const MatrixF& inputs, const QuantConfig& config,
                        std::vector<double> ratios, const SweepOptions& options) {
  for (double r : ratios)
    if (!(r >= 0.0 && r <= 1.0)) throw Error(ErrorCode::InvalidConfig, "ratios must be in [0, 1]");
  return run_sweep(SweepAxis::salient_ratio, model, inputs, config, std::move(ratios), options,
                   [](QuantConfig& c, double r) { c.salient_ratio = r; });
}

SweepResult sweep_lambda(const Model& model, const MatrixF& inputs, const QuantConfig& config,
                         std::vector<double> lambdas, const SweepOptions& options) {
  for (double l : lambdas)
    if (!(l >= 0.0)) throw Error(ErrorCode::InvalidConfig, "lambdas must be >= 0");
  SweepResult res = run_sweep(SweepAxis::lambda, model, inputs, config, std::move(lambdas), options,
                              [](QuantConfig& c, double l) { c.lambda = l; });
  QuantConfig base = config;
  base.lambda = 0.0;
  QuantizeOptions qopts;
  qopts.threads = options.threads;
  const QuantizeResult reference = quantize_model(model, inputs, base, qopts);
  for (auto& p : res.points) {
    for (std::size_t l = 0; l < p.masks.size(); ++l) {
      const auto& a = p.masks[l];
      const auto& b = reference.masks[l].mask;
      std::size_t d = 0;
      for (std::size_t k = 0; k < a.size(); ++k) d += a[k] != b[k] ? 1 : 0;
      p.hamming.push_back(d);
    }
  }
  return res;
}

std::string sweep_to_json(const SweepResult& result) {
  json points = json::array();
  for (const auto& p : result.points) {
    json jp = {{"setting", p.setting},
               {"final_mse", p.final_mse},
               {"mean_bits", p.mean_bits},
               {"kl", p.kl},
               {"layer_mse", p.layer_mse}};
    if (result.axis == SweepAxis::lambda) jp["hamming_from_lambda0"] = p.hamming;
    points.push_back(std::move(jp));
  }
  json j = {{"note", kReportNote},
            {"axis", to_string(result.axis)},
            {"config", config_to_json(result.config)},
            {"kl_layer", result.kl_layer},
            {"points", points}};
  return j.dump(2) + "\n";
}

std::string sweep_to_csv(const SweepResult& result) {
  std::string out = "setting,layer,metric,value\n";
  for (const auto& p : result.points) {
    out += fmt::format("{},all,final_mse,{}\n", p.setting, p.final_mse);
    out += fmt::format("{},all,mean_bits,{}\n", p.setting, p.mean_bits);
    out += fmt::format("{},{},kl,{}\n", p.setting, result.kl_layer, p.kl);
    for (std::size_t l = 0; l < p.layer_mse.size(); ++l) out += fmt::format("{},{},mse,{}\n", p.setting, l, p.layer_mse[l]);
    for (std::size_t l = 0; l < p.hamming.size(); ++l)
      out += fmt::format("{},{},hamming_from_lambda0,{}\n", p.setting, l, p.hamming[l]);
  }
  return out;
}

SupervisionComparison compare_supervision(const Model& model, const MatrixF& inputs, const QuantConfig& config,
                                          unsigned threads) {
  QuantConfig fias = config;
  fias.supervision = Supervision::fias;
  QuantConfig general = config;
  general.supervision = Supervision::general;
  QuantizeOptions qopts;
  qopts.threads = threads;
  const QuantizeResult rf = quantize_model(model, inputs, fias, qopts);
  const QuantizeResult rg = quantize_model(model, inputs, general, qopts);

  SupervisionComparison cmp;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const MatrixF& a = rf.calibration.inputs[l];
    const MatrixF& b = rg.calibration.inputs[l];
    double sum = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      const double d = static_cast<double>(a.data()[k]) - static_cast<double>(b.data()[k]);
      sum += d * d;
    }
    cmp.activation_drift.push_back(std::sqrt(sum));
    cmp.fias_layer_mse.push_back(rf.report.layers[l].mse);
    cmp.general_layer_mse.push_back(rg.report.layers[l].mse);
  }
  cmp.fias_final_mse = final_output_mse(model, dequantized_model(model, rf.packed), inputs);
  cmp.general_final_mse = final_output_mse(model, dequantized_model(model, rg.packed), inputs);
  return cmp;
}

std::string comparison_to_json(const SupervisionComparison& cmp, const QuantConfig& config) {
  json layers = json::array();
  for (std::size_t l = 0; l < cmp.activation_drift.size(); ++l) {
    layers.push_back({{"layer", l},
                      {"activation_drift", cmp.activation_drift[l]},
                      {"fias_mse", cmp.fias_layer_mse[l]},
                      {"general_mse", cmp.general_layer_mse[l]}});
  }
  json j = {{"note", kReportNote},
            {"config", config_to_json(config)},
            {"layers", layers},
            {"fias_final_mse", cmp.fias_final_mse},
            {"general_final_mse", cmp.general_final_mse}};
  return j.dump(2) + "\n";
}

}  // namespace squeeze10
