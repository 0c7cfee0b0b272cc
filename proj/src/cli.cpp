#include "squeeze10/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <map>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "squeeze10/error.hpp"
#include "squeeze10/eval.hpp"
#include "squeeze10/packed_model.hpp"
#include "squeeze10/pipeline.hpp"
#include "squeeze10/synthetic.hpp"
#include "squeeze10/tensor_store.hpp"

namespace squeeze10 {

namespace fs = std::filesystem;
using nlohmann::json;

void init_logging() {
  static std::once_flag once;
  std::call_once(once, [] {
    auto logger = spdlog::stderr_color_mt("squeeze10");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%l] %v");
  });
  const char* env = std::getenv("SQUEEZE_LOG");
  const std::string level = env ? env : "error";
  if (level == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else if (level == "info") {
    spdlog::set_level(spdlog::level::info);
  } else {
    spdlog::set_level(spdlog::level::err);
  }
}

namespace {

// Flags shared by every command that runs the quantizer.
struct QuantFlags {
  int high_bits = 4;
  double ratio = 0.2;
  double lambda = kDefaultLambda;
  std::string supervision = "fias";
  std::string binarize = "scaled";
  bool compensate = false;
  double damping = kDefaultDampingFraction;
  std::string range_mode = "raw";
  std::string granularity = "per-row";
  unsigned threads = 1;

  void add_to(CLI::App& cmd) {
    cmd.add_option("--high-bits", high_bits, "Bits for salient weights")->check(CLI::Range(2, 8))->capture_default_str();
    cmd.add_option("--ratio", ratio, "Fraction of weights kept at high bits")->check(CLI::Range(0.0, 1.0))->capture_default_str();
    cmd.add_option("--lambda", lambda, "Weight of the activation-range term")->check(CLI::NonNegativeNumber)->capture_default_str();
    cmd.add_option("--supervision", supervision, "Calibration activations: fias or general")
        ->check(CLI::IsMember({"fias", "general"}))->capture_default_str();
    cmd.add_option("--binarize", binarize, "Binarization: scaled or bare")
        ->check(CLI::IsMember({"scaled", "bare"}))->capture_default_str();
    cmd.add_flag("--compensate", compensate, "Column-wise error compensation");
    cmd.add_option("--damping", damping, "Hessian damping fraction")->check(CLI::NonNegativeNumber)->capture_default_str();
    cmd.add_option("--range-mode", range_mode, "Activation range: raw or absolute")
        ->check(CLI::IsMember({"raw", "absolute"}))->capture_default_str();
    cmd.add_option("--granularity", granularity, "Quantization parameters: per-row or per-layer")
        ->check(CLI::IsMember({"per-row", "per-layer"}))->capture_default_str();
    cmd.add_option("--threads", threads, "Worker threads, 0 = auto")->capture_default_str();
  }

  QuantConfig config() const {
    QuantConfig c;
    c.high_bits = high_bits;
    c.salient_ratio = ratio;
    c.lambda = lambda;
    c.supervision = supervision == "general" ? Supervision::general : Supervision::fias;
    c.binarize = binarize == "bare" ? BinarizeMode::bare_sign : BinarizeMode::scaled_sign;
    c.compensate = compensate;
    c.damping_fraction = damping;
    c.range_mode = range_mode == "absolute" ? RangeMode::absolute : RangeMode::raw;
    c.granularity = granularity == "per-layer" ? Granularity::per_layer : Granularity::per_row;
    c.validate();
    return c;
  }
};

struct ModelFlags {
  std::string model;
  std::string spec;
  std::string calib;
  std::string calib_tensor;

  void add_to(CLI::App& cmd) {
    cmd.add_option("--model", model, "S10T container with the weights")->required();
    cmd.add_option("--spec", spec, "ModelSpec JSON")->required();
    cmd.add_option("--calib", calib, "S10T container with calibration inputs")->required();
    cmd.add_option("--calib-tensor", calib_tensor, "Tensor name in --calib (default: the only tensor, or 'inputs')");
  }

  std::pair<Model, MatrixF> load() const {
    const TensorContainer weights = load_container(model);
    const ModelSpec ms = load_model_spec(spec);
    Model m = build_model(ms, weights);
    const TensorContainer cal = load_container(calib);
    std::string name = calib_tensor;
    if (name.empty()) name = cal.tensors.size() == 1 ? cal.tensors.begin()->first : "inputs";
    if (!cal.contains(name)) throw Error(ErrorCode::ShapeMismatch, "calibration tensor '" + name + "' not found");
    return {std::move(m), cal.at(name).values};
  }
};

void write_text(const fs::path& path, const std::string& text) {
  write_file_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

fs::path sibling(const fs::path& path, const std::string& suffix) {
  fs::path p = path;
  p.replace_extension();
  p += suffix;
  return p;
}

std::string fmt_bits(double v) { return fmt::format("{:.2f}", v); }

json inspect_container(const TensorContainer& c) {
  json tensors = json::array();
  for (const auto& [name, t] : c.tensors) tensors.push_back({{"name", name}, {"shape", t.shape()}});
  return {{"format", "S10T"}, {"version", c.manifest.version}, {"tensor_count", c.tensors.size()}, {"tensors", tensors}};
}

json inspect_packed(const PackedModel& m) {
  json layers = json::array();
  std::uint64_t num = 0;
  std::uint64_t den = 0;
  for (const auto& l : m.layers) {
    const MeanBits mb = mean_bits(l);
    num += mb.payload_numerator;
    den += mb.element_count;
    layers.push_back({{"name", l.name},
                      {"d_out", l.d_out},
                      {"d_in", l.d_in},
                      {"high_bits", l.code_bits()},
                      {"mean_payload_bits", mb.payload_bits},
                      {"mask_plus_payload_bits", mb.mask_plus_payload()},
                      {"total_bits", mb.total_bits},
                      {"salient_count", l.salient_count()},
                      {"mask_ratio", static_cast<double>(l.salient_count()) / static_cast<double>(l.element_count())},
                      {"binarize", to_string(l.row_bin.front().mode)},
                      {"ratio", l.echo.ratio},
                      {"lambda", l.echo.lambda},
                      {"granularity", l.echo.per_layer_params ? "per-layer" : "per-row"}});
  }
  json j = {{"format", "S10P"}, {"layer_count", m.layers.size()}, {"layers", layers}};
  if (den > 0) j["mean_payload_bits"] = static_cast<double>(num) / static_cast<double>(den);
  return j;
}

std::string inspect_text(const json& j) {
  std::string s;
  if (j["format"] == "S10T") {
    s += fmt::format("S10T container: {} tensors\n", j["tensor_count"].get<std::size_t>());
    for (const auto& t : j["tensors"]) {
      const auto shape = t["shape"].get<std::vector<std::size_t>>();
      s += fmt::format("  {}: {}x{}\n", t["name"].get<std::string>(), shape[0], shape[1]);
    }
    return s;
  }
  s += fmt::format("S10P packed model: {} layers\n", j["layer_count"].get<std::size_t>());
  for (const auto& l : j["layers"]) {
    s += fmt::format(
        "  {}: {}x{}, high bits {}, mean payload bits {}, mask+payload {}, total {}, mask ratio {:.4f}, "
        "binarize {}, ratio {}, lambda {}, {}\n",
        l["name"].get<std::string>(), l["d_out"].get<std::size_t>(), l["d_in"].get<std::size_t>(),
        l["high_bits"].get<int>(), fmt_bits(l["mean_payload_bits"].get<double>()),
        fmt_bits(l["mask_plus_payload_bits"].get<double>()), fmt_bits(l["total_bits"].get<double>()),
        l["mask_ratio"].get<double>(), l["binarize"].get<std::string>(), l["ratio"].get<float>(),
        l["lambda"].get<float>(), l["granularity"].get<std::string>());
  }
  if (j.contains("mean_payload_bits")) s += fmt::format("model mean payload bits {}\n", fmt_bits(j["mean_payload_bits"].get<double>()));
  return s;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  init_logging();
  CLI::App app{"squeeze10: staged mixed-precision weight quantization", "squeeze10"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "Seed for every random draw")->capture_default_str();

  QuantFlags qf;
  ModelFlags mf;

  auto* quantize = app.add_subcommand("quantize", "Quantize a model to the S10P format");
  std::string q_out;
  std::string q_report;
  std::string q_salience;
  bool q_timing = false;
  mf.add_to(*quantize);
  qf.add_to(*quantize);
  quantize->add_option("--out", q_out, "Output S10P path")->required();
  quantize->add_option("--report", q_report, "Report JSON path (default: <out stem>.report.json)");
  quantize->add_option("--export-salience", q_salience, "Write V/B/M maps to this S10T path");
  quantize->add_flag("--report-timing", q_timing, "Include wall time in the report");
  quantize->add_option("--seed", seed, "Seed for every random draw")->capture_default_str();

  auto* dequantize = app.add_subcommand("dequantize", "Unpack an S10P model into dense S10T weights");
  std::string dq_in;
  std::string dq_out;
  dequantize->add_option("--in", dq_in, "Input S10P path")->required();
  dequantize->add_option("--out", dq_out, "Output S10T path")->required();

  auto* inspect = app.add_subcommand("inspect", "Summarize an S10T or S10P file");
  std::string in_path;
  std::string in_format = "text";
  inspect->add_option("path", in_path, "File to inspect")->required();
  inspect->add_option("--format", in_format, "text or json")->check(CLI::IsMember({"text", "json"}))->capture_default_str();

  std::string sw_out;
  std::string sw_csv;
  std::optional<std::size_t> sw_kl_layer;
  std::size_t sw_bins = 256;
  auto add_sweep_io = [&](CLI::App* cmd) {
    mf.add_to(*cmd);
    qf.add_to(*cmd);
    cmd->add_option("--out", sw_out, "Sweep report JSON path")->required();
    cmd->add_option("--csv", sw_csv, "Plot-ready CSV path (default: <out stem>.csv)");
    cmd->add_option("--kl-layer", sw_kl_layer, "Layer whose output is compared by KL (default: last)");
    cmd->add_option("--bins", sw_bins, "Histogram bins for KL")->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--seed", seed, "Seed for every random draw")->capture_default_str();
  };

  auto* sweep_bits_cmd = app.add_subcommand("sweep-bits", "Sweep the intermediate bit width");
  std::vector<int> bits_list{2, 3, 4, 5, 6, 7, 8};
  add_sweep_io(sweep_bits_cmd);
  sweep_bits_cmd->add_option("--bits", bits_list, "Comma-separated bit widths")->delimiter(',')->check(CLI::Range(2, 8));

  auto* sweep_ratio_cmd = app.add_subcommand("sweep-ratio", "Sweep the salient ratio");
  std::vector<double> ratio_list{0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  add_sweep_io(sweep_ratio_cmd);
  sweep_ratio_cmd->add_option("--ratios", ratio_list, "Comma-separated ratios")->delimiter(',')->check(CLI::Range(0.0, 1.0));

  auto* sweep_lambda_cmd = app.add_subcommand("sweep-lambda", "Sweep lambda");
  std::vector<double> lambda_list{1e-2, 1e-3, 3e-4, 1e-4, 1e-5};
  add_sweep_io(sweep_lambda_cmd);
  sweep_lambda_cmd->add_option("--lambdas", lambda_list, "Comma-separated lambdas")->delimiter(',')->check(CLI::NonNegativeNumber);

  auto* compare = app.add_subcommand("compare-supervision", "Quantize with fias and general supervision and compare");
  std::string cmp_out;
  mf.add_to(*compare);
  qf.add_to(*compare);
  compare->add_option("--out", cmp_out, "Comparison report JSON path")->required();
  compare->add_option("--seed", seed, "Seed for every random draw")->capture_default_str();

  auto* kl = app.add_subcommand("kl-report", "Per-layer activation KL and range statistics of a packed model");
  std::string kl_packed;
  std::string kl_out;
  std::string kl_csv;
  std::size_t kl_bins = 256;
  mf.add_to(*kl);
  kl->add_option("--packed", kl_packed, "S10P model")->required();
  kl->add_option("--out", kl_out, "Report JSON path")->required();
  kl->add_option("--csv", kl_csv, "Per-channel range CSV path (default: <out stem>.ranges.csv)");
  kl->add_option("--bins", kl_bins, "Histogram bins")->check(CLI::PositiveNumber)->capture_default_str();

  auto* synth = app.add_subcommand("synth", "Write a seeded synthetic layer stack");
  std::string syn_dir;
  SyntheticStackSpec syn;
  synth->add_option("--out-dir", syn_dir, "Directory for model.s10t, model.json, calib.s10t")->required();
  synth->add_option("--layers", syn.layers, "Layer count")->check(CLI::PositiveNumber)->capture_default_str();
  synth->add_option("--width", syn.width, "Layer width")->check(CLI::PositiveNumber)->capture_default_str();
  synth->add_option("--tokens", syn.tokens, "Calibration tokens")->check(CLI::PositiveNumber)->capture_default_str();
  synth->add_option("--seed", seed, "Seed for every random draw")->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return kExitUsage;
  }

  try {
    if (quantize->parsed()) {
      const QuantConfig config = qf.config();
      auto [model, inputs] = mf.load();
      QuantizeOptions opts;
      opts.threads = qf.threads;
      opts.keep_salience = !q_salience.empty();
      spdlog::info("quantizing {} layers, seed {}", model.layers.size(), seed);
      const QuantizeResult res = quantize_model(model, inputs, config, opts);
      spdlog::info("quantized in {:.3f} s", res.report.wall_time_s);
      const fs::path report = q_report.empty() ? sibling(q_out, ".report.json") : fs::path(q_report);
      save_packed_model(res.packed, q_out);
      write_text(report, report_to_json(res.report, q_timing));
      if (!q_salience.empty()) {
        TensorContainer maps;
        for (std::size_t l = 0; l < res.salience.size(); ++l) export_salience(res.salience[l], model.layers[l].name, maps);
        save_container(maps, q_salience);
      }
      out << fmt::format("wrote {} and {}\n", q_out, report.string());
    } else if (dequantize->parsed()) {
      const PackedModel pm = load_packed_model(dq_in);
      TensorContainer dense;
      for (const auto& l : pm.layers) dense.put(l.name, unpack_mixed(l));
      save_container(dense, dq_out);
      out << fmt::format("wrote {} ({} tensors)\n", dq_out, dense.tensors.size());
    } else if (inspect->parsed()) {
      const auto bytes = read_file(in_path);
      json summary;
      if (bytes.size() >= 4 && std::equal(bytes.begin(), bytes.begin() + 4, kContainerMagic)) {
        summary = inspect_container(decode_container(bytes));
      } else if (bytes.size() >= 4 && std::equal(bytes.begin(), bytes.begin() + 4, kPackedMagic)) {
        summary = inspect_packed(decode_packed_model(bytes));
      } else {
        throw Error(ErrorCode::MagicMismatch, "'" + in_path + "' is neither S10T nor S10P");
      }
      out << (in_format == "json" ? summary.dump(2) + "\n" : inspect_text(summary));
    } else if (sweep_bits_cmd->parsed() || sweep_ratio_cmd->parsed() || sweep_lambda_cmd->parsed()) {
      const QuantConfig config = qf.config();
      auto [model, inputs] = mf.load();
      SweepOptions so;
      so.kl_layer = sw_kl_layer;
      so.histogram.bin_count = sw_bins;
      so.threads = qf.threads;
      SweepResult res;
      if (sweep_bits_cmd->parsed()) {
        res = sweep_bits(model, inputs, config, bits_list, so);
      } else if (sweep_ratio_cmd->parsed()) {
        res = sweep_ratio(model, inputs, config, ratio_list, so);
      } else {
        res = sweep_lambda(model, inputs, config, lambda_list, so);
      }
      const fs::path csv = sw_csv.empty() ? sibling(sw_out, ".csv") : fs::path(sw_csv);
      write_text(sw_out, sweep_to_json(res));
      write_text(csv, sweep_to_csv(res));
      out << fmt::format("wrote {} and {} ({} points)\n", sw_out, csv.string(), res.points.size());
    } else if (compare->parsed()) {
      const QuantConfig config = qf.config();
      auto [model, inputs] = mf.load();
      const SupervisionComparison cmp = compare_supervision(model, inputs, config, qf.threads);
      write_text(cmp_out, comparison_to_json(cmp, config));
      out << fmt::format("fias final mse {}, general final mse {}\nwrote {}\n", cmp.fias_final_mse,
                         cmp.general_final_mse, cmp_out);
    } else if (kl->parsed()) {
      auto [model, inputs] = mf.load();
      const PackedModel pm = load_packed_model(kl_packed);
      const Model q = dequantized_model(model, pm);
      HistogramSpec hs;
      hs.bin_count = kl_bins;
      json layers = json::array();
      std::string csv = "layer,channel,min,max,range,outlier_count\n";
      MatrixF x_fp = inputs;
      MatrixF x_q = inputs;
      for (std::size_t l = 0; l < model.layers.size(); ++l) {
        x_fp = apply_layer(x_fp, model.layers[l].weight, model.layers[l].nonlinearity);
        x_q = apply_layer(x_q, q.layers[l].weight, q.layers[l].nonlinearity);
        const double d = activation_kl(x_fp.data(), x_q.data(), hs);
        const auto stats = range_stats(x_q);
        std::size_t outliers = 0;
        for (const auto& s : stats) {
          outliers += s.outlier_count;
          csv += fmt::format("{},{},{},{},{},{}\n", l, s.channel, s.min, s.max, s.range, s.outlier_count);
        }
        layers.push_back({{"layer", l}, {"name", model.layers[l].name}, {"kl", d}, {"outliers", outliers}});
      }
      const fs::path csv_path = kl_csv.empty() ? sibling(kl_out, ".ranges.csv") : fs::path(kl_csv);
      const json j = {{"note", kReportNote}, {"bins", kl_bins}, {"layers", layers}};
      write_text(kl_out, j.dump(2) + "\n");
      write_text(csv_path, csv);
      out << fmt::format("wrote {} and {}\n", kl_out, csv_path.string());
    } else if (synth->parsed()) {
      syn.seed = seed;
      const SyntheticStack stack = make_synthetic_stack(syn);
      const fs::path dir(syn_dir);
      fs::create_directories(dir);
      save_container(stack.weights, dir / "model.s10t");
      save_model_spec(stack.spec, dir / "model.json");
      TensorContainer cal;
      cal.put("inputs", stack.inputs);
      save_container(cal, dir / "calib.s10t");
      out << fmt::format("wrote {} layers of width {} to {}\n", syn.layers, syn.width, dir.string());
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace squeeze10
