#include "squeeze10/tensor_store.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <set>

#include <json.hpp>

#include "byte_io.hpp"
#include "squeeze10/error.hpp"

namespace squeeze10 {

using nlohmann::json;

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MagicMismatch: return "MagicMismatch";
    case ErrorCode::VersionUnsupported: return "VersionUnsupported";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::BadBits: return "BadBits";
    case ErrorCode::CodeOutOfRange: return "CodeOutOfRange";
    case ErrorCode::CountMismatch: return "CountMismatch";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::CorruptMask: return "CorruptMask";
    case ErrorCode::NonPositiveDiagonal: return "NonPositiveDiagonal";
    case ErrorCode::NotPositiveDefinite: return "NotPositiveDefinite";
    case ErrorCode::ZeroSamples: return "ZeroSamples";
    case ErrorCode::ZeroPivot: return "ZeroPivot";
    case ErrorCode::MissingPrefix: return "MissingPrefix";
    case ErrorCode::EmptySample: return "EmptySample";
    case ErrorCode::UnknownFormat: return "UnknownFormat";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

void TensorContainer::put(std::string name, MatrixF values) {
  Tensor t{name, std::move(values)};
  tensors.insert_or_assign(std::move(name), std::move(t));
}

const Tensor& TensorContainer::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw Error(ErrorCode::ShapeMismatch, "no tensor named '" + name + "'");
  return it->second;
}

namespace {

void check_finite(const Tensor& t) {
  for (float v : t.values.data()) {
    if (!std::isfinite(v))
      throw Error(ErrorCode::NonFiniteValue, "tensor '" + t.name + "' contains NaN or Inf");
  }
}

}  // namespace

std::vector<std::uint8_t> encode_container(const TensorContainer& container) {
  json header = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : container.tensors) {
    if (name.empty()) throw Error(ErrorCode::ShapeMismatch, "tensor with empty name");
    if (t.values.rows() == 0 || t.values.cols() == 0)
      throw Error(ErrorCode::ShapeMismatch, "tensor '" + name + "' has a zero dimension");
    check_finite(t);
    const std::uint64_t length = t.values.size() * sizeof(float);
    header.push_back({{"name", name},
                      {"shape", {t.values.rows(), t.values.cols()}},
                      {"offset", offset},
                      {"length", length}});
    offset += length;
  }
  const std::string header_text = header.dump();

  detail::ByteWriter w;
  w.bytes(kContainerMagic, 4);
  w.u16(kContainerVersion);
  w.u32(static_cast<std::uint32_t>(header_text.size()));
  w.str(header_text);
  for (const auto& [name, t] : container.tensors) {
    for (float v : t.values.data()) w.f32(v);
  }
  return std::move(w.buffer());
}

TensorContainer decode_container(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes.data(), bytes.size(), "S10T container");
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kContainerMagic, 4) != 0)
    throw Error(ErrorCode::MagicMismatch, "file does not start with \"S10T\"");
  r.take(4);
  const std::uint16_t version = r.u16();
  if (version != kContainerVersion)
    throw Error(ErrorCode::VersionUnsupported, "S10T version " + std::to_string(version));
  const std::uint32_t header_length = r.u32();
  const std::string header_text = r.take_str(header_length);

  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ShapeMismatch, std::string("malformed S10T header: ") + e.what());
  }
  if (!header.is_array()) throw Error(ErrorCode::ShapeMismatch, "S10T header is not an array");

  const std::size_t payload_start = r.position();
  const std::size_t payload_size = r.remaining();

  TensorContainer out;
  out.manifest.version = version;
  for (const auto& entry : header) {
    std::string name;
    std::vector<std::uint64_t> shape;
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
    try {
      name = entry.at("name").get<std::string>();
      shape = entry.at("shape").get<std::vector<std::uint64_t>>();
      offset = entry.at("offset").get<std::uint64_t>();
      length = entry.at("length").get<std::uint64_t>();
    } catch (const json::exception& e) {
      throw Error(ErrorCode::ShapeMismatch, std::string("malformed S10T header entry: ") + e.what());
    }
    if (name.empty()) throw Error(ErrorCode::ShapeMismatch, "tensor with empty name");
    if (out.contains(name)) throw Error(ErrorCode::ShapeMismatch, "duplicate tensor '" + name + "'");
    if (shape.size() != 2 || shape[0] == 0 || shape[1] == 0)
      throw Error(ErrorCode::ShapeMismatch, "tensor '" + name + "' must be 2-D with positive dims");
    const std::uint64_t count = shape[0] * shape[1];
    if (length != count * sizeof(float))
      throw Error(ErrorCode::ShapeMismatch,
                  "tensor '" + name + "': payload length " + std::to_string(length) +
                      " != product(shape)*4 = " + std::to_string(count * sizeof(float)));
    if (offset > payload_size || length > payload_size - offset)
      throw Error(ErrorCode::ShapeMismatch, "tensor '" + name + "' extends past end of file");

    detail::ByteReader body(bytes.data() + payload_start + offset, length, "tensor '" + name + "'");
    std::vector<float> data(count);
    for (auto& v : data) v = body.f32();
    Tensor t{name, MatrixF(shape[0], shape[1], std::move(data))};
    check_finite(t);
    out.tensors.emplace(name, std::move(t));
  }
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot write '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::IoFailure, "short write to '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error(ErrorCode::IoFailure, "cannot rename into '" + path.string() + "'");
  }
}

TensorContainer load_container(const std::filesystem::path& path) {
  return decode_container(read_file(path));
}

void save_container(const TensorContainer& container, const std::filesystem::path& path) {
  write_file_atomic(path, encode_container(container));
}

namespace {

std::string_view nonlinearity_name(Nonlinearity n) {
  return n == Nonlinearity::relu ? "relu" : "identity";
}

}  // namespace

ModelSpec parse_model_spec(const std::string& json_text) {
  ModelSpec spec;
  try {
    const json j = json::parse(json_text);
    for (const auto& layer : j.at("layers")) {
      LayerSpec ls;
      ls.weight = layer.at("weight").get<std::string>();
      const std::string nl = layer.value("nonlinearity", "identity");
      if (nl == "relu") {
        ls.nonlinearity = Nonlinearity::relu;
      } else if (nl == "identity") {
        ls.nonlinearity = Nonlinearity::identity;
      } else {
        throw Error(ErrorCode::InvalidConfig, "unknown nonlinearity '" + nl + "'");
      }
      spec.layers.push_back(std::move(ls));
    }
    spec.notes = j.value("notes", "");
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("malformed model spec: ") + e.what());
  }
  return spec;
}

std::string model_spec_to_json(const ModelSpec& spec) {
  json layers = json::array();
  for (const auto& l : spec.layers)
    layers.push_back({{"weight", l.weight}, {"nonlinearity", nonlinearity_name(l.nonlinearity)}});
  json j = {{"layers", layers}};
  if (!spec.notes.empty()) j["notes"] = spec.notes;
  return j.dump(2) + "\n";
}

ModelSpec load_model_spec(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_model_spec(std::string(bytes.begin(), bytes.end()));
}

void save_model_spec(const ModelSpec& spec, const std::filesystem::path& path) {
  const std::string text = model_spec_to_json(spec);
  write_file_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::vector<Diagnostic> validate_model(const ModelSpec& spec, const TensorContainer& container) {
  std::vector<Diagnostic> out;
  const Tensor* prev = nullptr;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const std::string& name = spec.layers[i].weight;
    auto it = container.tensors.find(name);
    if (it == container.tensors.end()) {
      out.push_back({DiagnosticKind::MissingTensor, i, "layer " + std::to_string(i) + ": tensor '" + name + "' not found"});
      prev = nullptr;
      continue;
    }
    const Tensor& t = it->second;
    if (prev != nullptr && prev->values.rows() != t.values.cols()) {
      out.push_back({DiagnosticKind::DimensionMismatch, i,
                     "layer " + std::to_string(i) + ": d_in " + std::to_string(t.values.cols()) +
                         " != previous d_out " + std::to_string(prev->values.rows())});
    }
    prev = &t;
  }
  return out;
}

}  // namespace squeeze10
