#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "squeeze10/matrix.hpp"

namespace squeeze10 {

inline constexpr char kContainerMagic[4] = {'S', '1', '0', 'T'};
inline constexpr std::uint16_t kContainerVersion = 1;

/// A named 2-D float tensor. Only rank-2 tensors are stored; weights are
/// d_out x d_in, calibration activations are N x d_in.
struct Tensor {
  std::string name;
  MatrixF values;

  std::vector<std::size_t> shape() const { return {values.rows(), values.cols()}; }
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

struct ContainerManifest {
  std::uint16_t version = kContainerVersion;
  bool little_endian = true;
  friend bool operator==(const ContainerManifest&, const ContainerManifest&) = default;
};

struct TensorContainer {
  std::map<std::string, Tensor> tensors;
  ContainerManifest manifest;

  // Replaces an existing entry with the same name.
  void put(std::string name, MatrixF values);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }

  friend bool operator==(const TensorContainer&, const TensorContainer&) = default;
};

TensorContainer load_container(const std::filesystem::path& path);
// Writes to a sibling temp file and renames it into place.
void save_container(const TensorContainer& container, const std::filesystem::path& path);

// In-memory forms of the S10T byte layout.
std::vector<std::uint8_t> encode_container(const TensorContainer& container);
TensorContainer decode_container(const std::vector<std::uint8_t>& bytes);

enum class Nonlinearity { identity, relu };

struct LayerSpec {
  std::string weight;
  Nonlinearity nonlinearity = Nonlinearity::identity;
};

struct ModelSpec {
  std::vector<LayerSpec> layers;
  std::string notes;
};

ModelSpec parse_model_spec(const std::string& json_text);
std::string model_spec_to_json(const ModelSpec& spec);
ModelSpec load_model_spec(const std::filesystem::path& path);
void save_model_spec(const ModelSpec& spec, const std::filesystem::path& path);

enum class DiagnosticKind { MissingTensor, DimensionMismatch };

struct Diagnostic {
  DiagnosticKind kind;
  std::size_t layer_index;
  std::string message;
};

/// Checks that every layer resolves to a tensor and that consecutive layers
/// chain (d_out of layer l equals d_in of layer l+1). Diagnostics come out in
/// layer order.
std::vector<Diagnostic> validate_model(const ModelSpec& spec, const TensorContainer& container);

// Atomic whole-file write helper shared by the persisted formats.
void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace squeeze10
