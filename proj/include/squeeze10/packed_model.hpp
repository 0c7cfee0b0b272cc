#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "squeeze10/quant_kernels.hpp"

namespace squeeze10 {

inline constexpr char kPackedMagic[4] = {'S', '1', '0', 'P'};
inline constexpr std::uint16_t kPackedVersion = 1;

// S10P per-layer flag bits.
inline constexpr std::uint8_t kFlagScaledSign = 1u << 0;
inline constexpr std::uint8_t kFlagPerLayerParams = 1u << 1;

struct PackedModel {
  std::vector<PackedLayer> layers;
  friend bool operator==(const PackedModel&, const PackedModel&) = default;
};

std::vector<std::uint8_t> encode_packed_model(const PackedModel& model);
PackedModel decode_packed_model(const std::vector<std::uint8_t>& bytes);

PackedModel load_packed_model(const std::filesystem::path& path);
void save_packed_model(const PackedModel& model, const std::filesystem::path& path);

}  // namespace squeeze10
