#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "squeeze10/matrix.hpp"

namespace squeeze10 {

inline constexpr float kDegenerateScale = 1e-8f;

/// Uniform asymmetric k-bit parameters: q = clamp(round(w/s) + z, 0, 2^k-1),
/// w_hat = s * (q - z).
struct QuantParams {
  int bits = 4;
  float scale = 1.0f;
  int zero_point = 0;

  int max_code() const { return (1 << bits) - 1; }
  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

enum class BinarizeMode { bare_sign, scaled_sign };

struct BinParams {
  float alpha = 1.0f;
  BinarizeMode mode = BinarizeMode::scaled_sign;
  friend bool operator==(const BinParams&, const BinParams&) = default;
};

// Ties round away from zero.
double round_half_away(double x);

/// Fits s and z over the values. The fitting range is widened to contain 0 so
/// that z always lies in [0, 2^k-1]; an all-zero input gets s = 1e-8, z = 0.
QuantParams compute_uniform_params(std::span<const float> values, int bits);

std::uint8_t quantize_value(float w, const QuantParams& params);
std::vector<std::uint8_t> quantize_uniform(std::span<const float> values, const QuantParams& params);

// Throws CodeOutOfRange for codes above 2^k-1.
float dequantize_value(int code, const QuantParams& params);
std::vector<float> dequantize_uniform(std::span<const std::uint8_t> codes, const QuantParams& params);

// sign(x) = -1 for x <= 0, +1 otherwise.
inline std::int8_t sign_code(float x) { return x > 0.0f ? std::int8_t{1} : std::int8_t{-1}; }
inline float binarized_value(std::int8_t sign, const BinParams& params) {
  return params.alpha * static_cast<float>(sign);
}

struct BinarizedRow {
  std::vector<std::int8_t> signs;
  BinParams params;
};

/// bare_sign: alpha = 1. scaled_sign: alpha = mean(|row|).
BinarizedRow binarize_row(std::span<const float> row, BinarizeMode mode);

enum class Supervision { fias, general };

struct ConfigEcho {
  float ratio = 0.2f;
  float lambda = 3e-4f;
  bool per_layer_params = false;
  friend bool operator==(const ConfigEcho&, const ConfigEcho&) = default;
};

/// Mixed-precision storage for one weight matrix.
///
/// mask holds one bit per weight in row-major order, MSB-first within each
/// byte (1 = salient, stored as a k-bit code; 0 = binarized, stored as a sign
/// bit). codes holds salient codes in row-major order, two per byte with the
/// low nibble first when k <= 4, one per byte otherwise. signs holds the
/// binarized positions in row-major order, MSB-first, -1 -> 0 and +1 -> 1.
/// Padding bits are always zero.
struct PackedLayer {
  std::string name;
  std::uint32_t d_out = 0;
  std::uint32_t d_in = 0;
  std::vector<std::uint8_t> mask;
  std::vector<std::uint8_t> codes;
  std::vector<std::uint8_t> signs;
  std::vector<QuantParams> row_params;
  std::vector<BinParams> row_bin;
  ConfigEcho echo;

  std::size_t element_count() const { return std::size_t{d_out} * d_in; }
  std::size_t salient_count() const;
  bool is_salient(std::size_t flat_index) const {
    return (mask[flat_index >> 3] >> (7 - (flat_index & 7))) & 1u;
  }
  int code_bits() const { return row_params.empty() ? 4 : row_params.front().bits; }

  friend bool operator==(const PackedLayer&, const PackedLayer&) = default;
};

// Storage width of one salient code: 4 for k <= 4, 8 otherwise.
inline int code_storage_bits(int bits) { return bits <= 4 ? 4 : 8; }

/// salient_codes and signs are the compact row-major lists for salient and
/// binarized positions respectively; mask is dense (d_out * d_in).
PackedLayer pack_mixed(std::string name, std::uint32_t d_out, std::uint32_t d_in,
                       std::span<const std::uint8_t> salient_codes, std::span<const std::int8_t> signs,
                       const std::vector<bool>& mask, std::vector<QuantParams> row_params,
                       std::vector<BinParams> row_bin, ConfigEcho echo);

MatrixF unpack_mixed(const PackedLayer& layer);

// Throws CorruptMask / CodeOutOfRange / DimensionMismatch on inconsistent layers.
void check_packed_layer(const PackedLayer& layer);

struct MeanBits {
  // payload = payload_numerator / element_count, exactly representable as a ratio.
  std::uint64_t payload_numerator = 0;
  std::uint64_t element_count = 0;
  double payload_bits = 0.0;
  double mask_bits = 1.0;
  double overhead_bits = 0.0;  // per-row s, z, k, alpha amortized over weights
  double total_bits = 0.0;

  double mask_plus_payload() const { return payload_bits + mask_bits; }
};

inline constexpr int kRowParamBits = 32 + 8 + 8 + 32;

MeanBits mean_bits(const PackedLayer& layer);

}  // namespace squeeze10
