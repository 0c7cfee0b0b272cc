#include "squeeze10/quant_kernels.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "squeeze10/error.hpp"

namespace squeeze10 {

double round_half_away(double x) { return std::round(x); }

namespace {

void check_bits(int bits) {
  if (bits < 2 || bits > 8) throw Error(ErrorCode::BadBits, "bit width " + std::to_string(bits) + " outside [2, 8]");
}

}  // namespace

QuantParams compute_uniform_params(std::span<const float> values, int bits) {
  check_bits(bits);
  if (values.empty()) throw Error(ErrorCode::EmptyInput, "cannot fit quantization parameters to an empty sequence");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = std::min(static_cast<double>(*lo_it), 0.0);
  const double hi = std::max(static_cast<double>(*hi_it), 0.0);

  QuantParams p;
  p.bits = bits;
  if (hi == lo) {
    p.scale = kDegenerateScale;
    p.zero_point = 0;
    return p;
  }
  p.scale = static_cast<float>((hi - lo) / p.max_code());
  const double z = round_half_away(-lo / static_cast<double>(p.scale));
  p.zero_point = static_cast<int>(std::clamp(z, 0.0, static_cast<double>(p.max_code())));
  return p;
}

std::uint8_t quantize_value(float w, const QuantParams& params) {
  const double q = round_half_away(static_cast<double>(w) / static_cast<double>(params.scale)) + params.zero_point;
  return static_cast<std::uint8_t>(std::clamp(q, 0.0, static_cast<double>(params.max_code())));
}

std::vector<std::uint8_t> quantize_uniform(std::span<const float> values, const QuantParams& params) {
  check_bits(params.bits);
  std::vector<std::uint8_t> out(values.size());
  std::transform(values.begin(), values.end(), out.begin(), [&](float w) { return quantize_value(w, params); });
  return out;
}

float dequantize_value(int code, const QuantParams& params) {
  if (code < 0 || code > params.max_code())
    throw Error(ErrorCode::CodeOutOfRange,
                "code " + std::to_string(code) + " outside [0, " + std::to_string(params.max_code()) + "]");
  return params.scale * static_cast<float>(code - params.zero_point);
}

std::vector<float> dequantize_uniform(std::span<const std::uint8_t> codes, const QuantParams& params) {
  std::vector<float> out(codes.size());
  std::transform(codes.begin(), codes.end(), out.begin(), [&](std::uint8_t c) { return dequantize_value(c, params); });
  return out;
}

BinarizedRow binarize_row(std::span<const float> row, BinarizeMode mode) {
  if (row.empty()) throw Error(ErrorCode::EmptyInput, "cannot binarize an empty row");
  BinarizedRow out;
  out.signs.resize(row.size());
  std::transform(row.begin(), row.end(), out.signs.begin(), sign_code);
  out.params.mode = mode;
  if (mode == BinarizeMode::scaled_sign) {
    double sum = 0.0;
    for (float v : row) sum += std::abs(static_cast<double>(v));
    out.params.alpha = static_cast<float>(sum / static_cast<double>(row.size()));
  } else {
    out.params.alpha = 1.0f;
  }
  return out;
}

std::size_t PackedLayer::salient_count() const {
  std::size_t n = 0;
  for (std::uint8_t b : mask) n += static_cast<std::size_t>(std::popcount(b));
  return n;
}

namespace {

std::size_t code_bytes(std::size_t n_codes, int bits) {
  return (n_codes * static_cast<std::size_t>(code_storage_bits(bits)) + 7) / 8;
}

int read_code(const std::vector<std::uint8_t>& codes, std::size_t index, int bits) {
  if (code_storage_bits(bits) == 8) return codes[index];
  const std::uint8_t byte = codes[index >> 1];
  return (index & 1) ? (byte >> 4) : (byte & 0x0F);
}

}  // namespace

PackedLayer pack_mixed(std::string name, std::uint32_t d_out, std::uint32_t d_in,
                       std::span<const std::uint8_t> salient_codes, std::span<const std::int8_t> signs,
                       const std::vector<bool>& mask, std::vector<QuantParams> row_params,
                       std::vector<BinParams> row_bin, ConfigEcho echo) {
  const std::size_t total = std::size_t{d_out} * d_in;
  if (d_out == 0 || d_in == 0) throw Error(ErrorCode::DimensionMismatch, "layer '" + name + "' has a zero dimension");
  if (mask.size() != total || row_params.size() != d_out || row_bin.size() != d_out)
    throw Error(ErrorCode::DimensionMismatch, "layer '" + name + "': mask/row parameter sizes disagree with shape");
  const auto n_sal = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  if (n_sal != salient_codes.size() || total - n_sal != signs.size())
    throw Error(ErrorCode::CountMismatch, "layer '" + name + "': mask popcount " + std::to_string(n_sal) +
                                              " vs " + std::to_string(salient_codes.size()) + " codes and " +
                                              std::to_string(signs.size()) + " signs");
  const int bits = row_params.front().bits;
  check_bits(bits);
  for (const auto& p : row_params) {
    if (p.bits != bits) throw Error(ErrorCode::BadBits, "layer '" + name + "': rows use different bit widths");
    if (p.zero_point < 0 || p.zero_point > p.max_code())
      throw Error(ErrorCode::CodeOutOfRange, "layer '" + name + "': zero point out of range");
  }

  PackedLayer layer;
  layer.name = std::move(name);
  layer.d_out = d_out;
  layer.d_in = d_in;
  layer.mask.assign((total + 7) / 8, 0);
  layer.codes.assign(code_bytes(n_sal, bits), 0);
  layer.signs.assign((total - n_sal + 7) / 8, 0);

  std::size_t ci = 0;
  std::size_t si = 0;
  const bool nibbles = code_storage_bits(bits) == 4;
  for (std::size_t idx = 0; idx < total; ++idx) {
    if (mask[idx]) {
      layer.mask[idx >> 3] |= static_cast<std::uint8_t>(0x80u >> (idx & 7));
      const std::uint8_t code = salient_codes[ci];
      if (code > row_params[idx / d_in].max_code())
        throw Error(ErrorCode::CodeOutOfRange, "layer '" + layer.name + "': code " + std::to_string(code));
      if (nibbles) {
        layer.codes[ci >> 1] |= static_cast<std::uint8_t>((ci & 1) ? (code << 4) : code);
      } else {
        layer.codes[ci] = code;
      }
      ++ci;
    } else {
      const std::int8_t s = signs[si];
      if (s != 1 && s != -1) throw Error(ErrorCode::CodeOutOfRange, "sign code must be +1 or -1");
      if (s == 1) layer.signs[si >> 3] |= static_cast<std::uint8_t>(0x80u >> (si & 7));
      ++si;
    }
  }
  layer.row_params = std::move(row_params);
  layer.row_bin = std::move(row_bin);
  layer.echo = echo;
  return layer;
}

void check_packed_layer(const PackedLayer& layer) {
  const std::size_t total = layer.element_count();
  if (total == 0 || layer.row_params.size() != layer.d_out || layer.row_bin.size() != layer.d_out)
    throw Error(ErrorCode::DimensionMismatch, "layer '" + layer.name + "': inconsistent shape metadata");
  if (layer.mask.size() != (total + 7) / 8)
    throw Error(ErrorCode::CorruptMask, "layer '" + layer.name + "': mask has wrong byte length");
  if (total % 8 != 0 && (layer.mask.back() & (0xFFu >> (total % 8))) != 0)
    throw Error(ErrorCode::CorruptMask, "layer '" + layer.name + "': nonzero mask padding bits");
  const int bits = layer.code_bits();
  check_bits(bits);
  for (const auto& p : layer.row_params) {
    if (p.bits != bits) throw Error(ErrorCode::BadBits, "layer '" + layer.name + "': rows use different bit widths");
    if (p.zero_point < 0 || p.zero_point > p.max_code())
      throw Error(ErrorCode::CodeOutOfRange, "layer '" + layer.name + "': zero point out of range");
  }
  const std::size_t n_sal = layer.salient_count();
  if (layer.codes.size() != code_bytes(n_sal, bits) || layer.signs.size() != (total - n_sal + 7) / 8)
    throw Error(ErrorCode::CorruptMask, "layer '" + layer.name + "': mask popcount " + std::to_string(n_sal) +
                                            " disagrees with code/sign plane sizes");
  if (code_storage_bits(bits) == 4 && n_sal % 2 == 1 && (layer.codes.back() & 0xF0u) != 0)
    throw Error(ErrorCode::CorruptMask, "layer '" + layer.name + "': nonzero code padding nibble");
  const std::size_t n_bin = total - n_sal;
  if (n_bin % 8 != 0 && (layer.signs.back() & (0xFFu >> (n_bin % 8))) != 0)
    throw Error(ErrorCode::CorruptMask, "layer '" + layer.name + "': nonzero sign padding bits");
}

MatrixF unpack_mixed(const PackedLayer& layer) {
  check_packed_layer(layer);
  const int bits = layer.code_bits();
  MatrixF out(layer.d_out, layer.d_in);
  std::size_t ci = 0;
  std::size_t si = 0;
  for (std::size_t r = 0; r < layer.d_out; ++r) {
    for (std::size_t c = 0; c < layer.d_in; ++c) {
      const std::size_t idx = r * layer.d_in + c;
      if (layer.is_salient(idx)) {
        out(r, c) = dequantize_value(read_code(layer.codes, ci++, bits), layer.row_params[r]);
      } else {
        const bool positive = (layer.signs[si >> 3] >> (7 - (si & 7))) & 1u;
        ++si;
        out(r, c) = binarized_value(positive ? 1 : -1, layer.row_bin[r]);
      }
    }
  }
  return out;
}

MeanBits mean_bits(const PackedLayer& layer) {
  MeanBits mb;
  const std::size_t total = layer.element_count();
  const std::size_t n_sal = layer.salient_count();
  mb.element_count = total;
  mb.payload_numerator = (total - n_sal) + n_sal * static_cast<std::uint64_t>(layer.code_bits());
  mb.payload_bits = static_cast<double>(mb.payload_numerator) / static_cast<double>(total);
  mb.mask_bits = 1.0;
  mb.overhead_bits = static_cast<double>(std::uint64_t{layer.d_out} * kRowParamBits) / static_cast<double>(total);
  mb.total_bits = mb.payload_bits + mb.mask_bits + mb.overhead_bits;
  return mb;
}

}  // namespace squeeze10
