#include "squeeze10/packed_model.hpp"

#include <cstring>
#include <limits>

#include "byte_io.hpp"
#include "squeeze10/error.hpp"
#include "squeeze10/tensor_store.hpp"

namespace squeeze10 {

namespace {

std::uint8_t layer_flags(const PackedLayer& layer) {
  const BinarizeMode mode = layer.row_bin.front().mode;
  for (const auto& b : layer.row_bin) {
    if (b.mode != mode) throw Error(ErrorCode::InvalidConfig, "layer '" + layer.name + "' mixes binarization modes");
  }
  std::uint8_t flags = 0;
  if (mode == BinarizeMode::scaled_sign) flags |= kFlagScaledSign;
  if (layer.echo.per_layer_params) flags |= kFlagPerLayerParams;
  return flags;
}

}  // namespace

std::vector<std::uint8_t> encode_packed_model(const PackedModel& model) {
  detail::ByteWriter w;
  w.bytes(kPackedMagic, 4);
  w.u16(kPackedVersion);
  w.u32(static_cast<std::uint32_t>(model.layers.size()));
  for (const auto& layer : model.layers) {
    check_packed_layer(layer);
    if (layer.name.size() > std::numeric_limits<std::uint16_t>::max())
      throw Error(ErrorCode::InvalidConfig, "layer name too long");
    w.u16(static_cast<std::uint16_t>(layer.name.size()));
    w.str(layer.name);
    w.u32(layer.d_out);
    w.u32(layer.d_in);
    w.u8(layer_flags(layer));
    w.f32(layer.echo.ratio);
    w.f32(layer.echo.lambda);
    w.bytes(layer.mask);
    for (const auto& p : layer.row_params) {
      w.f32(p.scale);
      w.u8(static_cast<std::uint8_t>(p.zero_point));
      w.u8(static_cast<std::uint8_t>(p.bits));
    }
    for (const auto& b : layer.row_bin) w.f32(b.alpha);
    w.bytes(layer.codes);
    w.bytes(layer.signs);
  }
  return std::move(w.buffer());
}

PackedModel decode_packed_model(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kPackedMagic, 4) != 0)
    throw Error(ErrorCode::MagicMismatch, "file does not start with \"S10P\"");
  detail::ByteReader r(bytes.data(), bytes.size(), "S10P model");
  r.take(4);
  const std::uint16_t version = r.u16();
  if (version != kPackedVersion) throw Error(ErrorCode::VersionUnsupported, "S10P version " + std::to_string(version));
  const std::uint32_t layer_count = r.u32();

  PackedModel model;
  for (std::uint32_t li = 0; li < layer_count; ++li) {
    PackedLayer layer;
    layer.name = r.take_str(r.u16());
    layer.d_out = r.u32();
    layer.d_in = r.u32();
    if (layer.d_out == 0 || layer.d_in == 0)
      throw Error(ErrorCode::DimensionMismatch, "layer '" + layer.name + "' has a zero dimension");
    const std::uint8_t flags = r.u8();
    layer.echo.ratio = r.f32();
    layer.echo.lambda = r.f32();
    layer.echo.per_layer_params = (flags & kFlagPerLayerParams) != 0;
    const BinarizeMode mode = (flags & kFlagScaledSign) ? BinarizeMode::scaled_sign : BinarizeMode::bare_sign;

    const std::size_t total = layer.element_count();
    layer.mask = r.take_vec((total + 7) / 8);
    layer.row_params.resize(layer.d_out);
    for (auto& p : layer.row_params) {
      p.scale = r.f32();
      p.zero_point = r.u8();
      p.bits = r.u8();
      if (p.bits < 2 || p.bits > 8) throw Error(ErrorCode::BadBits, "layer '" + layer.name + "': bad bit width");
    }
    layer.row_bin.resize(layer.d_out);
    for (auto& b : layer.row_bin) {
      b.alpha = r.f32();
      b.mode = mode;
    }
    const std::size_t n_sal = layer.salient_count();
    const std::size_t width = static_cast<std::size_t>(code_storage_bits(layer.code_bits()));
    layer.codes = r.take_vec((n_sal * width + 7) / 8);
    layer.signs = r.take_vec((total - n_sal + 7) / 8);
    check_packed_layer(layer);
    model.layers.push_back(std::move(layer));
  }
  if (r.remaining() != 0) throw Error(ErrorCode::ShapeMismatch, "trailing bytes after last S10P layer");
  return model;
}

PackedModel load_packed_model(const std::filesystem::path& path) { return decode_packed_model(read_file(path)); }

void save_packed_model(const PackedModel& model, const std::filesystem::path& path) {
  write_file_atomic(path, encode_packed_model(model));
}

}  // namespace squeeze10
