#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>

#include "squeeze10/error.hpp"
#include "squeeze10/packed_model.hpp"
#include "squeeze10/quant_kernels.hpp"
#include "test_support.hpp"

using namespace squeeze10;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::IoFailure;
}

struct RandomLayer {
  std::uint32_t d_out;
  std::uint32_t d_in;
  std::vector<bool> mask;
  Matrix<std::uint8_t> codes;     // dense, meaningful where mask is set
  Matrix<std::int8_t> signs;      // dense, meaningful where mask is clear
  std::vector<QuantParams> params;
  std::vector<BinParams> bin;
};

RandomLayer random_layer(std::mt19937_64& rng, std::uint32_t d_out, std::uint32_t d_in, double salient_p, int bits,
                         BinarizeMode mode) {
  std::bernoulli_distribution salient(salient_p);
  std::uniform_real_distribution<float> scale(1e-3f, 2.0f);
  std::uniform_int_distribution<int> code(0, (1 << bits) - 1);
  RandomLayer l{d_out, d_in, {}, Matrix<std::uint8_t>(d_out, d_in), Matrix<std::int8_t>(d_out, d_in), {}, {}};
  l.mask.resize(std::size_t{d_out} * d_in);
  for (std::size_t i = 0; i < l.mask.size(); ++i) l.mask[i] = salient(rng);
  for (auto& c : l.codes.data()) c = static_cast<std::uint8_t>(code(rng));
  for (auto& s : l.signs.data()) s = code(rng) % 2 ? 1 : -1;
  for (std::uint32_t r = 0; r < d_out; ++r) {
    l.params.push_back({bits, scale(rng), code(rng)});
    l.bin.push_back({mode == BinarizeMode::bare_sign ? 1.0f : scale(rng), mode});
  }
  return l;
}

PackedLayer pack(const RandomLayer& l) {
  std::vector<std::uint8_t> codes;
  std::vector<std::int8_t> signs;
  for (std::size_t i = 0; i < l.mask.size(); ++i) {
    if (l.mask[i]) {
      codes.push_back(l.codes.data()[i]);
    } else {
      signs.push_back(l.signs.data()[i]);
    }
  }
  return pack_mixed("layer", l.d_out, l.d_in, codes, signs, l.mask, l.params, l.bin, ConfigEcho{});
}

// Dense dequantization straight from the unpacked inputs.
MatrixF direct_dequant(const RandomLayer& l) {
  MatrixF out(l.d_out, l.d_in);
  for (std::size_t r = 0; r < l.d_out; ++r) {
    for (std::size_t c = 0; c < l.d_in; ++c) {
      const std::size_t i = r * l.d_in + c;
      out(r, c) = l.mask[i] ? l.params[r].scale * static_cast<float>(l.codes(r, c) - l.params[r].zero_point)
                            : l.bin[r].alpha * static_cast<float>(l.signs(r, c));
    }
  }
  return out;
}

}  // namespace

TEST_CASE("compute_uniform_params") {
  const std::vector<float> a{-1.0f, 0.0f, 2.0f};
  const QuantParams p = compute_uniform_params(a, 2);
  CHECK(p.scale == 1.0f);
  CHECK(p.zero_point == 1);

  const std::vector<float> b{0.0f, 15.0f};
  const QuantParams q = compute_uniform_params(b, 4);
  CHECK(q.scale == 1.0f);
  CHECK(q.zero_point == 0);

  const std::vector<float> zeros{0.0f, 0.0f, 0.0f};
  for (int k = 2; k <= 8; ++k) {
    const QuantParams d = compute_uniform_params(zeros, k);
    CHECK(d.scale == kDegenerateScale);
    CHECK(d.zero_point == 0);
  }

  // A constant nonzero row keeps its value exactly: the range is widened to [0, 5].
  const std::vector<float> fives{5.0f, 5.0f, 5.0f};
  for (int k = 2; k <= 8; ++k) {
    const QuantParams d = compute_uniform_params(fives, k);
    CHECK(d.zero_point == 0);
    CHECK(d.scale == doctest::Approx(5.0 / ((1 << k) - 1)));
    CHECK(dequantize_value(quantize_value(5.0f, d), d) == doctest::Approx(5.0f).epsilon(1e-6));
  }

  // All-negative rows put the zero point at the top code.
  const std::vector<float> neg{-3.0f, -1.0f};
  CHECK(compute_uniform_params(neg, 4).zero_point == 15);

  CHECK(code_of([] { compute_uniform_params(std::vector<float>{}, 4); }) == ErrorCode::EmptyInput);
  CHECK(code_of([&] { compute_uniform_params(a, 1); }) == ErrorCode::BadBits);
  CHECK(code_of([&] { compute_uniform_params(a, 9); }) == ErrorCode::BadBits);
}

TEST_CASE("quantize_value and dequantize_value") {
  const QuantParams p{2, 1.0f, 1};
  CHECK(quantize_value(2.0f, p) == 3);
  CHECK(quantize_value(-100.0f, p) == 0);
  CHECK(quantize_value(0.0f, p) == 1);
  CHECK(dequantize_value(3, p) == 2.0f);
  CHECK(dequantize_value(1, p) == 0.0f);
  CHECK(code_of([&] { dequantize_value(4, p); }) == ErrorCode::CodeOutOfRange);
  CHECK(code_of([&] { dequantize_value(-1, p); }) == ErrorCode::CodeOutOfRange);

  // Ties go away from zero.
  CHECK(round_half_away(0.5) == 1.0);
  CHECK(round_half_away(-0.5) == -1.0);
  CHECK(round_half_away(2.5) == 3.0);
  const QuantParams half{4, 2.0f, 3};
  CHECK(quantize_value(1.0f, half) == 4);
  CHECK(quantize_value(-1.0f, half) == 2);
}

TEST_CASE("round-trip error is within s/2 on random rows, codes stay in range") {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> len(1, 128);
  std::uniform_real_distribution<float> val(-10.0f, 10.0f);
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = 2 + trial % 7;
    std::vector<float> row(static_cast<std::size_t>(len(rng)));
    for (auto& v : row) v = val(rng);
    const QuantParams p = compute_uniform_params(row, k);
    REQUIRE(p.scale > 0.0f);
    REQUIRE(p.zero_point >= 0);
    REQUIRE(p.zero_point <= p.max_code());
    const auto codes = quantize_uniform(row, p);
    const auto back = dequantize_uniform(codes, p);
    for (std::size_t i = 0; i < row.size(); ++i) {
      REQUIRE(codes[i] <= p.max_code());
      REQUIRE(std::abs(static_cast<double>(row[i]) - back[i]) <= p.scale / 2.0 + 1e-6);
    }
    // Out-of-range inputs still clamp into the code range.
    CHECK(quantize_value(1e6f, p) == p.max_code());
    CHECK(quantize_value(-1e6f, p) == 0);
  }
}

TEST_CASE("binarize_row") {
  const auto z = binarize_row(std::vector<float>{0.0f, 0.0f, 0.0f}, BinarizeMode::bare_sign);
  CHECK(z.signs == std::vector<std::int8_t>{-1, -1, -1});
  CHECK(z.params.alpha == 1.0f);

  const auto s = binarize_row(std::vector<float>{1.0f, -2.0f, 3.0f}, BinarizeMode::scaled_sign);
  CHECK(s.signs == std::vector<std::int8_t>{1, -1, 1});
  CHECK(s.params.alpha == 2.0f);
  CHECK(binarized_value(s.signs[0], s.params) == 2.0f);
  CHECK(binarized_value(s.signs[1], s.params) == -2.0f);

  const auto n = binarize_row(std::vector<float>{-0.5f}, BinarizeMode::bare_sign);
  CHECK(binarized_value(n.signs[0], n.params) == -1.0f);

  CHECK(sign_code(-0.0f) == -1);
  CHECK(sign_code(1e-30f) == 1);
  CHECK(code_of([] { binarize_row(std::vector<float>{}, BinarizeMode::scaled_sign); }) == ErrorCode::EmptyInput);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> val(-1.0f, 1.0f);
  std::vector<float> row(257);
  for (auto& v : row) v = rng() % 5 == 0 ? 0.0f : val(rng);
  for (auto code : binarize_row(row, BinarizeMode::scaled_sign).signs) CHECK((code == 1 || code == -1));
}

TEST_CASE("bit layout is MSB-first for mask and signs, low nibble first for codes") {
  const std::vector<bool> mask{true, false, true, false, false};
  const std::vector<std::uint8_t> codes{3, 10};
  const std::vector<std::int8_t> signs{1, -1, 1};
  const PackedLayer l = pack_mixed("l", 1, 5, codes, signs, mask, {{4, 1.0f, 0}}, {{0.5f, BinarizeMode::scaled_sign}}, {});
  CHECK(l.mask == std::vector<std::uint8_t>{0b10100000});
  CHECK(l.codes == std::vector<std::uint8_t>{0xA3});
  CHECK(l.signs == std::vector<std::uint8_t>{0b10100000});
  const MatrixF dense = unpack_mixed(l);
  CHECK(dense.data() == std::vector<float>{3.0f, 0.5f, 10.0f, -0.5f, 0.5f});
}

TEST_CASE("pack_mixed degenerate ratios") {
  std::mt19937_64 rng(1);
  RandomLayer all = random_layer(rng, 6, 5, 1.0, 4, BinarizeMode::scaled_sign);
  const PackedLayer a = pack(all);
  CHECK(a.signs.empty());
  CHECK(a.salient_count() == 30);
  CHECK(a.codes.size() == 15);
  CHECK(unpack_mixed(a) == direct_dequant(all));

  RandomLayer none = random_layer(rng, 6, 5, 0.0, 4, BinarizeMode::scaled_sign);
  const PackedLayer b = pack(none);
  CHECK(b.codes.empty());
  CHECK(b.signs.size() == 4);
  CHECK(unpack_mixed(b) == direct_dequant(none));
}

TEST_CASE("pack then unpack equals direct dequantization on random layers") {
  std::mt19937_64 rng(99);
  for (int bits : {2, 3, 4, 5, 8}) {
    for (int trial = 0; trial < 20; ++trial) {
      const RandomLayer l = random_layer(rng, 8, 8, 0.2, bits, trial % 2 ? BinarizeMode::bare_sign : BinarizeMode::scaled_sign);
      CHECK(unpack_mixed(pack(l)) == direct_dequant(l));
    }
  }
}

TEST_CASE("pack_mixed argument errors") {
  const std::vector<bool> mask{true, false};
  const std::vector<QuantParams> p{{4, 1.0f, 0}};
  const std::vector<BinParams> b{{1.0f, BinarizeMode::bare_sign}};
  const std::vector<std::uint8_t> one_code{1};
  const std::vector<std::uint8_t> two_codes{1, 2};
  const std::vector<std::int8_t> one_sign{1};
  CHECK(code_of([&] { pack_mixed("l", 1, 2, two_codes, one_sign, mask, p, b, {}); }) == ErrorCode::CountMismatch);
  CHECK(code_of([&] { pack_mixed("l", 1, 3, one_code, one_sign, mask, p, b, {}); }) == ErrorCode::DimensionMismatch);
  CHECK(code_of([&] { pack_mixed("l", 2, 1, one_code, one_sign, mask, p, b, {}); }) == ErrorCode::DimensionMismatch);
  const std::vector<std::uint8_t> big{16};
  CHECK(code_of([&] { pack_mixed("l", 1, 2, big, one_sign, mask, p, b, {}); }) == ErrorCode::CodeOutOfRange);
}

TEST_CASE("unpack_mixed single elements and corruption") {
  const std::vector<bool> sal{true};
  const std::vector<bool> bin{false};
  const std::vector<std::uint8_t> z_code{7};
  const std::vector<std::int8_t> neg{-1};
  const PackedLayer s = pack_mixed("s", 1, 1, z_code, {}, sal, {{4, 0.3f, 7}}, {{0.0f, BinarizeMode::scaled_sign}}, {});
  CHECK(unpack_mixed(s)(0, 0) == 0.0f);
  const PackedLayer n = pack_mixed("n", 1, 1, {}, neg, bin, {{4, 0.3f, 7}}, {{0.7f, BinarizeMode::scaled_sign}}, {});
  CHECK(unpack_mixed(n)(0, 0) == -0.7f);

  PackedLayer flipped = n;
  flipped.mask[0] = 0x80;  // now claims one code but the code plane is empty
  CHECK(code_of([&] { unpack_mixed(flipped); }) == ErrorCode::CorruptMask);
  PackedLayer padded = n;
  padded.mask[0] = 0x01;
  CHECK(code_of([&] { unpack_mixed(padded); }) == ErrorCode::CorruptMask);
}

TEST_CASE("mean_bits accounting") {
  std::mt19937_64 rng(5);
  auto layer_with = [&](std::size_t salient, std::uint32_t d_out, std::uint32_t d_in) {
    RandomLayer l = random_layer(rng, d_out, d_in, 0.0, 4, BinarizeMode::scaled_sign);
    std::fill(l.mask.begin(), l.mask.end(), false);
    std::vector<std::size_t> idx(l.mask.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i = 0; i < salient; ++i) l.mask[idx[i]] = true;
    return pack(l);
  };

  const MeanBits b16 = mean_bits(layer_with(20, 10, 10));
  CHECK(b16.payload_bits == 1.6);
  CHECK(b16.payload_numerator * 10 == 16 * b16.element_count);
  CHECK(b16.mask_plus_payload() <= 1.0 * 0.8 + 4.0 * 0.2 + 1.0);

  CHECK(mean_bits(layer_with(0, 10, 10)).payload_bits == 1.0);

  const MeanBits b25 = mean_bits(layer_with(50, 10, 10));
  CHECK(b25.payload_bits == 2.5);
  CHECK(b25.mask_bits == 1.0);
  CHECK(b25.total_bits == doctest::Approx(2.5 + 1.0 + 10.0 * kRowParamBits / 100.0));

  const MeanBits b8x8 = mean_bits(layer_with(13, 8, 8));
  CHECK(b8x8.payload_numerator == 51 + 4 * 13);
  CHECK(b8x8.payload_bits == 103.0 / 64.0);

  for (int t = 0; t < 50; ++t) {
    const PackedLayer l = pack(random_layer(rng, 1 + rng() % 16, 1 + rng() % 16, (rng() % 101) / 100.0, 4,
                                            BinarizeMode::scaled_sign));
    const MeanBits mb = mean_bits(l);
    CHECK(mb.payload_bits >= 1.0);
    CHECK(mb.payload_bits <= 4.0);
  }
}

TEST_CASE("S10P round-trip is exact and re-serialization is byte-identical") {
  std::mt19937_64 rng(17);
  PackedModel m;
  for (int i = 0; i < 6; ++i) {
    const int bits = i == 5 ? 8 : 4;
    PackedLayer l = pack(random_layer(rng, 1 + rng() % 20, 1 + rng() % 20, 0.2, bits,
                                      i % 2 ? BinarizeMode::bare_sign : BinarizeMode::scaled_sign));
    l.name = "layer" + std::to_string(i);
    l.echo = {0.2f, 3e-4f, i == 4};
    m.layers.push_back(std::move(l));
  }
  const auto bytes = encode_packed_model(m);
  const PackedModel back = decode_packed_model(bytes);
  CHECK(back == m);
  CHECK(encode_packed_model(back) == bytes);

  auto bad = bytes;
  bad[0] = 'X';
  CHECK(code_of([&] { decode_packed_model(bad); }) == ErrorCode::MagicMismatch);
  auto version = bytes;
  version[4] = 9;
  CHECK(code_of([&] { decode_packed_model(version); }) == ErrorCode::VersionUnsupported);
  auto truncated = bytes;
  truncated.pop_back();
  CHECK_THROWS_AS(decode_packed_model(truncated), Error);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(decode_packed_model(trailing), Error);
}

TEST_CASE("S10P header fields") {
  const std::vector<bool> mask{true, false};
  const std::vector<std::uint8_t> codes{5};
  const std::vector<std::int8_t> signs{1};
  PackedModel m;
  m.layers.push_back(pack_mixed("ab", 1, 2, codes, signs, mask, {{4, 0.5f, 2}}, {{0.25f, BinarizeMode::scaled_sign}},
                                {0.5f, 1e-3f, true}));
  const auto b = encode_packed_model(m);
  const std::vector<std::uint8_t> head{'S', '1', '0', 'P', 1, 0, 1, 0, 0, 0, 2, 0, 'a', 'b', 1, 0, 0, 0, 2, 0, 0, 0,
                                       kFlagScaledSign | kFlagPerLayerParams};
  REQUIRE(b.size() > head.size());
  CHECK(std::vector<std::uint8_t>(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(head.size())) == head);
  // ratio f32 | lambda f32 | mask(1) | s f32, z, k | alpha f32 | codes(1) | signs(1)
  CHECK(b.size() == head.size() + 4 + 4 + 1 + 6 + 4 + 1 + 1);
  CHECK(b[head.size() + 8] == 0x80);
  CHECK(b[b.size() - 2] == 0x05);
  CHECK(b[b.size() - 1] == 0x80);
}
