#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>

#include <json.hpp>

#include "squeeze10/error.hpp"
#include "squeeze10/tensor_store.hpp"
#include "test_support.hpp"

using namespace squeeze10;
using squeeze10::testing::random_matrix;
using squeeze10::testing::TempDir;

namespace {

// Hand-rolled S10T writer, independent of encode_container.
std::vector<std::uint8_t> raw_container(const nlohmann::json& header, const std::vector<float>& payload,
                                        std::uint16_t version = 1, const char* magic = "S10T") {
  std::vector<std::uint8_t> out(magic, magic + 4);
  out.push_back(static_cast<std::uint8_t>(version & 0xFF));
  out.push_back(static_cast<std::uint8_t>(version >> 8));
  const std::string h = header.dump();
  const auto len = static_cast<std::uint32_t>(h.size());
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
  out.insert(out.end(), h.begin(), h.end());
  for (float f : payload) {
    const auto u = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
  return out;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::IoFailure;
}

bool bit_identical(const MatrixF& a, const MatrixF& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("zero tensor round-trips") {
  TempDir dir;
  TensorContainer c;
  c.put("z", MatrixF(2, 3));
  save_container(c, dir / "z.s10t");
  const TensorContainer back = load_container(dir / "z.s10t");
  REQUIRE(back.tensors.size() == 1);
  CHECK(back.at("z").shape() == std::vector<std::size_t>{2, 3});
  CHECK(back == c);
}

TEST_CASE("file layout matches the hand-written encoder") {
  TensorContainer c;
  c.put("a", MatrixF(1, 2, std::vector<float>{1.5f, -2.0f}));
  c.put("b", MatrixF(1, 1, std::vector<float>{3.5f}));
  const nlohmann::json header = nlohmann::json::array(
      {{{"name", "a"}, {"shape", {1, 2}}, {"offset", 0}, {"length", 8}},
       {{"name", "b"}, {"shape", {1, 1}}, {"offset", 8}, {"length", 4}}});
  CHECK(encode_container(c) == raw_container(header, {1.5f, -2.0f, 3.5f}));
}

TEST_CASE("payload length disagreeing with shape is ShapeMismatch naming the tensor") {
  const nlohmann::json header =
      nlohmann::json::array({{{"name", "bad"}, {"shape", {2, 2}}, {"offset", 0}, {"length", 12}}});
  try {
    decode_container(raw_container(header, {1, 2, 3}));
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ShapeMismatch);
    CHECK(std::string(e.what()).find("bad") != std::string::npos);
  }
}

TEST_CASE("load rejects bad magic, version, rank and non-finite values") {
  const nlohmann::json one = nlohmann::json::array({{{"name", "t"}, {"shape", {1, 1}}, {"offset", 0}, {"length", 4}}});
  CHECK(code_of([&] { decode_container(raw_container(one, {1.0f}, 1, "S10X")); }) == ErrorCode::MagicMismatch);
  CHECK(code_of([&] { decode_container(raw_container(one, {1.0f}, 7)); }) == ErrorCode::VersionUnsupported);

  const nlohmann::json rank3 =
      nlohmann::json::array({{{"name", "t"}, {"shape", {1, 1, 1}}, {"offset", 0}, {"length", 4}}});
  CHECK(code_of([&] { decode_container(raw_container(rank3, {1.0f})); }) == ErrorCode::ShapeMismatch);

  const nlohmann::json past_end = nlohmann::json::array({{{"name", "t"}, {"shape", {1, 1}}, {"offset", 4}, {"length", 4}}});
  CHECK(code_of([&] { decode_container(raw_container(past_end, {1.0f})); }) == ErrorCode::ShapeMismatch);

  for (float bad : {std::numeric_limits<float>::quiet_NaN(), std::numeric_limits<float>::infinity(),
                    -std::numeric_limits<float>::infinity()}) {
    const nlohmann::json h = nlohmann::json::array({{{"name", "nanny"}, {"shape", {1, 2}}, {"offset", 0}, {"length", 8}}});
    try {
      decode_container(raw_container(h, {0.0f, bad}));
      FAIL("expected NonFiniteValue");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::NonFiniteValue);
      CHECK(std::string(e.what()).find("nanny") != std::string::npos);
    }
  }

  TensorContainer c;
  c.put("inf", MatrixF(1, 1, std::vector<float>{std::numeric_limits<float>::infinity()}));
  CHECK(code_of([&] { encode_container(c); }) == ErrorCode::NonFiniteValue);
  CHECK(code_of([&] { load_container("/nonexistent/dir/file.s10t"); }) == ErrorCode::IoFailure);
}

TEST_CASE("empty container writes a valid file") {
  TempDir dir;
  save_container(TensorContainer{}, dir / "e.s10t");
  CHECK(load_container(dir / "e.s10t").tensors.empty());
}

TEST_CASE("1x1 tensor reloads exactly") {
  TensorContainer c;
  c.put("x", MatrixF(1, 1, std::vector<float>{3.5f}));
  CHECK(decode_container(encode_container(c)).at("x").values(0, 0) == 3.5f);
}

TEST_CASE("64x64 random tensor is byte-identical after a file round-trip") {
  TempDir dir;
  TensorContainer c;
  c.put("w", random_matrix(64, 64, 11, -100.0f, 100.0f));
  save_container(c, dir / "w.s10t");
  const auto bytes = read_file(dir / "w.s10t");
  CHECK(bytes == encode_container(c));
  CHECK(bit_identical(load_container(dir / "w.s10t").at("w").values, c.at("w").values));
}

TEST_CASE("100 random tensors survive save/load bit-exactly") {
  TempDir dir;
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> dim(1, 40);
  std::uniform_int_distribution<std::uint32_t> bits;
  TensorContainer c;
  for (int i = 0; i < 100; ++i) {
    MatrixF m(dim(rng), dim(rng));
    // Arbitrary finite bit patterns, including subnormals and -0.
    for (auto& v : m.data()) {
      float f;
      do {
        f = std::bit_cast<float>(bits(rng));
      } while (!std::isfinite(f));
      v = f;
    }
    c.put("t" + std::to_string(i), std::move(m));
  }
  save_container(c, dir / "many.s10t");
  const TensorContainer back = load_container(dir / "many.s10t");
  REQUIRE(back.tensors.size() == 100);
  for (const auto& [name, t] : c.tensors) CHECK(bit_identical(back.at(name).values, t.values));
  CHECK(encode_container(back) == encode_container(c));
}

TEST_CASE("validate_model") {
  TensorContainer c;
  c.put("a", MatrixF(4, 8));
  c.put("b", MatrixF(2, 4));
  c.put("c", MatrixF(2, 2));
  c.put("d", MatrixF(3, 5));

  SUBCASE("missing tensor") {
    const auto d = validate_model(ModelSpec{{{"a", Nonlinearity::relu}, {"w9", Nonlinearity::identity}}, ""}, c);
    REQUIRE(d.size() == 1);
    CHECK(d[0].kind == DiagnosticKind::MissingTensor);
    CHECK(d[0].layer_index == 1);
  }
  SUBCASE("chained 4x8, 2x4, 2x2 is valid") {
    CHECK(validate_model(ModelSpec{{{"a"}, {"b"}, {"c"}}, ""}, c).empty());
  }
  SUBCASE("4x8 then 3x5 is one dimension mismatch") {
    const auto d = validate_model(ModelSpec{{{"a"}, {"d"}}, ""}, c);
    REQUIRE(d.size() == 1);
    CHECK(d[0].kind == DiagnosticKind::DimensionMismatch);
  }
  SUBCASE("diagnostics are deterministic and in layer order") {
    const ModelSpec spec{{{"a"}, {"d"}, {"nope"}, {"b"}, {"a"}}, ""};
    const auto first = validate_model(spec, c);
    const auto second = validate_model(spec, c);
    REQUIRE(first.size() == 3);
    for (std::size_t i = 0; i < first.size(); ++i) {
      CHECK(first[i].message == second[i].message);
      if (i > 0) CHECK(first[i - 1].layer_index < first[i].layer_index);
    }
  }
}

TEST_CASE("model spec JSON round-trip") {
  const ModelSpec spec = parse_model_spec(R"({"layers":[{"weight":"w0","nonlinearity":"relu"},{"weight":"w1"}]})");
  REQUIRE(spec.layers.size() == 2);
  CHECK(spec.layers[0].nonlinearity == Nonlinearity::relu);
  CHECK(spec.layers[1].nonlinearity == Nonlinearity::identity);
  const ModelSpec again = parse_model_spec(model_spec_to_json(spec));
  CHECK(again.layers[0].weight == "w0");
  CHECK(again.layers[1].nonlinearity == Nonlinearity::identity);
  CHECK(code_of([] { parse_model_spec(R"({"layers":[{"weight":"w0","nonlinearity":"gelu"}]})"); }) ==
        ErrorCode::InvalidConfig);
}
