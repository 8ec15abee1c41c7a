#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <tuple>

#include "cscunet/errors.hpp"
#include "cscunet/unet.hpp"

using namespace cscunet;
namespace fs = std::filesystem;

namespace {

VariantSpec small_spec(Variant v, int a, int b) {
  VariantSpec s;
  s.variant = v;
  s.encode_unfoldings = a;
  s.decode_unfoldings = b;
  s.widths = {4, 8, 8, 8, 8};
  return s;
}

Tensor<float> random_image(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> v(s.numel());
  for (auto& e : v) e = u(rng);
  return Tensor<float>(s, std::move(v));
}

bool bitwise_equal(const Tensor<float>& a, const Tensor<float>& b) {
  if (!(a.shape() == b.shape())) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

// Independent closed-form count: every block is two 3x3 conv layers with a
// scalar step, per-channel threshold and batch-norm affine pair.
std::size_t closed_form_count(const std::array<int, 5>& w, int in, int classes) {
  auto block = [](std::size_t ci, std::size_t c) { return 9 * c * ci + 9 * c * c + 2 + 6 * c; };
  std::size_t total = 0;
  std::size_t prev = in;
  for (int c : w) {
    total += block(prev, c);
    prev = c;
  }
  for (int s = 0; s < 4; ++s) {
    total += 9 * static_cast<std::size_t>(w[s + 1]) * w[s] + w[s];  // upsampling conv
    total += block(2 * w[s], w[s]);
  }
  return total + static_cast<std::size_t>(classes) * w[0] + classes;
}

}  // namespace

TEST_CASE("variant naming and parsing") {
  CHECK(small_spec(Variant::unet, 0, 0).display_name() == "U-Net");
  CHECK(small_spec(Variant::encode, 2, 0).display_name() == "CSC-Unet-Encode-2");
  CHECK(small_spec(Variant::decode, 0, 1).display_name() == "CSC-Unet-Decode-1");
  CHECK(small_spec(Variant::all, 2, 1).display_name() == "CSC-Unet-All-2-1");
  CHECK(parse_variant("all") == Variant::all);
  CHECK_THROWS_AS(parse_variant("both"), ConfigError);
  CHECK(small_spec(Variant::unet, 3, 3).encoder_k() == 0);
  CHECK(small_spec(Variant::encode, 3, 3).decoder_k() == 0);
  CHECK(small_spec(Variant::decode, 3, 3).decoder_k() == 3);
}

TEST_CASE("parameter count matches the closed form and is variant independent") {
  const VariantSpec base;
  CHECK(Model(base, 1).parameter_count() == closed_form_count(base.widths, 3, 2));
  CHECK(Model(base, 1).parameter_count() == 2161684);
  for (auto [v, a, b] : {std::tuple{Variant::encode, 2, 0}, std::tuple{Variant::decode, 0, 2},
                         std::tuple{Variant::all, 2, 2}}) {
    VariantSpec s = base;
    s.variant = v;
    s.encode_unfoldings = a;
    s.decode_unfoldings = b;
    CHECK(Model(s, 1).parameter_count() == Model(base, 1).parameter_count());
  }
}

TEST_CASE("parameter names are unique") {
  const Model m(small_spec(Variant::all, 1, 1), 3);
  std::set<std::string> names;
  for (const auto& p : m.parameters()) CHECK(names.insert(p.name).second);
  CHECK(names.count("enc0.layer0.weight") == 1);
  CHECK(names.count("classifier.bias") == 1);
}

TEST_CASE("forward shape contract") {
  VariantSpec s = small_spec(Variant::all, 1, 1);
  Model m(s, 4);
  const Tensor<float> logits = m.forward(random_image({2, 3, 64, 64}, 5), Mode::train);
  CHECK(logits.shape() == Shape{2, 2, 64, 64});
  try {
    (void)m.forward(random_image({1, 3, 50, 50}, 6), Mode::eval);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("spatial dims must be divisible by 16") != std::string::npos);
  }
  CHECK_THROWS_AS(m.forward(random_image({1, 1, 32, 32}, 7), Mode::eval), ShapeError);
}

TEST_CASE("eval forward is repeatable and does not move statistics") {
  Model m(small_spec(Variant::all, 1, 1), 8);
  const auto x = random_image({1, 3, 32, 32}, 9);
  (void)m.forward(x, Mode::train);
  const auto before = m.batchnorm_stats().front().stats->mean;
  const Tensor<float> a = m.forward(x, Mode::eval);
  const Tensor<float> b = m.forward(x, Mode::eval);
  CHECK(bitwise_equal(a, b));
  CHECK(m.batchnorm_stats().front().stats->mean == before);
}

TEST_CASE("variant algebra") {
  const auto x = random_image({2, 3, 32, 32}, 10);
  SUBCASE("all-a-0 is encode-a") {
    Model all(small_spec(Variant::all, 2, 0), 11), enc(small_spec(Variant::encode, 2, 0), 11);
    CHECK(bitwise_equal(all.forward(x, Mode::train), enc.forward(x, Mode::train)));
  }
  SUBCASE("all-0-b is decode-b") {
    Model all(small_spec(Variant::all, 0, 2), 12), dec(small_spec(Variant::decode, 0, 2), 12);
    CHECK(bitwise_equal(all.forward(x, Mode::train), dec.forward(x, Mode::train)));
  }
  SUBCASE("all-0-0 is the baseline") {
    Model all(small_spec(Variant::all, 0, 0), 13), unet(small_spec(Variant::unet, 0, 0), 13);
    CHECK(all.parameter_count() == unet.parameter_count());
    CHECK(bitwise_equal(all.forward(x, Mode::train), unet.forward(x, Mode::train)));
  }
  SUBCASE("unfolding changes the output") {
    Model all(small_spec(Variant::all, 1, 1), 14), unet(small_spec(Variant::unet, 0, 0), 14);
    CHECK_FALSE(bitwise_equal(all.forward(x, Mode::train), unet.forward(x, Mode::train)));
  }
}

TEST_CASE("every parameter receives gradient without batch norm") {
  VariantSpec s = small_spec(Variant::all, 1, 1);
  s.batchnorm = false;
  Model m(s, 15);
  // Thresholds start at 0; nudge them so no unit sits exactly at a kink.
  for (auto& p : m.parameters()) {
    if (p.name.find("threshold") != std::string::npos) {
      Tensor<float> t = p.tensor;
      for (auto& v : t.data()) v = 0.01f;
    }
  }
  const auto logits = m.forward(random_image({2, 3, 32, 32}, 16), Mode::train);
  LabelMap target{2, 32, 32, std::vector<std::int32_t>(2 * 32 * 32, 0)};
  for (std::size_t i = 0; i < target.labels.size(); i += 3) target.labels[i] = 1;
  log_softmax_nll(logits, target).backward();
  for (const auto& p : m.parameters()) {
    CAPTURE(p.name);
    REQUIRE(p.tensor.has_grad());
    bool nonzero = false;
    for (float g : p.tensor.grad()) nonzero = nonzero || g != 0.0f;
    CHECK(nonzero);
  }
}

TEST_CASE("checkpoint round trip") {
  VariantSpec s = small_spec(Variant::all, 2, 1);
  s.num_classes = 3;
  Model m(s, 17);
  const auto x = random_image({1, 3, 32, 32}, 18);
  (void)m.forward(x, Mode::train);  // move the running statistics off their defaults
  const auto bytes = serialize_checkpoint(m);
  REQUIRE(bytes.size() > 12);
  CHECK(std::string(bytes.begin(), bytes.begin() + 7) == "CSCUNET");

  Model back = deserialize_checkpoint(bytes);
  CHECK(back.spec() == m.spec());
  CHECK(serialize_checkpoint(back) == bytes);
  CHECK(bitwise_equal(back.forward(x, Mode::eval), m.forward(x, Mode::eval)));

  SUBCASE("truncated or padded files are rejected") {
    std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 3);
    CHECK_THROWS_AS(deserialize_checkpoint(cut), DataError);
    auto padded = bytes;
    padded.push_back(0);
    CHECK_THROWS_AS(deserialize_checkpoint(padded), DataError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(deserialize_checkpoint(bad_magic), DataError);
  }
  SUBCASE("file save and load") {
    const fs::path dir = fs::temp_directory_path() / "cscunet_ckpt_test";
    fs::create_directories(dir);
    save_checkpoint(m, dir / "m.ckpt");
    Model loaded = load_checkpoint(dir / "m.ckpt");
    CHECK(serialize_checkpoint(loaded) == bytes);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), DataError);
    fs::remove_all(dir);
  }
}
