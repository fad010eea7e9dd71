#include <gtest/gtest.h>

#include <filesystem>

#include "cdt/checkpoint.hpp"

using namespace cdt;
using namespace cdt::ckpt;

namespace {

model::ModelConfig tiny() {
  model::ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_model = 8;
  c.vocab_size = 11;
  c.max_seq = 16;
  c.init_seed = 9;
  return c;
}

}  // namespace

TEST(Checkpoint, RoundTripWidensFloatValues) {
  Checkpoint ck{model::init_params(tiny()), std::nullopt, {{"step", 12}}};
  auto back = deserialize(serialize(ck));
  EXPECT_EQ(back.params.config, ck.params.config);
  EXPECT_EQ(back.params.names, ck.params.names);
  for (std::size_t s = 0; s < ck.params.size(); ++s) {
    const auto& a = ck.params.tensors[s].storage();
    const auto& b = back.params.tensors[s].storage();
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(b[i], double(float(a[i])));
  }
  EXPECT_EQ(back.meta.at("step"), 12);
  EXPECT_FALSE(back.adam);
}

TEST(Checkpoint, QuantizedStateRoundTripsExactly) {
  Checkpoint ck{model::init_params(tiny()), std::nullopt, {}};
  ck.adam = optim::AdamState::zeros_like(ck.params.tensors);
  ck.adam->step = 7;
  ck.adam->m[0].storage()[3] = 0.125;
  ck.adam->v[2].storage()[0] = 1e-3;
  optim::quantize_f32(ck.params.tensors);
  optim::quantize_f32(ck.adam->v);
  auto back = deserialize(serialize(ck));
  EXPECT_EQ(back.params, ck.params);
  ASSERT_TRUE(back.adam);
  EXPECT_EQ(back.adam->step, 7u);
  for (std::size_t s = 0; s < ck.params.size(); ++s) {
    EXPECT_EQ(back.adam->m[s].storage(), ck.adam->m[s].storage());
    EXPECT_EQ(back.adam->v[s].storage(), ck.adam->v[s].storage());
  }
}

TEST(Checkpoint, HeaderLineThenLittleEndianFloats) {
  auto p = model::init_params(tiny());
  p.tensors[0].storage()[0] = 1.0;
  const auto bytes = serialize({p, std::nullopt, {}});
  const auto nl = bytes.find('\n');
  auto h = json::parse(bytes.substr(0, nl));
  EXPECT_EQ(h["format"], "cdt-checkpoint");
  EXPECT_EQ(h["tensors"][0]["name"], "tok_emb");
  EXPECT_EQ(h["tensors"][1]["offset"], 4 * 11 * 8);
  EXPECT_EQ(bytes.size() - nl - 1, 4 * p.count());
  // 1.0f is 0x3f800000
  EXPECT_EQ((unsigned char)bytes[nl + 1], 0x00);
  EXPECT_EQ((unsigned char)bytes[nl + 3], 0x80);
  EXPECT_EQ((unsigned char)bytes[nl + 4], 0x3f);
}

TEST(Checkpoint, CorruptionIsAnIntegrityError) {
  const auto good = serialize({model::init_params(tiny()), std::nullopt, {}});
  EXPECT_THROW(deserialize("no newline"), IntegrityError);
  EXPECT_THROW(deserialize("{broken\n"), IntegrityError);
  EXPECT_THROW(deserialize(good.substr(0, good.size() - 1)), IntegrityError);
  auto renamed = good;
  renamed.replace(renamed.find("tok_emb"), 7, "tok_emx");
  EXPECT_THROW(deserialize(renamed), IntegrityError);
  auto versioned = good;
  versioned.replace(versioned.find("\"version\":1"), 11, "\"version\":9");
  EXPECT_THROW(deserialize(versioned), IntegrityError);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "cdt_ckpt_test.bin").string();
  Checkpoint ck{model::init_params(tiny()), std::nullopt, {}};
  optim::quantize_f32(ck.params.tensors);
  save(path, ck);
  EXPECT_EQ(load(path).params, ck.params);
  std::filesystem::remove(path);
  EXPECT_THROW(load(path), IntegrityError);
}

TEST(ConfigJson, StrictAndRoundTrip) {
  auto c = tiny();
  c.position_scheme = model::PositionScheme::sinusoidal;
  EXPECT_EQ(config_from_json(config_to_json(c)), c);
  EXPECT_THROW(config_from_json(json{{"d_modle", 8}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"d_model", 10}, {"n_heads", 4}}), ConfigError);
}
