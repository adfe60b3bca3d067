#include <doctest.h>

#include "fcc/config.hpp"
#include "fcc/errors.hpp"

using namespace fcc;

TEST_CASE("model and training configs round-trip through JSON") {
  ModelConfig m;
  m.variant = Variant::kDmnAttention;
  m.vocab_size = 123;
  m.mlp_hidden = {7, 5};
  m.conv.filters = {3, 4};
  const auto back = model_config_from_json(to_json(m), "model");
  CHECK(to_json(back) == to_json(m));
  CHECK(back.variant == Variant::kDmnAttention);

  TrainConfig t;
  t.loss = LossKind::kLogistic;
  t.epochs = 3;
  t.learning_rate = 0.25;
  CHECK(to_json(train_config_from_json(to_json(t), "train")) == to_json(t));

  SyntheticOptions s;
  s.mode = SignalMode::kBoth;
  s.num_lists = 17;
  CHECK(to_json(synthetic_from_json(to_json(s), "synthetic")) == to_json(s));
}

TEST_CASE("partial objects override only the keys present") {
  const auto m = model_config_from_json(Json::parse(R"({"embedding_dim": 32, "limits": {"max_turns": 4}})"), "model");
  CHECK(m.embedding_dim == 32);
  CHECK(m.limits.max_turns == 4);
  CHECK(m.limits.max_len_utterance == 90);
  CHECK(m.gru_hidden == ModelConfig{}.gru_hidden);
}

TEST_CASE("config errors carry key paths") {
  CHECK_THROWS_WITH_AS(model_config_from_json(Json::parse(R"({"foo": 1})"), "model"),
                       doctest::Contains("model.foo"), ConfigError);
  CHECK_THROWS_WITH_AS(model_config_from_json(Json::parse(R"({"limits": {"max_turn": 3}})"), "model"),
                       doctest::Contains("model.limits.max_turn"), ConfigError);
  CHECK_THROWS_WITH_AS(train_config_from_json(Json::parse(R"({"epochs": -1})"), "train"),
                       doctest::Contains("train.epochs"), ConfigError);
  CHECK_THROWS_WITH_AS(train_config_from_json(Json::parse(R"({"learning_rate": "fast"})"), "train"),
                       doctest::Contains("train.learning_rate"), ConfigError);
  CHECK_THROWS_WITH_AS(train_config_from_json(Json::parse(R"({"loss": "squared"})"), "train"),
                       doctest::Contains("squared"), ConfigError);
  CHECK_THROWS_WITH_AS(model_config_from_json(Json::parse(R"({"variant": "DMN_CNN"})"), "model"),
                       doctest::Contains("DMN_CNN"), ConfigError);
  CHECK_THROWS_AS(model_config_from_json(Json::parse("[1, 2]"), "model"), ConfigError);
}
