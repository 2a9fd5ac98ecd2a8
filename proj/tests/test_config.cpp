#include <gtest/gtest.h>

#include "rfcl/config.hpp"

using namespace rfcl;

namespace {

std::string config_error(const std::string& text) {
  try {
    parse_config_text(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  ADD_FAILURE() << "config accepted: " << text;
  return {};
}

}  // namespace

TEST(Config, EmptyObjectResolvesToDefaults) {
  auto c = parse_config_text("{}");
  EXPECT_EQ(c.dataset.kind, "synthetic");
  EXPECT_EQ(c.split.sizes(), std::vector<std::size_t>(5, 10));
  EXPECT_EQ(c.hidden_dims, (std::vector<std::size_t>{256, 128, 128, 64}));
  EXPECT_EQ(c.method.name, "Naive");
  EXPECT_EQ(c.schedule.epochs, 40u);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{1, 2, 3}));
  const auto j = resolved_json(c);
  for (const char* key : {"dataset", "split", "model", "method", "schedule", "pretrain", "analysis", "output_dir", "seeds"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
}

TEST(Config, UnknownKeysNamedWithPath) {
  EXPECT_NE(config_error(R"({"schedule": {"epocs": 3}})").find("'schedule.epocs'"), std::string::npos);
  EXPECT_NE(config_error(R"({"sedes": [1]})").find("'sedes'"), std::string::npos);
  EXPECT_NE(config_error(R"({"method": {"weights": {"kd": 1}}})").find("method.weights.kd"), std::string::npos);
}

TEST(Config, TypeErrorsNameTheField) {
  EXPECT_NE(config_error(R"({"schedule": {"epochs": "forty"}})").find("schedule.epochs"), std::string::npos);
  EXPECT_NE(config_error(R"({"model": {"hidden_dims": [16, -2]}})").find("model.hidden_dims"), std::string::npos);
  EXPECT_NE(config_error(R"({"dataset": 3})").find("dataset"), std::string::npos);
}

TEST(Config, SemanticValidation) {
  EXPECT_NE(config_error(R"({"method": {"name": "Naive", "weights": {"ewc": 2}}})").find("method.weights.ewc"),
            std::string::npos);
  EXPECT_NE(config_error(R"({"method": {"head": "softmax", "balanced_bce": true}})").find("balanced_bce"),
            std::string::npos);
  EXPECT_NE(config_error(R"({"method": {"name": "PredKD+Replay"}})").find("method.name"), std::string::npos);
  EXPECT_NE(config_error(R"({"analysis": {"cka_taps": ["L-9"]}})").find("L-9"), std::string::npos);
  EXPECT_NE(config_error(R"({"schedule": {"epochs": 10, "lr_decay_epochs": [20]}})").find("schedule"),
            std::string::npos);
  EXPECT_NE(config_error(R"({"seeds": [1, 1]})").find("seeds"), std::string::npos);
  EXPECT_NE(config_error(R"({"pretrain": {"aux_fraction": 1.5}})").find("pretrain.aux_fraction"), std::string::npos);
  EXPECT_NE(config_error(R"({"dataset": {"kind": "imagenet"}})").find("dataset.kind"), std::string::npos);
  EXPECT_NE(config_error("{not json").find("malformed"), std::string::npos);
}

TEST(Config, WeightOverridesApplyToActiveTerms) {
  auto c = parse_config_text(R"({"method": {"name": "PredKD+EWC", "weights": {"ewc": 3.5}}})");
  EXPECT_EQ(c.method.weights.ewc, 3.5);
  EXPECT_EQ(c.method.weights.pred_kd, 1.0);
}

TEST(Config, ExpansionSplitAndDatasetKinds) {
  auto c = parse_config_text(R"({"dataset": {"kind": "synthetic", "num_classes": 20},
                                 "split": {"kind": "expansion", "first": 16, "tail": [4], "seed": 2}})");
  EXPECT_EQ(c.split.sizes(), (std::vector<std::size_t>{16, 4}));
  EXPECT_EQ(c.split.seed, 2u);
  auto cifar = parse_config_text(
      R"({"dataset": {"kind": "cifar", "variant": "cifar10", "train_files": ["a.bin"], "test_files": ["b.bin"]}})");
  EXPECT_EQ(cifar.dataset.train_files, std::vector<std::string>{"a.bin"});
  config_error(R"({"dataset": {"kind": "cifar", "train_files": []}})");
}

TEST(Digest, FnvReferenceVectors) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ULL);
}

TEST(Digest, StableAndSensitive) {
  const std::string text = R"({"schedule": {"epochs": 12, "lr_decay_epochs": [6]}, "seeds": [4]})";
  const auto a = config_digest(parse_config_text(text));
  EXPECT_EQ(a.size(), 16u);
  EXPECT_EQ(a.find_first_not_of("0123456789abcdef"), std::string::npos);
  EXPECT_EQ(a, config_digest(parse_config_text(text)));
  EXPECT_NE(a, config_digest(parse_config_text(R"({"schedule": {"epochs": 13, "lr_decay_epochs": [6]}, "seeds": [4]})")));
  auto moved = parse_config_text(text);
  moved.output_dir = "elsewhere";
  EXPECT_EQ(config_digest(moved), a);
}

TEST(Digest, ResolvedConfigRoundTrips) {
  auto c = parse_config_text(R"({"method": {"name": "PredKD+FeatKD", "featkd_taps": ["pen", "L-2"]},
                                 "pretrain": {"enabled": true, "epochs": 5}})");
  auto back = parse_config(resolved_json(c));
  EXPECT_EQ(resolved_json(back), resolved_json(c));
  EXPECT_EQ(config_digest(back), config_digest(c));
}
