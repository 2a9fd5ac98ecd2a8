#include <gtest/gtest.h>

#include <random>

#include "rfcl/adam.hpp"
#include "rfcl/model.hpp"
#include "support.hpp"

using namespace rfcl;
using rfcl::testing::loop_forward;
using rfcl::testing::random_tensor;

namespace {

Model small_model(std::uint64_t seed, std::vector<std::size_t> blocks = {3, 2}) {
  Rng rng(seed);
  Model m(EncoderSpec{5, {8, 6, 4}}, rng);
  for (auto b : blocks) m.expand_head(b, rng);
  return m;
}

std::vector<double> logits_of(const Model& m, const Tensor& x) {
  Tape tape = Tape::inference();
  auto l = m.forward(tape, x).logits;
  return {l.values().begin(), l.values().end()};
}

}  // namespace

TEST(Model, TapNamesAreRearAligned) {
  Rng rng(1);
  Model m(EncoderSpec{3, {16, 16, 16, 8}}, rng);
  EXPECT_EQ(m.tap_names(), (std::vector<std::string>{"L-4", "L-3", "L-2", "pen", "linear"}));
  Model shallow(EncoderSpec{3, {4}}, rng);
  EXPECT_EQ(shallow.tap_names(), (std::vector<std::string>{"pen", "linear"}));
}

TEST(Model, DefaultEncoderWidths) {
  EXPECT_EQ(EncoderSpec{}.hidden_dims, (std::vector<std::size_t>{256, 128, 128, 64}));
}

TEST(Model, ZeroInitializedModelOutputsBias) {
  auto m = small_model(2);
  for (auto& p : m.named_parameters()) {
    if (p.name.ends_with("weight")) std::fill(p.tensor.values().begin(), p.tensor.values().end(), 0.0);
  }
  auto bias0 = m.head().blocks()[0].bias;
  auto bias1 = m.head().blocks()[1].bias;
  std::mt19937_64 rng(3);
  auto l = logits_of(m, random_tensor({4, 5}, rng));
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(l[r * 5 + j], bias0[j]);
    for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(l[r * 5 + 3 + j], bias1[j]);
  }
}

TEST(Model, BatchIndependence) {
  auto m = small_model(4);
  std::mt19937_64 rng(5);
  auto batch = random_tensor({8, 5}, rng);
  auto all = logits_of(m, batch);
  for (std::size_t r = 0; r < 8; ++r) {
    std::vector<double> row(batch.values().begin() + r * 5, batch.values().begin() + (r + 1) * 5);
    auto single = logits_of(m, Tensor({1, 5}, row));
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(single[j], all[r * 5 + j]);
  }
}

TEST(Model, ForwardMatchesLayerLoopOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto m = small_model(seed);
    std::mt19937_64 rng(seed + 100);
    auto x = random_tensor({6, 5}, rng, -2, 2);
    auto l = logits_of(m, x);
    auto ref = loop_forward(m, {x.values().begin(), x.values().end()}, 6);
    for (std::size_t i = 0; i < l.size(); ++i) {
      EXPECT_LE(std::abs(l[i] - ref.logits[i]), 1e-12 * std::max(1.0, std::abs(ref.logits[i])));
    }
  }
}

TEST(Model, TapConsistencyPenFeedsHead) {
  auto m = small_model(6);
  std::mt19937_64 rng(7);
  auto x = random_tensor({5, 5}, rng);
  Tape tape = Tape::inference();
  auto out = m.forward(tape, x, {"pen", "L-2", "linear"});
  const auto& pen = out.activations.at("pen");
  for (double v : pen.values()) EXPECT_GE(v, 0.0);
  Tape t2 = Tape::inference();
  std::vector<Tensor> parts;
  for (const auto& b : m.head().blocks()) parts.push_back(b.apply(t2, pen));
  auto recomputed = t2.concat_cols(parts);
  for (std::size_t i = 0; i < recomputed.size(); ++i) EXPECT_EQ(recomputed[i], out.logits[i]);
  EXPECT_EQ(out.activations.at("linear")[0], out.logits[0]);
}

TEST(Model, ForwardErrors) {
  auto m = small_model(8);
  Tape tape;
  EXPECT_THROW(m.forward(tape, Tensor::zeros({2, 4})), DimensionError);
  EXPECT_THROW(m.forward(tape, Tensor::zeros({2, 5}), {"L-7"}), DimensionError);
}

TEST(Model, ExpansionPreservesOldLogitsBitwise) {
  auto m = small_model(9, {10});
  std::mt19937_64 rng(10);
  auto probe = random_tensor({7, 5}, rng);
  auto before = logits_of(m, probe);
  Rng r2(11);
  m.expand_head(5, r2);
  EXPECT_EQ(m.num_classes(), 15u);
  auto after = logits_of(m, probe);
  for (std::size_t r = 0; r < 7; ++r) {
    for (std::size_t j = 0; j < 10; ++j) EXPECT_EQ(after[r * 15 + j], before[r * 10 + j]);
  }
}

TEST(Model, ExpansionByZeroRejected) {
  auto m = small_model(12);
  Rng rng(1);
  EXPECT_THROW(m.expand_head(0, rng), DomainError);
}

TEST(Model, SequentialExpansionsBookkeeping) {
  auto m = small_model(13, {5, 5});
  EXPECT_EQ(m.head().block_sizes(), (std::vector<std::size_t>{5, 5}));
  EXPECT_EQ(m.head().offset(1), 5u);
  EXPECT_EQ(m.head().width(), 10u);
}

TEST(Model, HeadInitWithinFanInBound) {
  Rng rng(14);
  Model m(EncoderSpec{5, {64}}, rng);
  m.expand_head(10, rng);
  const double bound = 1.0 / std::sqrt(64.0);
  for (double v : m.head().blocks()[0].weight.values()) EXPECT_LE(std::abs(v), bound);
  for (double v : m.head().blocks()[0].bias.values()) EXPECT_LE(std::abs(v), bound);
}

TEST(Checkpoint, FrozenCopyIsUnaffectedByTraining) {
  auto m = small_model(15);
  auto ckpt = freeze_checkpoint(m, 0);
  std::mt19937_64 rng(16);
  auto probe = random_tensor({4, 5}, rng);
  auto live = logits_of(m, probe);
  auto frozen_before = ckpt.forward(probe).logits;
  for (std::size_t i = 0; i < live.size(); ++i) EXPECT_EQ(frozen_before[i], live[i]);
  const auto digest = parameter_digest(ckpt.model());

  Adam adam(m.named_parameters(), AdamOptions{.learning_rate = 0.05});
  for (int step = 0; step < 10; ++step) {
    adam.zero_grad();
    Tape tape;
    auto out = m.forward(tape, probe);
    tape.backward(tape.sum(tape.square(out.logits)));
    adam.step();
  }
  auto frozen_after = ckpt.forward(probe).logits;
  for (std::size_t i = 0; i < frozen_after.size(); ++i) EXPECT_EQ(frozen_after[i], frozen_before[i]);
  EXPECT_EQ(parameter_digest(ckpt.model()), digest);
  EXPECT_NE(parameter_digest(m), digest);
}

TEST(Checkpoint, FreezeOfFreezeIsEqual) {
  auto m = small_model(17);
  auto a = freeze_checkpoint(m, 2);
  auto b = freeze_checkpoint(a);
  EXPECT_EQ(parameter_digest(a.model()), parameter_digest(b.model()));
  EXPECT_EQ(b.source_task(), 2u);
}

TEST(Checkpoint, HasNoGradientSlotsAndCannotBeOptimized) {
  auto ckpt = freeze_checkpoint(small_model(18), 0);
  for (const auto& p : ckpt.model().named_parameters()) {
    EXPECT_FALSE(p.tensor.requires_grad());
    EXPECT_FALSE(p.tensor.has_grad());
  }
  Adam adam;
  auto params = ckpt.model().named_parameters();
  EXPECT_THROW(adam.add_parameter(params[0].name, params[0].tensor), StateError);
}

TEST(Checkpoint, FisherMustBeCongruent) {
  auto ckpt = freeze_checkpoint(small_model(19), 0);
  FisherDiagonal bad(0);
  bad.set("encoder.0.weight", std::vector<double>(3, 1.0));
  EXPECT_THROW(ckpt.attach_fisher(bad), DimensionError);
  FisherDiagonal good(0);
  for (const auto& p : ckpt.model().named_parameters()) good.set(p.name, std::vector<double>(p.tensor.size(), 0.5));
  ckpt.attach_fisher(good);
  EXPECT_TRUE(ckpt.fisher().has_value());
}

TEST(Model, LoadEncoderCopiesOnlyEncoder) {
  auto a = small_model(20);
  auto b = small_model(21);
  const auto head_before = b.head().blocks()[0].weight.clone();
  b.load_encoder_from(a);
  for (std::size_t i = 0; i < a.layers().size(); ++i) {
    for (std::size_t k = 0; k < a.layers()[i].weight.size(); ++k) {
      EXPECT_EQ(b.layers()[i].weight[k], a.layers()[i].weight[k]);
    }
  }
  for (std::size_t k = 0; k < head_before.size(); ++k) EXPECT_EQ(b.head().blocks()[0].weight[k], head_before[k]);
  Rng rng(1);
  Model other(EncoderSpec{5, {8, 6}}, rng);
  EXPECT_THROW(other.load_encoder_from(a), DimensionError);
}

TEST(Model, FreezingAHeadBlockRemovesItFromTraining) {
  auto m = small_model(22);
  m.set_head_block_trainable(0, false);
  EXPECT_FALSE(m.head().blocks()[0].weight.requires_grad());
  EXPECT_TRUE(m.head().blocks()[1].weight.requires_grad());
}
