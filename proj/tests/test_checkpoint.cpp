#include <gtest/gtest.h>

#include <fstream>

#include "cbllm/checkpoint.hpp"
#include "cbllm/toy_data.hpp"
#include "cbllm/training.hpp"
#include "test_util.hpp"

using namespace cbllm;
using cbllm::testing::numbered_concepts;
using cbllm::testing::TempDir;

namespace {

CbmModel trained_toy(CblArch arch) {
  auto toy = make_toy_task(3, 40, 10, 3);
  TrainConfig cfg;
  cfg.cbl_arch = arch;
  cfg.cbl_epochs = 2;
  cfg.head_iterations = 30;
  auto model = CbmModel::create(TokenEncoder::random(make_tokenizer("hash:buckets=128:seed=2"), 12, 4),
                                toy.concepts, cfg);
  auto be = std::make_shared<MockBackend>(0, 16);
  auto s = acc_correct(acs_score_dataset(toy.train.texts, *toy.concepts, *be), toy.train.labels,
                       *toy.concepts);
  train_cbl(model, toy.train.texts, s);
  train_predictor(model, toy.train.texts, toy.train.labels);
  return model;
}

}  // namespace

class CheckpointRoundTrip : public ::testing::TestWithParam<CblArch> {};

TEST_P(CheckpointRoundTrip, LogitsAreBitIdentical) {
  auto model = trained_toy(GetParam());
  model.zero_weights(2);
  model.mask_neuron(5);
  TempDir dir;
  save_checkpoint(model, dir.file("m.ckpt"));
  auto back = load_checkpoint(dir.file("m.ckpt"), model.concepts_ptr());
  for (const char* t : {"winning goal today", "fresh bread and spicy sauce", "", "unknown words"}) {
    EXPECT_EQ(model.forward_predict(t).logits, back.forward_predict(t).logits) << t;
  }
  EXPECT_TRUE(back.is_zeroed(2));
  EXPECT_TRUE(back.is_masked(5));
  EXPECT_EQ(back.config().to_json(), model.config().to_json());
  back.restore();
  model.restore();
  EXPECT_EQ(model.head().w, back.head().w);
}

INSTANTIATE_TEST_SUITE_P(Arch, CheckpointRoundTrip,
                         ::testing::Values(CblArch::kLinear, CblArch::kHidden));

TEST(Checkpoint, FeatureBackboneRoundTrip) {
  auto concepts = numbered_concepts({2, 2});
  auto be = std::make_shared<MockBackend>(4, 8);
  auto model = CbmModel::create(std::make_unique<FeatureBackbone>(be), concepts, TrainConfig{});
  TempDir dir;
  save_checkpoint(model, dir.file("f.ckpt"));
  auto back = load_checkpoint(dir.file("f.ckpt"), concepts);
  EXPECT_EQ(model.forward_concepts("x y"), back.forward_concepts("x y"));
}

TEST(Checkpoint, RejectsOtherConceptSet) {
  auto model = trained_toy(CblArch::kLinear);
  TempDir dir;
  save_checkpoint(model, dir.file("m.ckpt"));
  // same k, different text
  auto other = numbered_concepts({4, 4, 4});
  EXPECT_THROW(load_checkpoint(dir.file("m.ckpt"), other), ValidationError);
  auto smaller = numbered_concepts({4, 4});
  try {
    load_checkpoint(dir.file("m.ckpt"), smaller);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("k=12"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, CorruptFiles) {
  auto model = trained_toy(CblArch::kLinear);
  TempDir dir;
  EXPECT_THROW(load_checkpoint(dir.file("missing.ckpt"), model.concepts_ptr()), Error);
  {
    std::ofstream(dir.file("junk.ckpt")) << "not a checkpoint";
  }
  EXPECT_THROW(load_checkpoint(dir.file("junk.ckpt"), model.concepts_ptr()), FormatError);
  save_checkpoint(model, dir.file("m.ckpt"));
  std::filesystem::resize_file(dir.file("m.ckpt"), std::filesystem::file_size(dir.file("m.ckpt")) - 7);
  EXPECT_THROW(load_checkpoint(dir.file("m.ckpt"), model.concepts_ptr()), FormatError);
}
