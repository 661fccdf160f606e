#include "dda/dataset.hpp"
#include "dda/distillation.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace dda;
using oracle::Vec;

namespace {

const ImageShape kShape{1, 8, 8};

ImageBatch corpus(std::size_t n) {
  static const ImageBatch test = load_split(read_manifest(std::filesystem::path(DDA_SOURCE_DIR) / "data" / "digits"), "test");
  std::vector<Tensor> imgs;
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < n; ++i) {
    imgs.push_back(test.image(i));
    labels.push_back(test.labels[i]);
  }
  return ImageBatch(stack_images(imgs), labels);
}

ConvClassifierConfig small_config() {
  ConvClassifierConfig c;
  c.input = kShape;
  c.labels = 10;
  c.widths = {4, 8, 8};
  return c;
}

void copy_weights(Classifier& from, Classifier& to) {
  auto src = from.named_tensors(), dst = to.named_tensors();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = *src[i].second;
}

}  // namespace

TEST(KdLoss, IdenticalLogitsGiveZero) {
  std::mt19937_64 rng(1);
  const Tensor t = oracle::tensor({3, 5}, oracle::random_vec(15, rng));
  for (double tau : {0.5, 1.0, 4.0, 20.0}) EXPECT_NEAR(kd_loss(t, t, tau), 0.0, 1e-10);
}

TEST(KdLoss, HandEvaluatedTwoClassCase) {
  const Tensor t({1, 2}, {std::log(3.0), 0.0}), s({1, 2}, {0.0, 0.0});
  EXPECT_NEAR(kd_loss(t, s, 1.0), 0.75 * std::log(1.5) + 0.25 * std::log(0.5), 1e-12);
  EXPECT_NEAR(kd_loss(t, s, 1.0), 0.130812, 1e-6);
}

TEST(KdLoss, ShiftedLogitsGiveZero) {
  std::mt19937_64 rng(2);
  const Vec t = oracle::random_vec(8, rng);
  Vec s = t;
  for (std::size_t i = 0; i < 4; ++i) s[i] += 3.0;
  for (std::size_t i = 4; i < 8; ++i) s[i] -= 1.5;
  EXPECT_NEAR(kd_loss(oracle::tensor({2, 4}, t), oracle::tensor({2, 4}, s), 2.0), 0.0, 1e-10);
}

TEST(KdLoss, DecreasesAsTemperatureRises) {
  const Tensor t({1, 3}, {2.0, -1.0, 0.5}), s({1, 3}, {-0.5, 1.0, 0.0});
  double prev = std::numeric_limits<double>::infinity();
  // The softened KL shrinks toward 0. The tau^2-scaled loss instead rises to a
  // finite limit, so the KL is recovered by dividing the factor back out.
  for (double tau : {1.0, 2.0, 4.0, 8.0}) {
    const double kl = kd_loss(t, s, tau) / (tau * tau);
    EXPECT_LT(kl, prev);
    prev = kl;
  }
}

TEST(KdLoss, MatchesOracleAndIsNonNegative) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t b = 1 + rng() % 4, c = 2 + rng() % 6;
    const Vec t = oracle::random_vec(b * c, rng, -5, 5), s = oracle::random_vec(b * c, rng, -5, 5);
    const double tau = oracle::random_vec(1, rng, 0.5, 8.0)[0];
    const double got = kd_loss(oracle::tensor({b, c}, t), oracle::tensor({b, c}, s), tau);
    EXPECT_GE(got, 0.0);
    EXPECT_LT(oracle::relative_diff(got, oracle::kd_kl(t, s, b, c, tau)), 1e-10);
  }
}

TEST(KdLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const Var t(oracle::tensor({3, 4}, oracle::random_vec(12, rng)));
    const auto r = testutil::grad_check({3, 4}, oracle::random_vec(12, rng), [&](const Var& s) { return kd_loss(t, s, 4.0); });
    EXPECT_LT(r.relative_error, 1e-3);
  }
}

TEST(KdLoss, RejectsBadTemperatureAndShapes) {
  const Tensor t({1, 2}, {1, 2});
  EXPECT_THROW(kd_loss(t, t, 0.0), Error);
  EXPECT_THROW(kd_loss(t, Tensor({1, 3}), 1.0), ShapeError);
}

TEST(TotalLoss, WeightedSum) {
  HyperParams hp;
  hp.eta_kl = hp.eta_synth = hp.eta_self = 0.0;
  EXPECT_EQ(total_loss(1.0, 2.0, 3.0, hp), 0.0);
  hp.eta_kl = 1.0;
  EXPECT_EQ(total_loss(0.37, 2.0, 3.0, hp), 0.37);
  hp.eta_synth = 0.1;
  hp.eta_self = 0.5;
  EXPECT_NEAR(total_loss(0.13, 2.0, 2.3, hp), 1.48, 1e-12);
}

TEST(TotalLoss, LinearInEachComponent) {
  std::mt19937_64 rng(5);
  HyperParams hp;
  for (int trial = 0; trial < 100; ++trial) {
    const auto v = oracle::random_vec(4, rng, 0, 3);
    const double base = total_loss(v[0], v[1], v[2], hp);
    EXPECT_NEAR(total_loss(v[0] + v[3], v[1], v[2], hp) - base, hp.eta_kl * v[3], 1e-12);
    EXPECT_NEAR(total_loss(v[0], v[1] + v[3], v[2], hp) - base, hp.eta_synth * v[3], 1e-12);
    EXPECT_NEAR(total_loss(v[0], v[1], v[2] + v[3], hp) - base, hp.eta_self * v[3], 1e-12);
    EXPECT_NEAR(total_loss(Var(Tensor::scalar(v[0])), Var(Tensor::scalar(v[1])), Var(Tensor::scalar(v[2])), hp).item(), base,
                1e-12);
  }
}

TEST(DistillPool, CachesTeacherLogitsAndFlags) {
  Rng rng(6);
  ConvClassifier teacher(small_config(), rng);
  DistillPool pool(kShape, 10, 5);
  const auto data = corpus(4);
  pool.add(data.images, data.labels, {1, 0, 1, 0}, teacher);
  EXPECT_EQ(pool.variant_count(), 2u);
  const auto b = pool.gather({2, 1});
  EXPECT_EQ(b.variant_rows, (std::vector<std::size_t>{0}));
  EXPECT_EQ(b.labels[0], data.labels[2]);
  const auto want = forward_logits(teacher, ImageBatch(data.image(2), {}));
  for (std::size_t c = 0; c < 10; ++c) EXPECT_EQ(b.teacher_logits[c], want[c]);
  pool.add(data.images, data.labels, {0, 0, 0, 0}, teacher);
  EXPECT_EQ(pool.size(), 5u);  // oldest dropped beyond capacity
  EXPECT_THROW(pool.add(data.images, {0, 1}, {0, 0}, teacher), ShapeError);
  EXPECT_THROW(pool.gather({9}), Error);
}

TEST(StudentEpoch, SelfDistillationFromAnIdenticalCopyStaysAtZero) {
  Rng rng(7);
  ConvClassifier teacher(small_config(), rng), student(small_config(), rng);
  copy_weights(teacher, student);
  DistillPool pool(kShape, 10);
  const auto data = corpus(64);
  pool.add(data.images, data.labels, std::vector<char>(64, 0), teacher);
  HyperParams hp;
  hp.eta_self = 0.0;
  StudentOptimConfig cfg;
  cfg.batch_size = 16;
  cfg.bn_train_mode = false;
  DistillState state(student, cfg);
  Rng train(8);
  for (int e = 0; e < 3; ++e) train_student_epoch(state, pool, hp, 0.0, 0, train);
  EXPECT_EQ(state.history.front().kd, 0.0);
  for (const auto& r : state.history) EXPECT_LT(r.kd, 1e-3);
}

TEST(StudentEpoch, OverfitsASingleBatch) {
  Rng rng(9);
  ConvClassifier teacher(small_config(), rng), student(small_config(), rng);
  DistillPool pool(kShape, 10);
  const auto data = corpus(32);
  pool.add(data.images, data.labels, std::vector<char>(32, 0), teacher);
  HyperParams hp;
  StudentOptimConfig cfg;
  cfg.batch_size = 32;
  cfg.lr = 0.05;
  cfg.bn_train_mode = false;
  DistillState state(student, cfg);
  Rng train(10);
  for (int e = 0; e < 200; ++e) train_student_epoch(state, pool, hp, 0.0, 0, train);
  const auto t = predict(teacher, data.images), s = predict(student, data.images);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < t.size(); ++i) agree += t[i] == s[i];
  EXPECT_GE(static_cast<double>(agree) / 32.0, 0.95);
}

TEST(StudentEpoch, HistoryHasOneEntryPerStep) {
  Rng rng(11);
  ConvClassifier teacher(small_config(), rng), student(small_config(), rng);
  DistillPool pool(kShape, 10);
  const auto data = corpus(50);
  pool.add(data.images, data.labels, std::vector<char>(50, 1), teacher);
  StudentOptimConfig cfg;
  cfg.batch_size = 16;
  DistillState state(student, cfg);
  Rng train(12);
  std::size_t steps = 0;
  for (int e = 0; e < 3; ++e) steps += train_student_epoch(state, pool, HyperParams{}, 1.5, 0, train).steps;
  EXPECT_EQ(state.history.size(), steps);
  EXPECT_EQ(state.step, steps);
  for (const auto& r : state.history) {
    EXPECT_GT(r.self_sup, 0.0);
    EXPECT_EQ(r.synth, 1.5);
    EXPECT_NEAR(r.total, total_loss(r.kd, r.synth, r.self_sup, HyperParams{}), 1e-12);
  }
}

TEST(StudentEpoch, NonFiniteLossRestoresWeightsAndFaults) {
  Rng rng(13);
  ConvClassifier teacher(small_config(), rng), student(small_config(), rng);
  DistillPool pool(kShape, 10);
  const auto data = corpus(8);
  pool.add(data.images, data.labels, std::vector<char>(8, 0), teacher);
  HyperParams hp;
  hp.kd_temperature = 1e-320;
  DistillState state(student, StudentOptimConfig{});
  const auto before = checksum(student);
  Rng train(14);
  try {
    train_student_epoch(state, pool, hp, 0.0, 0, train);
    FAIL() << "expected a pipeline fault";
  } catch (const PipelineFault& f) {
    EXPECT_EQ(f.stage(), "distillation");
  }
  EXPECT_EQ(checksum(student), before);
  DistillPool empty(kShape, 10);
  EXPECT_THROW(train_student_epoch(state, empty, HyperParams{}, 0.0, 0, train), Error);
}

class Loop : public ::testing::Test {
 protected:
  Rng init{15};
  ConvClassifier teacher{small_config(), init};
  ConvClassifier student{[] {
                           auto c = small_config();
                           c.widths = {2, 4, 4};
                           return c;
                         }(),
                         init};
  Generator gen{[] {
                  GeneratorConfig g;
                  g.latent_dim = 8;
                  g.channels = 8;
                  g.output = kShape;
                  return g;
                }(),
                init};
  Discriminator disc{DiscriminatorConfig{discriminator_input_dim(teacher), 16, 8}, init};
  MemoryBank bank{64, kShape};
  SurrogateDiffusion backend;
  HyperParams hp;
  DistillSchedule schedule;
  DistillOptions opt;
  ImageBatch eval = corpus(40);

  Loop() {
    schedule.rounds = 2;
    schedule.synth_batch = 10;
    schedule.synth_steps = 3;
    schedule.epochs_per_round = 1;
    schedule.student.batch_size = 16;
  }
  DistillComponents parts() { return {&teacher, &student, &gen, &disc, &bank, &backend}; }
};

TEST_F(Loop, ZeroRoundsLeavesTheStudentUnchanged) {
  schedule.rounds = 0;
  const auto before = checksum(student);
  const auto r = run_dda(parts(), hp, schedule, opt, &eval);
  EXPECT_TRUE(r.ok());
  EXPECT_TRUE(r.rounds.empty());
  EXPECT_TRUE(r.history.empty());
  EXPECT_FALSE(r.final_accuracy);
  EXPECT_EQ(checksum(student), before);
}

TEST_F(Loop, TeacherUntouchedAndAllTermsLogged) {
  std::size_t hook_calls = 0;
  const auto r = run_dda(parts(), hp, schedule, opt, &eval,
                         [&](const RoundReport& rr, const ImageBatch& b, const std::vector<AugmentationRecord>& recs) {
                           ++hook_calls;
                           EXPECT_EQ(b.size(), 10u);
                           EXPECT_EQ(recs.size(), 10u);
                           EXPECT_EQ(rr.variants, 30u);
                         });
  ASSERT_TRUE(r.ok()) << r.failure;
  EXPECT_EQ(hook_calls, 2u);
  EXPECT_EQ(r.teacher_checksum_before, r.teacher_checksum_after);
  EXPECT_EQ(r.rounds.size(), 2u);
  ASSERT_TRUE(r.final_accuracy);
  EXPECT_FALSE(r.history.empty());
  for (const auto& h : r.history) EXPECT_TRUE(std::isfinite(h.kd) && std::isfinite(h.synth) && std::isfinite(h.self_sup));
  EXPECT_EQ(bank.size(), 20u);
  // Teacher parameters are trainable again after the run.
  for (auto& p : teacher.parameters()) EXPECT_TRUE(p.requires_grad());
}

TEST_F(Loop, AblationsChangeWhatReachesTheStudent) {
  opt.use_diffusion = false;
  auto r = run_dda(parts(), hp, schedule, opt, &eval);
  ASSERT_TRUE(r.ok());
  for (const auto& rr : r.rounds) {
    EXPECT_EQ(rr.variants, 0u);
    EXPECT_EQ(rr.pool_size, 10u * (rr.round + 1));
  }
  opt.use_diffusion = true;
  opt.use_filter = false;
  r = run_dda(parts(), hp, schedule, opt, &eval);
  ASSERT_TRUE(r.ok());
  for (const auto& rr : r.rounds) EXPECT_EQ(rr.retained, rr.variants);
}

TEST(LoopDeterminism, IdenticalSeedsGiveIdenticalHistories) {
  auto once = [] {
    Rng init(16);
    ConvClassifier teacher(small_config(), init), student(small_config(), init);
    GeneratorConfig g;
    g.latent_dim = 8;
    g.channels = 8;
    g.output = kShape;
    Generator gen(g, init);
    Discriminator disc(DiscriminatorConfig{discriminator_input_dim(teacher), 16, 8}, init);
    MemoryBank bank(64, kShape);
    SurrogateDiffusion backend;
    DistillSchedule s;
    s.rounds = 2;
    s.synth_batch = 8;
    s.synth_steps = 2;
    s.epochs_per_round = 1;
    s.student.batch_size = 8;
    DistillOptions opt;
    opt.seed = 5;
    return run_dda({&teacher, &student, &gen, &disc, &bank, &backend}, HyperParams{}, s, opt);
  };
  const auto a = once(), b = once();
  ASSERT_TRUE(a.ok());
  EXPECT_EQ(a.history, b.history);
}

TEST_F(Loop, StageFaultIsReportedWithPartialResults) {
  // A backend that breaks in round 1 with a non-retriable error.
  struct Broken final : DiffusionBackend {
    SurrogateDiffusion inner;
    mutable int calls = 0;
    std::string kind() const override { return "broken"; }
    std::string version() const override { return "broken"; }
    std::size_t steps() const override { return 1; }
    double guidance_scale() const override { return 0; }
    Latent encode(const Tensor& image) const override { return inner.encode(image); }
    Tensor generate(const Latent& l, std::uint64_t s, double i) const override { return inner.generate(l, s, i); }
    std::vector<Tensor> generate_batch(const std::vector<Request>& r) const override {
      if (calls++ > 0) throw std::runtime_error("decoder crashed");
      return DiffusionBackend::generate_batch(r);
    }
  } broken;
  DistillComponents c = parts();
  c.backend = &broken;
  const auto r = run_dda(c, hp, schedule, opt, &eval);
  EXPECT_FALSE(r.ok());
  EXPECT_EQ(r.failed_stage, "augmentation");
  EXPECT_EQ(r.rounds.size(), 1u);
  EXPECT_EQ(r.teacher_checksum_before, r.teacher_checksum_after);
}

TEST_F(Loop, MismatchedComponentsAreRejected) {
  DistillComponents c = parts();
  c.backend = nullptr;
  EXPECT_THROW(run_dda(c, hp, schedule, opt), Error);
  Rng rng(17);
  LinearClassifier other({1, 4, 4}, 10, rng);
  c = parts();
  c.student = &other;
  EXPECT_THROW(run_dda(c, hp, schedule, opt), ShapeError);
}
