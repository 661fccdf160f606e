#include "dda/augmentation.hpp"
#include "dda/dataset.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cstring>

#include "dda/remote_diffusion.hpp"

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

std::uint64_t fnv(const Tensor& t) {
  std::uint64_t h = 1469598103934665603ULL;
  for (double v : t.data()) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int k = 0; k < 8; ++k) h = (h ^ ((bits >> (8 * k)) & 0xffU)) * 1099511628211ULL;
  }
  return h;
}

ConvClassifier small_classifier(std::uint64_t seed, std::size_t labels = 10) {
  Rng rng(seed);
  ConvClassifierConfig c;
  c.input = kShape;
  c.labels = labels;
  c.widths = {4, 8, 8};
  return ConvClassifier(c, rng);
}

}  // namespace

TEST(EncodeLatent, DeterministicAndFinite) {
  SurrogateDiffusion backend;
  const auto img = corpus(1).image(0);
  const auto a = encode_latent(backend, img), b = encode_latent(backend, img);
  EXPECT_EQ(a.code, b.code);
  EXPECT_TRUE(encode_latent(backend, Tensor(kShape.batch(1), 0.0)).code.all_finite());
}

TEST(EncodeLatent, OnePixelChangesTheLatentAcrossCorpusPairs) {
  SurrogateDiffusion backend;
  const auto batch = corpus(100);
  for (std::size_t i = 0; i < 100; ++i) {
    Tensor a = batch.image(i), b = a;
    const std::size_t p = (i * 7) % 64;
    b[p] = b[p] > 0.5 ? b[p] - 0.25 : b[p] + 0.25;
    EXPECT_NE(encode_latent(backend, a).code, encode_latent(backend, b).code);
  }
}

TEST(EncodeLatent, RejectsBadShapesAndRanges) {
  SurrogateDiffusion backend;
  EXPECT_THROW(encode_latent(backend, Tensor({2, 1, 8, 8}, 0.5)), ShapeError);
  EXPECT_THROW(encode_latent(backend, Tensor({1, 1, 8, 8}, 1.5)), Error);
}

TEST(DiffuseAugment, SeededSurrogateMatchesGolden) {
  SurrogateDiffusion backend;
  const auto latent = encode_latent(backend, corpus(1).image(0));
  const auto out = diffuse_augment(backend, latent, 1, {1234});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].shape(), kShape.batch(1));
  // Golden hash recorded from the seeded surrogate.
  EXPECT_EQ(fnv(out[0]), 6675632492491663905ULL);
}

TEST(DiffuseAugment, DistinctSeedsGivePairwiseDistinctVariants) {
  SurrogateDiffusion backend;
  const auto batch = corpus(100);
  std::size_t distinct = 0, pairs = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    const auto latent = encode_latent(backend, batch.image(i));
    const auto v = diffuse_augment(backend, latent, 3, {3 * i, 3 * i + 1, 3 * i + 2});
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t b = a + 1; b < 3; ++b, ++pairs) distinct += v[a] != v[b];
  }
  EXPECT_GE(static_cast<double>(distinct) / static_cast<double>(pairs), 0.99);
}

TEST(DiffuseAugment, Preconditions) {
  SurrogateDiffusion backend;
  const auto latent = encode_latent(backend, corpus(1).image(0));
  EXPECT_THROW(diffuse_augment(backend, latent, 0, {}), Error);
  EXPECT_THROW(diffuse_augment(backend, latent, 2, {1}), Error);
}

TEST(DiffuseAugment, PaperScaleSurrogateSettings) {
  HyperParams hp;
  SurrogateDiffusion backend;
  EXPECT_EQ(hp.augmentations, 3u);
  EXPECT_EQ(hp.diffusion_steps, 50u);
  EXPECT_DOUBLE_EQ(hp.guidance_scale, 0.5);
  EXPECT_EQ(backend.steps(), 50u);
  EXPECT_DOUBLE_EQ(backend.guidance_scale(), 0.5);
}

TEST(SelfSupervisedLoss, UniformStudentGivesLogTen) {
  Rng rng(0);
  LinearClassifier student(kShape, 10, rng);
  for (auto& [name, t] : student.named_tensors()) t->fill(0.0);
  EXPECT_NEAR(self_supervised_loss(student, Var(corpus(1).image(0)), 3).item(), std::log(10.0), 1e-12);
}

TEST(SelfSupervisedLoss, SaturatedStudentIsNearZero) {
  Rng rng(0);
  LinearClassifier student(kShape, 4, rng);
  for (auto& [name, t] : student.named_tensors()) {
    t->fill(0.0);
    if (name == "fc.bias") (*t)[2] = 40.0;
  }
  EXPECT_LT(self_supervised_loss(student, Var(corpus(1).image(0)), 2).item(), 1e-10);
  EXPECT_THROW(self_supervised_loss(student, Var(corpus(1).image(0)), 4), Error);
}

TEST(SelfSupervisedLoss, MatchesCrossEntropyOracleOnStudentLogits) {
  const auto batch = corpus(20);
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto student = small_classifier(s);
    const Tensor x = batch.image(s);
    const Vec logits = oracle::values(forward_logits(student, ImageBatch(x, {})));
    const double got = self_supervised_loss(student, Var(x), batch.labels[s]).item();
    EXPECT_NEAR(got, oracle::cross_entropy(logits, 1, 10, {batch.labels[s]}), 1e-10);
    EXPECT_NEAR(row_cross_entropy(oracle::tensor({1, 10}, logits), {batch.labels[s]})[0], got, 1e-12);
  }
}

TEST(SelfSupervisedLoss, DifferentiableWithRespectToStudentParameters) {
  auto student = small_classifier(3);
  const Tensor x = corpus(1).image(0);
  self_supervised_loss(student, Var(x), 1).backward();
  double norm = 0;
  for (auto& p : student.parameters())
    for (double g : p.grad().data()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(Similarity, SelfSymmetryAndBounds) {
  auto teacher = small_classifier(4);
  const auto embed = teacher_embedder(teacher);
  const auto batch = corpus(101);
  for (std::size_t i = 0; i < 100; ++i) {
    const Tensor a = batch.image(i), b = batch.image(i + 1);
    EXPECT_NEAR(similarity(embed, a, a), 1.0, 1e-6);
    const double ab = similarity(embed, a, b);
    EXPECT_EQ(ab, similarity(embed, b, a));
    EXPECT_GE(ab, -1.0);
    EXPECT_LE(ab, 1.0);
  }
}

TEST(Similarity, OrthogonalEmbeddingsGiveZeroAndDegenerateGivesZero) {
  // A linear embedder is the flattened image: disjoint supports are orthogonal.
  Rng rng(5);
  LinearClassifier lin(kShape, 2, rng);
  const auto embed = teacher_embedder(lin);
  Tensor a(kShape.batch(1), 0.0), b(kShape.batch(1), 0.0);
  a[0] = 1.0;
  b[63] = 0.5;
  EXPECT_NEAR(similarity(embed, a, b), 0.0, 1e-6);
  std::vector<std::string> warnings;
  auto prev = log::set_sink([&](log::Level, std::string_view m) { warnings.emplace_back(m); });
  const double z = similarity(embed, a, Tensor(kShape.batch(1), 0.0));
  log::set_sink(prev);
  EXPECT_EQ(z, 0.0);
  EXPECT_EQ(warnings.size(), 1u);
  EXPECT_THROW(similarity(embed, a, Tensor({1, 1, 4, 4}, 0.0)), ShapeError);
}

TEST(FilterMask, StrictThreshold) {
  EXPECT_EQ(filter_mask({0.9, 0.7, 0.76}, 0.75), (std::vector<bool>{true, false, true}));
  EXPECT_EQ(filter_mask({0.75}, 0.75), (std::vector<bool>{false}));
  EXPECT_EQ(filter_mask({-0.99, 0.0, 1.0}, -1.0), (std::vector<bool>{true, true, true}));
  EXPECT_EQ(filter_mask({-0.99, 0.0, 1.0}, 1.0), (std::vector<bool>{false, false, false}));
  EXPECT_THROW(filter_mask({0.1}, 1.5), Error);
}

TEST(FilterMaskProperty, RetainedSetShrinksAsThresholdRises) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 1000; ++trial) {
    const Vec s = oracle::random_vec(1 + rng() % 8, rng, -1.0, 1.0);
    auto w = oracle::random_vec(2, rng, -1.0, 1.0);
    std::sort(w.begin(), w.end());
    const auto lo = filter_mask(s, w[0]), hi = filter_mask(s, w[1]);
    for (std::size_t k = 0; k < s.size(); ++k) {
      ASSERT_TRUE(!hi[k] || lo[k]);
      ASSERT_EQ(lo[k], s[k] > w[0]);
    }
  }
}

class Pipeline : public ::testing::Test {
 protected:
  ConvClassifier teacher = small_classifier(7);
  ConvClassifier student = small_classifier(8);
  SurrogateDiffusion backend;
  HyperParams hp;
  AugmentOptions opt;
  ImageBatch batch = corpus(12);

  AugmentResult run() { return augment_pipeline(batch, student, backend, teacher_embedder(teacher), hp, opt); }
};

TEST_F(Pipeline, RecordsSatisfyTheirInvariants) {
  const auto r = run();
  ASSERT_EQ(r.records.size(), batch.size());
  EXPECT_FALSE(r.degraded);
  EXPECT_LE(r.retained_count(), hp.augmentations * batch.size());
  for (std::size_t i = 0; i < r.records.size(); ++i) {
    const auto& rec = r.records[i];
    EXPECT_EQ(rec.label, batch.labels[i]);
    EXPECT_EQ(rec.source, batch.image(i));
    ASSERT_EQ(rec.variants.size(), hp.augmentations);
    EXPECT_EQ(rec.self_losses.size(), hp.augmentations);
    EXPECT_LE(rec.retained_count(), hp.augmentations);
    for (std::size_t k = 0; k < rec.variants.size(); ++k) {
      EXPECT_EQ(rec.mask[k], rec.similarities[k] > hp.omega);
      EXPECT_NEAR(rec.similarities[k], similarity(teacher_embedder(teacher), rec.source, rec.variants[k]), 1e-12);
      EXPECT_GE(rec.self_losses[k], 0.0);
    }
  }
}

TEST_F(Pipeline, LowestThresholdRetainsEverything) {
  hp.omega = -1.0;
  const auto r = run();
  for (const auto& rec : r.records) EXPECT_EQ(rec.retained_count(), hp.augmentations);
}

TEST_F(Pipeline, IdentityBackendRetainsEverythingBelowOne) {
  IdentityDiffusion identity;
  hp.omega = 0.999;
  const auto r = augment_pipeline(batch, student, identity, teacher_embedder(teacher), hp, opt);
  for (const auto& rec : r.records) {
    for (double s : rec.similarities) EXPECT_NEAR(s, 1.0, 1e-12);
    EXPECT_EQ(rec.retained_count(), hp.augmentations);
  }
}

TEST_F(Pipeline, BitwiseReproducible) {
  const auto a = run(), b = run();
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].variants, b.records[i].variants);
    EXPECT_EQ(a.records[i].similarities, b.records[i].similarities);
    EXPECT_EQ(a.records[i].mask, b.records[i].mask);
  }
  opt.seed = 99;
  EXPECT_NE(run().records[0].variants, a.records[0].variants);
}

TEST_F(Pipeline, RejectsEmptyOrUnlabeledBatches) {
  batch = ImageBatch();
  EXPECT_THROW(run(), Error);
  batch = ImageBatch(corpus(2).images, {});
  EXPECT_THROW(run(), Error);
}

TEST_F(Pipeline, UnreachableRemoteBackendDegradesTheRound) {
  RemoteDiffusionConfig rc;
  rc.endpoint = "http://127.0.0.1:1/diffuse";
  rc.attempts = 2;
  rc.backoff_ms = 1;
  rc.timeout_ms = 200;
  RemoteDiffusion remote(rc);
  std::vector<std::string> warnings;
  auto prev = log::set_sink([&](log::Level, std::string_view m) { warnings.emplace_back(m); });
  const auto r = augment_pipeline(batch, student, remote, teacher_embedder(teacher), hp, opt);
  log::set_sink(prev);
  EXPECT_TRUE(r.degraded);
  EXPECT_EQ(r.variant_count(), 0u);
  EXPECT_FALSE(warnings.empty());
}

TEST(RemoteBackend, ServedSurrogateMatchesLocalSurrogate) {
  SurrogateDiffusion local;
  httplib::Server server;
  install_diffusion_endpoint(server, local);
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  RemoteDiffusionConfig rc;
  rc.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/diffuse";
  RemoteDiffusion remote(rc);
  const auto img = corpus(1).image(0);
  const auto via_remote = diffuse_augment(remote, encode_latent(remote, img), 3, {1, 2, 3});
  const auto via_local = diffuse_augment(local, encode_latent(local, img), 3, {1, 2, 3});
  server.stop();
  t.join();
  EXPECT_EQ(via_remote, via_local);
  EXPECT_EQ(remote.version(), local.version());
}

TEST(PixelWireFormat, RoundTripsExactly) {
  std::mt19937_64 rng(9);
  const Tensor t = oracle::tensor({1, 1, 3, 5}, oracle::random_vec(15, rng));
  EXPECT_EQ(decode_pixels(encode_pixels(t), t.shape()), t);
  EXPECT_THROW(decode_pixels("AAAA", t.shape()), FormatError);
}

TEST(AdaptiveIntensity, HarderClassesGetStrongerVariationsWithinBounds) {
  AugmentationRecord easy, hard;
  easy.label = 0;
  easy.mask = {true, true};
  easy.self_losses = {0.1, 0.1};
  hard.label = 1;
  hard.mask = {true, false};
  hard.self_losses = {10.0, 100.0};
  AdaptiveIntensityPolicy policy;
  policy.update({easy, hard});
  EXPECT_DOUBLE_EQ(policy.scale(0), 0.5);
  EXPECT_DOUBLE_EQ(policy.scale(1), 2.0);
  EXPECT_DOUBLE_EQ(policy.scale(7), 1.0);
  AdaptiveIntensityPolicy off(false);
  off.update({easy, hard});
  EXPECT_DOUBLE_EQ(off.scale(1), 1.0);
}
