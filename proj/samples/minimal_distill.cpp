// Library-level walk through the pipeline without the CLI: train a small
// teacher, then distill it into a half-width student for a few rounds.
//
//   ./minimal_distill [path/to/manifest.json]

#include "dda/dataset.hpp"
#include "dda/distillation.hpp"
#include "dda/trainer.hpp"

#include <iostream>

int main(int argc, char** argv) {
  using namespace dda;
  const std::string manifest_path = argc > 1 ? argv[1] : "data/digits/manifest.json";
  try {
    const auto manifest = read_manifest(manifest_path);
    const auto train = load_split(manifest, "train");
    const auto test = load_split(manifest, "test");

    Rng rng(0);
    ConvClassifierConfig tc;
    tc.input = manifest.shape;
    tc.labels = manifest.classes;
    ConvClassifier teacher(tc, rng);
    SupervisedConfig sc;
    sc.epochs = 8;
    train_supervised(teacher, train, sc);
    std::cout << "teacher accuracy " << accuracy(teacher, test) << "\n";

    ConvClassifier student(half_width(tc), rng);
    GeneratorConfig gc;
    gc.output = manifest.shape;
    Generator generator(gc, rng);
    DiscriminatorConfig dc;
    dc.input_dim = discriminator_input_dim(teacher);
    Discriminator discriminator(dc, rng);
    MemoryBank bank(500, manifest.shape);
    SurrogateDiffusion diffusion{SurrogateDiffusionConfig{}};

    HyperParams hp;
    hp.beta = 2.0;
    DistillSchedule schedule;
    schedule.rounds = 3;
    schedule.synth_lr = schedule.disc_lr = 0.005;
    schedule.latent_lr = 0.2;
    DistillOptions opt;
    opt.contrastive.policy.flip_prob = 0.0;

    const auto report = run_dda({&teacher, &student, &generator, &discriminator, &bank, &diffusion}, hp, schedule,
                                opt, &test,
                                [](const RoundReport& r, const ImageBatch&, const std::vector<AugmentationRecord>&) {
                                  std::cout << "round " << r.round << ": kept " << r.retained << "/" << r.variants
                                            << " variants, student " << r.student_accuracy.value_or(0.0) << "\n";
                                });
    if (!report.ok()) {
      std::cerr << report.failed_stage << ": " << report.failure << "\n";
      return 2;
    }
    std::cout << "student accuracy " << report.final_accuracy.value_or(0.0) << "\n";
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }
}
