// Trains Baseline and LocalOpt on a small corpus and prints per-block
// teacher-forced and free-running losses next to the mean step time.

#include <cstdio>
#include <string>
#include <vector>

#include "arlab/evalharness.hpp"

using namespace arlab;

int main() {
  CorpusConfig corpus;
  corpus.frames = 33;  // 9 blocks
  corpus.spatial = 4;
  corpus.codebook_size = 32;
  corpus.dim = 2;
  corpus.classes = 4;
  corpus.regimes = 2;
  corpus.stamp_vectors = 2;
  const Dataset ds = make_dataset(corpus, 200, 1);

  ModelConfig mc;
  mc.codebook_size = corpus.codebook_size;
  mc.condition_vocab = corpus.classes;
  mc.d_model = 32;
  mc.n_layers = 2;
  mc.n_heads = 2;
  mc.max_positions = corpus.tokens_per_sequence() + 1;

  for (Strategy s : {Strategy::Baseline, Strategy::LocalOpt}) {
    StrategyConfig sc;
    sc.strategy = s;
    sc.window = 12;  // three blocks
    sc.stride = 4;
    sc.optimizer.learning_rate = 3e-3;
    Model model(mc, 2);
    TrainState state = init_train_state(sc);
    double ms = 0.0;
    train(model, ds.train, sc, 400, state, [&](const TrainLogRow& r) { ms += r.step_wall_ms / 400; });

    GenerationPlan plan;
    plan.sampling.seed = 3;
    const LossCurve tf = per_position_loss(model, ds.eval, LossMode::TeacherForced);
    const LossCurve fr = per_position_loss(model, ds.eval, LossMode::FreeRunning, plan);
    std::printf("%s: %.2f ms/step\n  block  teacher_forced  free_running\n", std::string(strategy_name(s)).c_str(), ms);
    for (int b = 0; b < corpus.blocks(); ++b) {
      std::printf("  %5d  %14.3f  %12.3f\n", b + 1, tf.block_mean(b), fr.block_mean(b));
    }
  }
}
