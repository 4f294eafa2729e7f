#include <benchmark/benchmark.h>

#include <filesystem>
#include <random>
#include <string>

#include "deepstack/data.hpp"
#include "deepstack/objectives.hpp"
#include "deepstack/ops.hpp"
#include "deepstack/tokenizer.hpp"
#include "deepstack/toy.hpp"
#include "deepstack/train.hpp"

using namespace deepstack;

namespace {

std::string corpus_text() {
  const auto path = std::filesystem::path(DEEPSTACK_SOURCE_DIR) / "data/toy_corpus.txt";
  std::string text;
  for (const auto& d : read_documents(path)) text += d + "\n";
  return text;
}

Tensor<float> random_tensor(const Shape& shape, std::uint64_t seed, bool grad) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  std::vector<float> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor<float>(shape, std::move(v), grad);
}

ModelConfig toy_decoder(std::size_t layers) {
  ModelConfig c;
  c.name = "bench-decoder";
  c.family = Family::decoder_only;
  c = ToyProfile{}.apply(c);
  c.n_layers = layers;
  return c;
}

TrainBatch random_lm_batch(const ModelConfig& c, std::size_t batch) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::int32_t> id(4, static_cast<std::int32_t>(c.vocab_size) - 1);
  std::vector<std::vector<std::int32_t>> docs(batch);
  for (auto& d : docs) {
    d.resize(c.max_seq_len);
    for (auto& x : d) x = id(rng);
  }
  const PackedSequences packed = pack_documents(docs, c.max_seq_len, 2, 0);
  return make_lm_batch(packed, 0, batch);
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_tensor({n, n}, 1, false);
  const auto b = random_tensor({n, n}, 2, false);
  for (auto _ : state) {
    Tape<float> tape(false);
    benchmark::DoNotOptimize(matmul(tape, a, b).data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

// Per-block cost is the slope over the layer count.
static void BM_ModelForwardBackward(benchmark::State& state) {
  const ModelConfig c = toy_decoder(static_cast<std::size_t>(state.range(0)));
  auto model = build_model<float>(c, 1);
  const TrainBatch batch = random_lm_batch(c, 8);
  ForwardContext ctx;
  ctx.training = true;
  for (auto _ : state) {
    model.params().zero_grad();
    Tape<float> tape;
    const auto loss = pretraining_loss(tape, model.forward(tape, batch.model_inputs(), ctx), batch);
    tape.backward(loss);
    benchmark::ClobberMemory();
  }
}
BENCHMARK(BM_ModelForwardBackward)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond);

static void BM_BpeEncode(benchmark::State& state) {
  const std::string text = corpus_text();
  const auto vocab = train_bpe(text, 512);
  for (auto _ : state) benchmark::DoNotOptimize(vocab.encode(text));
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(text.size()));
}
BENCHMARK(BM_BpeEncode)->Unit(benchmark::kMillisecond);

static void BM_TrainStep(benchmark::State& state) {
  const ModelConfig c = toy_decoder(4);
  auto model = build_model<float>(c, 1);
  EngineConfig engine;
  engine.recompute = state.range(0) != 0;
  Trainer trainer(model, engine);
  const TrainBatch batch = random_lm_batch(c, 8);
  for (auto _ : state) benchmark::DoNotOptimize(trainer.train_step(batch).loss);
  state.SetLabel(engine.recompute ? "recompute" : "stored activations");
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
