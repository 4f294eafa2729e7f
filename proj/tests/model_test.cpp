#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>

#include "deepstack/error.hpp"
#include "deepstack/objectives.hpp"
#include "deepstack/ops.hpp"
#include "deepstack/toy.hpp"
#include "support/gradient_cases.hpp"
#include "support/support.hpp"

using namespace deepstack;
using deepstack::testkit::Gen;

namespace {

std::vector<ModelConfig> reference_configs() {
  std::vector<std::filesystem::path> paths;
  for (const auto& e : std::filesystem::directory_iterator(testkit::data_path("configs"))) {
    if (e.path().extension() == ".cfg") paths.push_back(e.path());
  }
  std::sort(paths.begin(), paths.end());
  std::vector<ModelConfig> out;
  for (const auto& p : paths) out.push_back(load_model_config(p.string()));
  return out;
}

// Independent closed form written from the block structure: fused qkv,
// output projection, two-layer MLP, two layer norms; decoder blocks of an
// encoder-decoder add a cross-attention sublayer (q, fused kv, out, norm).
std::uint64_t hand_count(const ModelConfig& c) {
  const std::uint64_t d = c.d_layer, a = c.n_heads * c.d_head, f = c.ff_width();
  const std::uint64_t V = c.vocab_size, P = c.max_seq_len;
  const std::uint64_t attn = d * 3 * a + 3 * a + a * d + d;
  const std::uint64_t mlp = d * f + f + f * d + d;
  const std::uint64_t norms = 4 * d;
  const std::uint64_t block = attn + mlp + norms;
  const std::uint64_t cross = d * a + a + d * 2 * a + 2 * a + a * d + d + 2 * d;
  const std::uint64_t untied = c.tie_embeddings ? 0 : V * d;
  switch (c.family) {
    case Family::decoder_only:
      return c.n_layers * block + V * d + P * d + 2 * d + untied;
    case Family::encoder_only:
      // segment table, MLM transform + norm + output bias, pooler, SOP head
      return c.n_layers * block + V * d + P * d + 2 * d + 2 * d + (d * d + d) + 2 * d + V +
             (d * d + d) + (2 * d + 2) + untied;
    case Family::encoder_decoder: {
      const std::uint64_t half = c.n_layers / 2;
      // shared token table, separate encoder/decoder positions, two final norms
      return half * block + half * (block + cross) + V * d + 2 * P * d + 4 * d + untied;
    }
  }
  return 0;
}

}  // namespace

TEST(ParamCount, ClosedFormMatchesInventoryForEveryReferenceConfig) {
  for (const auto& c : reference_configs()) {
    std::uint64_t total = 0;
    for (const auto& spec : param_inventory(c)) total += numel(spec.shape);
    EXPECT_EQ(count_params(c), total) << c.name;
  }
}

TEST(ParamCount, ClosedFormMatchesIndependentHandCount) {
  for (const auto& c : reference_configs()) EXPECT_EQ(count_params(c), hand_count(c)) << c.name;
  Gen gen(3);
  for (int t = 0; t < 30; ++t) {
    for (Family f : {Family::decoder_only, Family::encoder_only, Family::encoder_decoder}) {
      const auto c = testkit::tiny_config(f, gen, 4);
      EXPECT_EQ(count_params(c), hand_count(c));
    }
  }
}

TEST(ParamCount, InstantiatedModelsMatchClosedForm) {
  for (const auto& c : reference_configs()) {
    const ModelConfig toy = ToyProfile{}.apply(c);
    EXPECT_EQ(build_model<float>(toy, 1).params().element_count(), count_params(toy)) << c.name;
  }
}

TEST(ParamCount, FrozenReferenceTotals) {
  // Regression values for the shipped configs.
  const std::map<std::string, std::uint64_t> frozen{
      {"BERT-C", 326597258ULL},     {"CPM-X-L", 10150016000ULL}, {"CPM-X-S", 2911779840ULL},
      {"CPM-2-X-M", 5750407168ULL}, {"EPM-2-X-S", 2945433600ULL}};
  for (const auto& c : reference_configs()) {
    const auto it = frozen.find(c.name);
    if (it != frozen.end()) EXPECT_EQ(count_params(c), it->second) << c.name;
  }
}

TEST(ModelGradient, EndToEndAllFamiliesDoublePrecision) {
  Gen gen(41);
  for (int t = 0; t < 9; ++t) {
    const Family f = std::array{Family::decoder_only, Family::encoder_only,
                                Family::encoder_decoder}[static_cast<std::size_t>(t % 3)];
    const ModelConfig c = testkit::tiny_config(f, gen, 2);
    auto model = build_model<double>(c, static_cast<std::uint64_t>(t));
    const TrainBatch batch = testkit::random_batch(c, gen, gen.size(1, 2), gen.size(2, 4));
    ForwardContext ctx;
    ctx.training = true;
    ctx.seed = static_cast<std::uint64_t>(t);
    const auto r = testkit::check_model_gradients(model, [&](Tape<double>& tape) {
      return pretraining_loss(tape, model.forward(tape, batch.model_inputs(), ctx), batch);
    });
    EXPECT_LT(r.max_rel_error, 1e-4) << to_string(f) << " trial " << t;
  }
}

TEST(ModelGradient, CheckerRejectsAWrongBackward) {
  const Tensor<double> x({3}, std::vector<double>{0.1, 0.2, 0.3}, true);
  EXPECT_GT(testkit::check_gradients(testkit::miscaled_identity(1.01), {x}, 1).max_rel_error, 1e-3);
  EXPECT_LT(testkit::check_gradients(testkit::miscaled_identity(1.0), {x}, 1).max_rel_error, 1e-9);
}

TEST(Model, DecoderLogitsAreCausal) {
  Gen gen(7);
  for (int t = 0; t < 25; ++t) {
    const ModelConfig c = testkit::tiny_config(Family::decoder_only, gen, 3);
    const auto model = build_model<float>(c, static_cast<std::uint64_t>(t));
    ModelInputs in;
    in.batch = 1;
    in.seq_len = gen.size(2, c.max_seq_len);
    in.ids = gen.ids(in.seq_len, 0, static_cast<std::int32_t>(c.vocab_size) - 1);
    const std::size_t i = gen.size(0, in.seq_len - 2);
    ModelInputs changed = in;
    for (std::size_t j = i + 1; j < in.seq_len; ++j) {
      changed.ids[j] = static_cast<std::int32_t>((in.ids[j] + 1) % c.vocab_size);
    }
    Tape<float> ta(false), tb(false);
    const auto a = model.forward(ta, in, {}).logits;
    const auto b = model.forward(tb, changed, {}).logits;
    for (std::size_t k = 0; k < (i + 1) * c.vocab_size; ++k) {
      ASSERT_EQ(a.data()[k], b.data()[k]) << "position " << k / c.vocab_size;
    }
  }
}

TEST(Model, EncoderIsBidirectional) {
  Gen gen(8);
  const ModelConfig c = testkit::tiny_config(Family::encoder_only, gen, 2);
  const auto model = build_model<float>(c, 1);
  ModelInputs in;
  in.batch = 1;
  in.seq_len = 4;
  in.ids = {4, 5, 6, 7};
  ModelInputs changed = in;
  changed.ids[3] = 5;
  Tape<float> ta(false), tb(false);
  const auto a = model.forward(ta, in, {}).logits;
  const auto b = model.forward(tb, changed, {}).logits;
  EXPECT_NE(a.data()[0], b.data()[0]);
}

TEST(Model, PaddedKeysDoNotInfluenceRealPositions) {
  Gen gen(9);
  const ModelConfig c = testkit::tiny_config(Family::encoder_only, gen, 2);
  const auto model = build_model<float>(c, 2);
  ModelInputs in;
  in.batch = 1;
  in.seq_len = 5;
  in.ids = {4, 5, 6, 0, 0};
  in.attend = {1, 1, 1, 0, 0};
  ModelInputs changed = in;
  changed.ids[4] = 7;
  Tape<float> ta(false), tb(false);
  const auto a = model.forward(ta, in, {}).logits;
  const auto b = model.forward(tb, changed, {}).logits;
  for (std::size_t k = 0; k < 3 * c.vocab_size; ++k) ASSERT_EQ(a.data()[k], b.data()[k]);
}

TEST(Model, OutputShapes) {
  Gen gen(10);
  for (Family f : {Family::decoder_only, Family::encoder_only, Family::encoder_decoder}) {
    const ModelConfig c = testkit::tiny_config(f, gen, 2);
    const auto model = build_model<float>(c, 3);
    const TrainBatch batch = testkit::random_batch(c, gen, 3, 5);
    Tape<float> tape(false);
    const auto out = model.forward(tape, batch.model_inputs(), {});
    EXPECT_EQ(out.logits.shape(), (Shape{3, 5, c.vocab_size}));
    if (f == Family::encoder_only) {
      EXPECT_EQ(out.pooled.shape(), (Shape{3, c.d_layer}));
      EXPECT_EQ(out.sop_logits.shape(), (Shape{3, 2}));
    }
  }
}

TEST(Model, TiedEmbeddingSharesStorage) {
  ModelConfig c;
  c.tie_embeddings = true;
  auto model = build_model<float>(c, 1);
  EXPECT_TRUE(model.output_embedding().same_storage(model.params().at("embed.token.weight")));
  c.tie_embeddings = false;
  auto untied = build_model<float>(c, 1);
  EXPECT_FALSE(untied.output_embedding().same_storage(untied.params().at("embed.token.weight")));
}

TEST(Model, ResidualProjectionsAreScaledByDepth) {
  ModelConfig c;
  c.n_layers = 8;
  c.d_layer = 64;
  c.init_std = 0.02;
  EXPECT_DOUBLE_EQ(c.residual_init_scale(), 1.0 / std::sqrt(16.0));
  const auto model = build_model<double>(c, 5);
  const auto stddev = [](const Tensor<double>& t) {
    double s = 0.0;
    for (double v : t.data()) s += v * v;
    return std::sqrt(s / static_cast<double>(t.size()));
  };
  EXPECT_NEAR(stddev(model.params().at("block.0.attn.out.weight")), 0.02 / 4.0, 0.0007);
  EXPECT_NEAR(stddev(model.params().at("block.0.attn.qkv.weight")), 0.02, 0.0015);
}

TEST(Model, DeterministicPerSeed) {
  ModelConfig c;
  const auto a = build_model<float>(c, 11);
  const auto b = build_model<float>(c, 11);
  const auto d = build_model<float>(c, 12);
  const auto& wa = a.params().at("block.1.mlp.fc1.weight");
  EXPECT_TRUE(std::equal(wa.data().begin(), wa.data().end(),
                         b.params().at("block.1.mlp.fc1.weight").data().begin()));
  EXPECT_NE(wa.data()[0], d.params().at("block.1.mlp.fc1.weight").data()[0]);
}

TEST(Model, RejectsOverlongAndOutOfRangeInputs) {
  ModelConfig c;
  c.max_seq_len = 4;
  const auto model = build_model<float>(c, 1);
  Tape<float> tape(false);
  ModelInputs in;
  in.batch = 1;
  in.seq_len = 5;
  in.ids.assign(5, 4);
  EXPECT_THROW(model.forward(tape, in, {}), InputError);
  in.seq_len = 2;
  in.ids = {4, static_cast<std::int32_t>(c.vocab_size)};
  EXPECT_THROW(model.forward(tape, in, {}), IndexError);
}

TEST(ModelConfig, ValidationAndParsing) {
  ModelConfig c;
  c.family = Family::encoder_decoder;
  c.n_layers = 3;
  EXPECT_THROW(validate(c), ConfigError);
  c.n_layers = 4;
  c.dropout_p = 1.0;
  EXPECT_THROW(validate(c), ConfigError);
  c.dropout_p = 0.1;
  c.d_head = 8;
  EXPECT_FALSE(validate(c).empty());

  std::istringstream in("name = X\nfamily = encoder-decoder\nn_layers = 6\nbogus = 1\n");
  EXPECT_THROW(parse_model_config(in), ConfigError);
  std::istringstream ok("# comment\nname = X\nfamily = encoder-decoder\nn_layers = 6\n");
  const ModelConfig p = parse_model_config(ok);
  EXPECT_EQ(p.encoder_layers(), 3u);
  std::istringstream round(model_config_text(p));
  EXPECT_EQ(model_config_text(parse_model_config(round)), model_config_text(p));
}

TEST(ModelConfig, Magnitudes) {
  EXPECT_DOUBLE_EQ(parse_magnitude("1.24B"), 1.24e9);
  EXPECT_DOUBLE_EQ(parse_magnitude("962.5M"), 962.5e6);
  EXPECT_DOUBLE_EQ(parse_magnitude("750K"), 750e3);
  EXPECT_THROW(parse_magnitude("12Q"), ConfigError);
}
