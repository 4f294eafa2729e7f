#include "deepstack/model.hpp"

#include <cmath>

#include "deepstack/error.hpp"
#include "deepstack/ops.hpp"
#include "deepstack/rng.hpp"

namespace deepstack {

template <typename T>
void ParamStore<T>::add(ParamSpec spec, Tensor<T> tensor) {
  if (index_.count(spec.name)) {
    throw ConfigError("duplicate parameter name '" + spec.name + "'");
  }
  if (tensor.shape() != spec.shape) {
    throw DimensionError("parameter '" + spec.name + "' has shape " +
                         to_string(tensor.shape()) + ", inventory says " +
                         to_string(spec.shape));
  }
  index_.emplace(spec.name, entries_.size());
  entries_.push_back(Entry{std::move(spec), std::move(tensor)});
}

template <typename T>
bool ParamStore<T>::contains(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

template <typename T>
Tensor<T>& ParamStore<T>::at(std::string_view name) {
  const auto it = index_.find(std::string(name));
  if (it == index_.end()) {
    throw ConfigError("no parameter named '" + std::string(name) + "'");
  }
  return entries_[it->second].tensor;
}

template <typename T>
const Tensor<T>& ParamStore<T>::at(std::string_view name) const {
  return const_cast<ParamStore*>(this)->at(name);
}

template <typename T>
std::uint64_t ParamStore<T>::element_count() const {
  std::uint64_t n = 0;
  for (const auto& e : entries_) n += e.tensor.size();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

template <typename T>
std::vector<std::vector<T>> ParamStore<T>::gradients() const {
  std::vector<std::vector<T>> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) {
    if (e.tensor.has_grad()) {
      out.emplace_back(e.tensor.grad().begin(), e.tensor.grad().end());
    } else {
      out.emplace_back(e.tensor.size(), T{0});
    }
  }
  return out;
}

template <typename T>
Tensor<T> init_parameter(const ParamSpec& spec, const ModelConfig& config,
                         std::mt19937_64& rng) {
  switch (spec.init) {
    case InitKind::zeros: return Tensor<T>(spec.shape, T{0}, true);
    case InitKind::ones: return Tensor<T>(spec.shape, T{1}, true);
    case InitKind::normal:
    case InitKind::residual: {
      double stddev = config.init_std;
      if (spec.init == InitKind::residual) stddev *= config.residual_init_scale();
      std::normal_distribution<double> dist(0.0, stddev);
      std::vector<T> data(numel(spec.shape));
      for (T& v : data) v = static_cast<T>(dist(rng));
      return Tensor<T>(spec.shape, std::move(data), true);
    }
  }
  throw ConfigError("unknown init kind for " + spec.name);
}

template <typename T>
TransformerModel<T> build_model(const ModelConfig& config, std::uint64_t seed) {
  ParamStore<T> store;
  const auto inventory = param_inventory(config);
  for (std::size_t i = 0; i < inventory.size(); ++i) {
    std::mt19937_64 rng(mix_keys(seed, i));
    store.add(inventory[i], init_parameter<T>(inventory[i], config, rng));
  }
  return TransformerModel<T>(config, std::move(store));
}

template <typename T>
TransformerModel<T>::TransformerModel(ModelConfig config, ParamStore<T> params)
    : config_(std::move(config)), params_(std::move(params)) {
  validate(config_);
}

template <typename T>
const Tensor<T>& TransformerModel<T>::output_embedding() const {
  if (config_.tie_embeddings) return params_.at("embed.token.weight");
  if (config_.family == Family::encoder_only) {
    return params_.at("head.mlm.decoder.weight");
  }
  return params_.at("head.lm.weight");
}

namespace {

constexpr std::uint64_t kEmbeddingLayer = 1u << 20;

enum Site : std::uint64_t {
  kSiteAttnProbs = 0,
  kSiteAttnOut = 1,
  kSiteMlpOut = 2,
  kSiteCrossProbs = 3,
  kSiteCrossOut = 4,
  kSiteEmbedding = 5,
};

template <typename T>
struct BlockWeights {
  Tensor<T> ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b;
  bool cross = false;
  Tensor<T> lnc_g, lnc_b, q_w, q_b, kv_w, kv_b, co_w, co_b;
  Tensor<T> ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;

  BlockWeights(const ParamStore<T>& p, const std::string& prefix, bool with_cross)
      : ln1_g(p.at(prefix + ".ln1.gain")),
        ln1_b(p.at(prefix + ".ln1.bias")),
        qkv_w(p.at(prefix + ".attn.qkv.weight")),
        qkv_b(p.at(prefix + ".attn.qkv.bias")),
        out_w(p.at(prefix + ".attn.out.weight")),
        out_b(p.at(prefix + ".attn.out.bias")),
        cross(with_cross),
        ln2_g(p.at(prefix + ".ln2.gain")),
        ln2_b(p.at(prefix + ".ln2.bias")),
        fc1_w(p.at(prefix + ".mlp.fc1.weight")),
        fc1_b(p.at(prefix + ".mlp.fc1.bias")),
        fc2_w(p.at(prefix + ".mlp.fc2.weight")),
        fc2_b(p.at(prefix + ".mlp.fc2.bias")) {
    if (cross) {
      lnc_g = p.at(prefix + ".ln_cross.gain");
      lnc_b = p.at(prefix + ".ln_cross.bias");
      q_w = p.at(prefix + ".cross.q.weight");
      q_b = p.at(prefix + ".cross.q.bias");
      kv_w = p.at(prefix + ".cross.kv.weight");
      kv_b = p.at(prefix + ".cross.kv.bias");
      co_w = p.at(prefix + ".cross.out.weight");
      co_b = p.at(prefix + ".cross.out.bias");
    }
  }
};

struct BlockSettings {
  std::size_t batch = 0;
  std::size_t heads = 0;
  std::size_t d_head = 0;
  double dropout = 0.0;
  bool training = false;
  std::size_t example_offset = 0;
  RngStream stream;
};

template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w,
                 const Tensor<T>& b) {
  return add(tape, matmul(tape, x, w), b);
}

template <typename T>
Tensor<T> drop(Tape<T>& tape, const Tensor<T>& x, const BlockSettings& s,
               std::uint64_t site) {
  const std::uint64_t per_example = x.size() / s.batch;
  return dropout(tape, x, s.dropout, s.stream.with_site(site), s.training,
                 s.example_offset * per_example);
}

// [B, T, H*dh] -> [B*H, T, dh]
template <typename T>
Tensor<T> split_heads(Tape<T>& tape, const Tensor<T>& x, const BlockSettings& s) {
  const std::size_t len = x.dim(1);
  Tensor<T> r = reshape(tape, x, Shape{s.batch, len, s.heads, s.d_head});
  r = transpose(tape, r, 1, 2);
  return reshape(tape, r, Shape{s.batch * s.heads, len, s.d_head});
}

// [B*H, T, dh] -> [B, T, H*dh]
template <typename T>
Tensor<T> merge_heads(Tape<T>& tape, const Tensor<T>& x, const BlockSettings& s) {
  const std::size_t len = x.dim(1);
  Tensor<T> r = reshape(tape, x, Shape{s.batch, s.heads, len, s.d_head});
  r = transpose(tape, r, 1, 2);
  return reshape(tape, r, Shape{s.batch, len, s.heads * s.d_head});
}

template <typename T>
Tensor<T> attend(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k,
                 const Tensor<T>& v, const Tensor<T>& bias, const BlockSettings& s,
                 std::uint64_t site) {
  Tensor<T> scores = matmul(tape, split_heads(tape, q, s),
                            transpose(tape, split_heads(tape, k, s)));
  scores = scale(tape, scores,
                 static_cast<T>(1.0 / std::sqrt(static_cast<double>(s.d_head))));
  if (bias.defined()) scores = add(tape, scores, bias);
  Tensor<T> probs = drop(tape, softmax(tape, scores), s, site);
  return merge_heads(tape, matmul(tape, probs, split_heads(tape, v, s)), s);
}

// One pre-norm block: x + attn(ln1 x) [+ cross(ln_cross x, memory)] + mlp(ln2 x).
template <typename T>
Tensor<T> run_block(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& memory,
                    const BlockWeights<T>& w, const Tensor<T>& self_bias,
                    const Tensor<T>& cross_bias, const BlockSettings& s) {
  const std::size_t inner = s.heads * s.d_head;
  Tensor<T> x = input;
  {
    Tensor<T> h = layer_norm(tape, x, w.ln1_g, w.ln1_b);
    Tensor<T> qkv = linear(tape, h, w.qkv_w, w.qkv_b);
    Tensor<T> ctx = attend(tape, slice_last(tape, qkv, 0, inner),
                           slice_last(tape, qkv, inner, inner),
                           slice_last(tape, qkv, 2 * inner, inner), self_bias, s,
                           kSiteAttnProbs);
    x = add(tape, x, drop(tape, linear(tape, ctx, w.out_w, w.out_b), s, kSiteAttnOut));
  }
  if (w.cross) {
    Tensor<T> h = layer_norm(tape, x, w.lnc_g, w.lnc_b);
    Tensor<T> q = linear(tape, h, w.q_w, w.q_b);
    Tensor<T> kv = linear(tape, memory, w.kv_w, w.kv_b);
    Tensor<T> ctx = attend(tape, q, slice_last(tape, kv, 0, inner),
                           slice_last(tape, kv, inner, inner), cross_bias, s,
                           kSiteCrossProbs);
    x = add(tape, x, drop(tape, linear(tape, ctx, w.co_w, w.co_b), s, kSiteCrossOut));
  }
  Tensor<T> h = layer_norm(tape, x, w.ln2_g, w.ln2_b);
  Tensor<T> m = gelu(tape, linear(tape, h, w.fc1_w, w.fc1_b));
  m = drop(tape, linear(tape, m, w.fc2_w, w.fc2_b), s, kSiteMlpOut);
  return add(tape, x, m);
}

template <typename T>
Tensor<T> apply_block(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& memory,
                      BlockWeights<T> w, Tensor<T> self_bias, Tensor<T> cross_bias,
                      BlockSettings s, bool recompute) {
  if (!recompute) return run_block(tape, x, memory, w, self_bias, cross_bias, s);
  std::vector<Tensor<T>> inputs{x};
  if (w.cross) inputs.push_back(memory);
  return checkpoint<T>(
      tape, inputs,
      [w = std::move(w), self_bias = std::move(self_bias),
       cross_bias = std::move(cross_bias), s](Tape<T>& t,
                                               const std::vector<Tensor<T>>& in) {
        const Tensor<T> none;
        return run_block(t, in[0], in.size() > 1 ? in[1] : none, w, self_bias,
                         cross_bias, s);
      });
}

bool has_padding(const std::vector<std::uint8_t>& attend) {
  for (const auto a : attend) {
    if (a == 0) return true;
  }
  return false;
}

// Additive attention bias: [Tq, Tk] when only causal, [B*H, Tq, Tk] when a
// key-padding mask is involved. Undefined tensor means no bias.
template <typename T>
Tensor<T> attention_bias(std::size_t batch, std::size_t heads, std::size_t tq,
                         std::size_t tk, bool causal,
                         const std::vector<std::uint8_t>& key_attend) {
  const bool padded = !key_attend.empty() && has_padding(key_attend);
  const T masked = static_cast<T>(kMaskedScore);
  if (!padded) {
    if (!causal) return Tensor<T>();
    std::vector<T> bias(tq * tk, T{0});
    for (std::size_t i = 0; i < tq; ++i) {
      for (std::size_t j = i + 1; j < tk; ++j) bias[i * tk + j] = masked;
    }
    return Tensor<T>(Shape{tq, tk}, std::move(bias));
  }
  std::vector<T> bias(batch * heads * tq * tk, T{0});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      T* plane = bias.data() + (b * heads + h) * tq * tk;
      for (std::size_t i = 0; i < tq; ++i) {
        for (std::size_t j = 0; j < tk; ++j) {
          if (key_attend[b * tk + j] == 0 || (causal && j > i)) {
            plane[i * tk + j] = masked;
          }
        }
      }
    }
  }
  return Tensor<T>(Shape{batch * heads, tq, tk}, std::move(bias));
}

template <typename T>
Tensor<T> embed(Tape<T>& tape, const ParamStore<T>& p, const std::string& pos_name,
                std::span<const std::int32_t> ids, std::size_t batch, std::size_t len,
                const std::vector<std::int32_t>* segments, const BlockSettings& s) {
  const std::size_t d = p.at("embed.token.weight").dim(1);
  Tensor<T> x = embedding_lookup(tape, p.at("embed.token.weight"), ids);
  x = reshape(tape, x, Shape{batch, len, d});
  std::vector<std::int32_t> positions(len);
  for (std::size_t i = 0; i < len; ++i) positions[i] = static_cast<std::int32_t>(i);
  x = add(tape, x, embedding_lookup(tape, p.at(pos_name), positions));
  if (segments != nullptr) {
    Tensor<T> seg = embedding_lookup(tape, p.at("embed.segment.weight"), *segments);
    x = add(tape, x, reshape(tape, seg, Shape{batch, len, d}));
  }
  return drop(tape, x, s, kSiteEmbedding);
}

template <typename T>
Tensor<T> vocab_logits(Tape<T>& tape, const Tensor<T>& hidden,
                       const Tensor<T>& embedding) {
  return matmul(tape, hidden, transpose(tape, embedding));
}

void check_ids_shape(const std::vector<std::int32_t>& ids, std::size_t batch,
                     std::size_t len, std::size_t max_len, const char* what) {
  if (batch == 0 || len == 0) {
    throw InputError(std::string(what) + ": empty batch");
  }
  if (ids.size() != batch * len) {
    throw InputError(std::string(what) + ": " + std::to_string(ids.size()) +
                     " ids for batch " + std::to_string(batch) + " x length " +
                     std::to_string(len));
  }
  if (len > max_len) {
    throw InputError(std::string(what) + ": sequence length " + std::to_string(len) +
                     " exceeds max_seq_len " + std::to_string(max_len));
  }
}

}  // namespace

template <typename T>
ModelOutputs<T> TransformerModel<T>::forward(Tape<T>& tape, const ModelInputs& in,
                                             const ForwardContext& ctx) const {
  const ModelConfig& c = config_;
  const std::size_t batch = in.batch;
  const std::size_t len = in.seq_len;
  check_ids_shape(in.ids, batch, len, c.max_seq_len, "forward");
  if (!in.attend.empty() && in.attend.size() != in.ids.size()) {
    throw InputError("forward: attend mask size does not match ids");
  }
  if (!in.segments.empty() && in.segments.size() != in.ids.size()) {
    throw InputError("forward: segment ids size does not match ids");
  }

  BlockSettings s;
  s.batch = batch;
  s.heads = c.n_heads;
  s.d_head = c.d_head;
  s.dropout = c.dropout_p;
  s.training = ctx.training;
  s.example_offset = ctx.example_offset;
  const auto settings_for = [&](std::uint64_t layer) {
    BlockSettings out = s;
    out.stream = RngStream{ctx.seed, layer, ctx.step, 0};
    return out;
  };

  ModelOutputs<T> out;
  const Tensor<T> none;

  if (c.family == Family::decoder_only) {
    Tensor<T> x = embed(tape, params_, "embed.position.weight", in.ids, batch, len,
                        nullptr, settings_for(kEmbeddingLayer));
    const Tensor<T> bias = attention_bias<T>(batch, c.n_heads, len, len, true, {});
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      x = apply_block(tape, x, none,
                      BlockWeights<T>(params_, "block." + std::to_string(l), false),
                      bias, none, settings_for(l), ctx.recompute);
    }
    out.hidden = layer_norm(tape, x, params_.at("final_ln.gain"), params_.at("final_ln.bias"));
    if (ctx.lm_logits) out.logits = vocab_logits(tape, out.hidden, output_embedding());
    return out;
  }

  if (c.family == Family::encoder_only) {
    const std::vector<std::int32_t>* segments =
        in.segments.empty() ? nullptr : &in.segments;
    std::vector<std::int32_t> zero_segments;
    if (segments == nullptr) {
      zero_segments.assign(in.ids.size(), 0);
      segments = &zero_segments;
    }
    Tensor<T> x = embed(tape, params_, "embed.position.weight", in.ids, batch, len,
                        segments, settings_for(kEmbeddingLayer));
    const Tensor<T> bias =
        attention_bias<T>(batch, c.n_heads, len, len, false, in.attend);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      x = apply_block(tape, x, none,
                      BlockWeights<T>(params_, "block." + std::to_string(l), false),
                      bias, none, settings_for(l), ctx.recompute);
    }
    out.hidden = layer_norm(tape, x, params_.at("final_ln.gain"), params_.at("final_ln.bias"));
    if (ctx.lm_logits) {
      Tensor<T> t = gelu(tape, linear(tape, out.hidden, params_.at("head.mlm.dense.weight"),
                                      params_.at("head.mlm.dense.bias")));
      t = layer_norm(tape, t, params_.at("head.mlm.ln.gain"), params_.at("head.mlm.ln.bias"));
      out.logits = add(tape, vocab_logits(tape, t, output_embedding()),
                       params_.at("head.mlm.bias"));
    }
    std::vector<std::int32_t> first_rows(batch);
    for (std::size_t b = 0; b < batch; ++b) first_rows[b] = static_cast<std::int32_t>(b * len);
    Tensor<T> flat = reshape(tape, out.hidden, Shape{batch * len, c.d_layer});
    Tensor<T> first = embedding_lookup(tape, flat, first_rows);
    out.pooled = tanh(tape, linear(tape, first, params_.at("head.pooler.weight"),
                                   params_.at("head.pooler.bias")));
    out.sop_logits = linear(tape, out.pooled, params_.at("head.sop.weight"),
                            params_.at("head.sop.bias"));
    return out;
  }

  // Encoder-decoder.
  const std::size_t tlen = in.target_len;
  check_ids_shape(in.target_ids, batch, tlen, c.max_seq_len, "forward (target)");
  Tensor<T> enc = embed(tape, params_, "encoder.embed.position.weight", in.ids, batch,
                        len, nullptr, settings_for(kEmbeddingLayer));
  const Tensor<T> enc_bias =
      attention_bias<T>(batch, c.n_heads, len, len, false, in.attend);
  for (std::size_t l = 0; l < c.encoder_layers(); ++l) {
    enc = apply_block(tape, enc, none,
                      BlockWeights<T>(params_, "encoder.block." + std::to_string(l), false),
                      enc_bias, none, settings_for(l), ctx.recompute);
  }
  enc = layer_norm(tape, enc, params_.at("encoder.final_ln.gain"),
                   params_.at("encoder.final_ln.bias"));

  Tensor<T> dec = embed(tape, params_, "decoder.embed.position.weight", in.target_ids,
                        batch, tlen, nullptr, settings_for(kEmbeddingLayer + 1));
  const Tensor<T> dec_bias = attention_bias<T>(batch, c.n_heads, tlen, tlen, true, {});
  const Tensor<T> cross_bias =
      attention_bias<T>(batch, c.n_heads, tlen, len, false, in.attend);
  for (std::size_t l = 0; l < c.decoder_layers(); ++l) {
    dec = apply_block(tape, dec, enc,
                      BlockWeights<T>(params_, "decoder.block." + std::to_string(l), true),
                      dec_bias, cross_bias, settings_for(c.encoder_layers() + l),
                      ctx.recompute);
  }
  out.hidden = layer_norm(tape, dec, params_.at("decoder.final_ln.gain"),
                          params_.at("decoder.final_ln.bias"));
  if (ctx.lm_logits) out.logits = vocab_logits(tape, out.hidden, output_embedding());
  return out;
}

template class ParamStore<float>;
template class ParamStore<double>;
template class TransformerModel<float>;
template class TransformerModel<double>;
template Tensor<float> init_parameter(const ParamSpec&, const ModelConfig&, std::mt19937_64&);
template Tensor<double> init_parameter(const ParamSpec&, const ModelConfig&, std::mt19937_64&);
template TransformerModel<float> build_model(const ModelConfig&, std::uint64_t);
template TransformerModel<double> build_model(const ModelConfig&, std::uint64_t);

}  // namespace deepstack
