#include "support/gradient_cases.hpp"

#include <optional>

#include "deepstack/ops.hpp"

namespace deepstack::testkit {

namespace {

using Inputs = std::vector<Tensor<double>>;

std::vector<GradCase> build_cases() {
  std::vector<GradCase> cases;

  cases.push_back({"matmul_shared_weight", [](Gen& gen) {
    const std::size_t b = gen.size(1, 3), m = gen.size(1, 4), k = gen.size(1, 5), n = gen.size(1, 4);
    const Shape as = gen.coin() ? Shape{b, m, k} : Shape{m, k};
    return GradSample{[](Tape<double>& tp, const Inputs& x) { return matmul(tp, x[0], x[1]); },
                      {gen.tensor(as), gen.tensor({k, n})}};
  }});

  cases.push_back({"matmul_batched", [](Gen& gen) {
    const std::size_t b = gen.size(1, 3), m = gen.size(1, 4), k = gen.size(1, 4), n = gen.size(1, 4);
    return GradSample{[](Tape<double>& tp, const Inputs& x) { return matmul(tp, x[0], x[1]); },
                      {gen.tensor({b, m, k}), gen.tensor({b, k, n})}};
  }});

  cases.push_back({"transpose", [](Gen& gen) {
    const Shape s{gen.size(1, 3), gen.size(1, 3), gen.size(1, 4), gen.size(1, 3)};
    const int d0 = static_cast<int>(gen.size(0, 3));
    const int d1 = static_cast<int>(gen.size(0, 3));
    return GradSample{
        [d0, d1](Tape<double>& tp, const Inputs& x) { return transpose(tp, x[0], d0, d1); },
        {gen.tensor(s)}};
  }});

  cases.push_back({"reshape", [](Gen& gen) {
    const std::size_t a = gen.size(1, 4), b = gen.size(1, 4), c = gen.size(1, 3);
    return GradSample{
        [a, b, c](Tape<double>& tp, const Inputs& x) { return reshape(tp, x[0], Shape{a * b, c}); },
        {gen.tensor({a, b, c})}};
  }});

  cases.push_back({"add_broadcast", [](Gen& gen) {
    const Shape s{gen.size(1, 3), gen.size(1, 4), gen.size(1, 5)};
    Shape bs = s;
    const std::size_t drop = gen.size(0, 2);
    bs.erase(bs.begin(), bs.begin() + static_cast<std::ptrdiff_t>(drop));
    return GradSample{[](Tape<double>& tp, const Inputs& x) { return add(tp, x[0], x[1]); },
                      {gen.tensor(s), gen.tensor(bs)}};
  }});

  cases.push_back({"scale", [](Gen& gen) {
    const double f = gen.real(-3, 3);
    return GradSample{[f](Tape<double>& tp, const Inputs& x) { return scale(tp, x[0], f); },
                      {gen.tensor({gen.size(1, 5), gen.size(1, 5)})}};
  }});

  cases.push_back({"gelu", [](Gen& gen) {
    return GradSample{[](Tape<double>& tp, const Inputs& x) { return gelu(tp, x[0]); },
                      {gen.tensor({gen.size(1, 5), gen.size(1, 6)}, true, 3.0)}};
  }});

  cases.push_back({"tanh", [](Gen& gen) {
    return GradSample{[](Tape<double>& tp, const Inputs& x) { return deepstack::tanh(tp, x[0]); },
                      {gen.tensor({gen.size(1, 5), gen.size(1, 6)}, true, 2.0)}};
  }});

  cases.push_back({"softmax", [](Gen& gen) {
    return GradSample{[](Tape<double>& tp, const Inputs& x) { return softmax(tp, x[0]); },
                      {gen.tensor({gen.size(1, 3), gen.size(1, 4), gen.size(1, 6)}, true, 3.0)}};
  }});

  cases.push_back({"softmax_masked", [](Gen& gen) {
    const std::size_t r = gen.size(1, 4), c = gen.size(2, 6);
    std::vector<double> bias(r * c, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = i % c + 1; j < c; ++j) bias[i * c + j] = kMaskedScore;
    }
    const Tensor<double> mask({r, c}, bias);
    return GradSample{
        [mask](Tape<double>& tp, const Inputs& x) { return softmax(tp, add(tp, x[0], mask)); },
        {gen.tensor({r, c}, true, 2.0)}};
  }});

  cases.push_back({"layer_norm", [](Gen& gen) {
    const std::size_t d = gen.size(2, 7);
    return GradSample{
        [](Tape<double>& tp, const Inputs& x) { return layer_norm(tp, x[0], x[1], x[2]); },
        {gen.tensor({gen.size(1, 3), gen.size(1, 3), d}, true, 2.0), gen.tensor({d}), gen.tensor({d})}};
  }});

  cases.push_back({"dropout", [](Gen& gen) {
    const double p = gen.real(0.05, 0.6);
    const RngStream stream{gen.size(0, 1000), 1, 2, 3};
    const std::uint64_t base = gen.size(0, 100);
    return GradSample{[p, stream, base](Tape<double>& tp, const Inputs& x) {
                        return dropout(tp, x[0], p, stream, true, base);
                      },
                      {gen.tensor({gen.size(1, 4), gen.size(1, 8)})}};
  }});

  cases.push_back({"embedding_lookup", [](Gen& gen) {
    const std::size_t v = gen.size(1, 6), d = gen.size(1, 4);
    const auto ids = gen.ids(gen.size(1, 8), 0, static_cast<std::int32_t>(v) - 1);
    return GradSample{[ids](Tape<double>& tp, const Inputs& x) {
                        return embedding_lookup(tp, x[0], std::span<const std::int32_t>(ids));
                      },
                      {gen.tensor({v, d})}};
  }});

  cases.push_back({"slice_last", [](Gen& gen) {
    const std::size_t n = gen.size(2, 8);
    const std::size_t begin = gen.size(0, n - 1);
    const std::size_t count = gen.size(1, n - begin);
    return GradSample{[begin, count](Tape<double>& tp, const Inputs& x) {
                        return slice_last(tp, x[0], begin, count);
                      },
                      {gen.tensor({gen.size(1, 3), n})}};
  }});

  cases.push_back({"weighted_sum", [](Gen& gen) {
    const std::size_t n = gen.size(1, 10);
    const auto w = gen.values(n);
    return GradSample{[w](Tape<double>& tp, const Inputs& x) {
                        return weighted_sum(tp, x[0], std::span<const double>(w));
                      },
                      {gen.tensor({n})}};
  }});

  cases.push_back({"softmax_cross_entropy", [](Gen& gen) {
    const std::size_t n = gen.size(1, 6), v = gen.size(2, 7);
    const auto targets = gen.ids(n, 0, static_cast<std::int32_t>(v) - 1);
    std::vector<double> w(n);
    for (auto& x : w) x = gen.coin(0.8) ? 1.0 : 0.0;
    w[0] = 1.0;
    const std::optional<double> denom =
        gen.coin() ? std::optional<double>(gen.real(1.0, 10.0)) : std::nullopt;
    return GradSample{[targets, w, denom](Tape<double>& tp, const Inputs& x) {
                        return softmax_cross_entropy(tp, x[0], std::span<const std::int32_t>(targets),
                                                     std::span<const double>(w), denom);
                      },
                      {gen.tensor({n, v}, true, 3.0)}};
  }});

  // Checkpoint is checked twice: gradient into the explicit input, and into
  // a weight the block captures, which only the private tape sees.
  cases.push_back({"checkpoint_input", [](Gen& gen) {
    const std::size_t d = gen.size(1, 5);
    const Tensor<double> w = gen.tensor({d, d}, false);
    const CheckpointFn<double> fn = [w](Tape<double>& tp, const Inputs& x) {
      return gelu(tp, matmul(tp, x[0], w));
    };
    return GradSample{[fn](Tape<double>& tp, const Inputs& x) { return checkpoint(tp, {x[0]}, fn); },
                      {gen.tensor({gen.size(1, 4), d})}};
  }});

  cases.push_back({"checkpoint_captured", [](Gen& gen) {
    const std::size_t d = gen.size(1, 5);
    const Tensor<double> w = gen.tensor({d, d});
    const CheckpointFn<double> fn = [w](Tape<double>& tp, const Inputs& x) {
      return gelu(tp, matmul(tp, x[0], w));
    };
    return GradSample{[fn](Tape<double>& tp, const Inputs& x) { return checkpoint(tp, {x[0]}, fn); },
                      {gen.tensor({gen.size(1, 4), d}, false), w}};
  }});

  return cases;
}

}  // namespace

const std::vector<GradCase>& primitive_cases() {
  static const std::vector<GradCase> cases = build_cases();
  return cases;
}

DoubleFn miscaled_identity(double factor) {
  return [factor](Tape<double>& tape, const Inputs& in) {
    Tensor<double> out = in[0].clone();
    out.set_requires_grad(true);
    const Tensor<double> src = in[0];
    tape.record("miscaled_identity", [src, out, factor] {
      std::vector<double> g(out.grad().begin(), out.grad().end());
      for (auto& v : g) v *= factor;
      src.accumulate_grad(std::span<const double>(g));
    });
    return out;
  };
}

}  // namespace deepstack::testkit
