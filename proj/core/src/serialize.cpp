#include "deepstack/serialize.hpp"

#include <array>
#include <bit>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "deepstack/error.hpp"

namespace deepstack {

namespace {

constexpr std::array<char, 4> kMagic{'D', 'S', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  template <typename U>
  void uint(U value) {
    std::array<char, sizeof(U)> bytes{};
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      bytes[i] = static_cast<char>(value & 0xFF);
      value = static_cast<U>(value >> 8);
    }
    out_.write(bytes.data(), bytes.size());
  }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void text(const std::string& s) {
    uint<std::uint64_t>(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void floats(std::span<const float> values) {
    for (const float v : values) uint(std::bit_cast<std::uint32_t>(v));
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  template <typename U>
  U uint() {
    std::array<unsigned char, sizeof(U)> bytes{};
    if (!in_.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
      throw InputError("checkpoint is truncated");
    }
    U v = 0;
    for (std::size_t i = sizeof(U); i-- > 0;) v = static_cast<U>((v << 8) | bytes[i]);
    return v;
  }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
  std::string text(std::uint64_t limit = 1u << 30) {
    const auto n = uint<std::uint64_t>();
    if (n > limit) throw InputError("checkpoint string length " + std::to_string(n) + " is implausible");
    std::string s(n, '\0');
    if (!in_.read(s.data(), static_cast<std::streamsize>(n))) {
      throw InputError("checkpoint is truncated");
    }
    return s;
  }
  std::vector<float> floats(std::size_t n) {
    std::vector<float> out(n);
    for (float& v : out) v = std::bit_cast<float>(uint<std::uint32_t>());
    return out;
  }

 private:
  std::istream& in_;
};

}  // namespace

void save_checkpoint(std::ostream& out, const TransformerModel<float>& model,
                     const TrainerState* state) {
  Writer w(out);
  out.write(kMagic.data(), kMagic.size());
  w.uint<std::uint32_t>(kVersion);
  w.text(model_config_text(model.config()));
  const auto& entries = model.params().entries();
  w.uint<std::uint64_t>(entries.size());
  for (const auto& e : entries) {
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(e.spec.name.size()));
    out.write(e.spec.name.data(), static_cast<std::streamsize>(e.spec.name.size()));
    w.uint<std::uint8_t>(e.spec.decay ? 1 : 0);
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(e.tensor.rank()));
    for (const auto d : e.tensor.shape()) w.uint<std::uint64_t>(d);
    w.floats(e.tensor.data());
  }
  w.uint<std::uint8_t>(state != nullptr ? 1 : 0);
  if (state != nullptr) {
    w.uint<std::uint64_t>(state->step);
    w.uint<std::uint64_t>(state->adam_steps);
    w.f64(state->loss_scale);
    w.uint<std::uint64_t>(state->good_steps);
    const bool has_moments = !state->first_moments.empty();
    w.uint<std::uint8_t>(has_moments ? 1 : 0);
    if (has_moments) {
      if (state->first_moments.size() != entries.size() ||
          state->second_moments.size() != entries.size()) {
        throw InputError("trainer state does not match the parameter list");
      }
      for (std::size_t i = 0; i < entries.size(); ++i) {
        w.floats(state->first_moments[i]);
        w.floats(state->second_moments[i]);
      }
    }
  }
  if (!out) throw InputError("failed to write checkpoint");
}

void save_checkpoint(const std::filesystem::path& path, const TransformerModel<float>& model,
                     const TrainerState* state) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint " + path.string());
  save_checkpoint(out, model, state);
}

LoadedCheckpoint load_checkpoint(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw InputError("not a checkpoint (bad magic)");
  Reader r(in);
  const auto version = r.uint<std::uint32_t>();
  if (version != kVersion) {
    throw InputError("unsupported checkpoint version " + std::to_string(version));
  }
  std::istringstream config_text(r.text());
  const ModelConfig config = parse_model_config(config_text);

  std::unordered_map<std::string, ParamSpec> inventory;
  const auto specs = param_inventory(config);
  for (const auto& s : specs) inventory.emplace(s.name, s);

  ParamStore<float> store;
  const auto count = r.uint<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.uint<std::uint32_t>();
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw InputError("checkpoint is truncated");
    const bool decay = r.uint<std::uint8_t>() != 0;
    const auto rank = r.uint<std::uint32_t>();
    if (rank == 0 || rank > 8) throw InputError("tensor '" + name + "' has bad rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.uint<std::uint64_t>();
    ParamSpec spec{name, shape, InitKind::normal, decay};
    if (const auto it = inventory.find(name); it != inventory.end()) {
      if (it->second.shape != shape) {
        throw InputError("tensor '" + name + "' has shape " + to_string(shape) +
                         ", config implies " + to_string(it->second.shape));
      }
      spec = it->second;
    }
    store.add(spec, Tensor<float>(shape, r.floats(numel(shape)), true));
  }
  for (const auto& s : specs) {
    if (!store.contains(s.name)) throw InputError("checkpoint lacks tensor '" + s.name + "'");
  }

  std::optional<TrainerState> trainer;
  if (r.uint<std::uint8_t>() != 0) {
    TrainerState st;
    st.step = r.uint<std::uint64_t>();
    st.adam_steps = r.uint<std::uint64_t>();
    st.loss_scale = r.f64();
    st.good_steps = r.uint<std::uint64_t>();
    if (r.uint<std::uint8_t>() != 0) {
      for (const auto& e : store.entries()) {
        st.first_moments.push_back(r.floats(e.tensor.size()));
        st.second_moments.push_back(r.floats(e.tensor.size()));
      }
    }
    trainer = std::move(st);
  }
  return LoadedCheckpoint{TransformerModel<float>(config, std::move(store)), std::move(trainer)};
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  return load_checkpoint(in);
}

}  // namespace deepstack
