#include "deepstack/model_config.hpp"

#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "deepstack/error.hpp"

namespace deepstack {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(value, &pos);
    if (pos != value.size() || v < 0) throw std::invalid_argument(value);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" +
                      value + "'");
  }
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + value + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + value + "'");
}

}  // namespace

std::string_view to_string(Family family) {
  switch (family) {
    case Family::decoder_only: return "decoder-only";
    case Family::encoder_only: return "encoder-only";
    case Family::encoder_decoder: return "encoder-decoder";
  }
  return "?";
}

Family parse_family(std::string_view text) {
  if (text == "decoder-only" || text == "gpt") return Family::decoder_only;
  if (text == "encoder-only" || text == "bert") return Family::encoder_only;
  if (text == "encoder-decoder" || text == "transformer") return Family::encoder_decoder;
  throw ConfigError("unknown model family '" + std::string(text) + "'");
}

double ModelConfig::residual_init_scale() const {
  return n_layers == 0 ? 1.0 : 1.0 / std::sqrt(2.0 * static_cast<double>(n_layers));
}

std::vector<std::string> validate(const ModelConfig& c) {
  if (c.d_layer == 0 || c.n_heads == 0 || c.d_head == 0) {
    throw ConfigError(c.name + ": widths and head counts must be positive");
  }
  if (c.vocab_size == 0 || c.max_seq_len == 0) {
    throw ConfigError(c.name + ": vocab_size and max_seq_len must be positive");
  }
  if (c.family == Family::encoder_decoder && c.n_layers % 2 != 0) {
    throw ConfigError(c.name + ": encoder-decoder needs an even n_layers, got " +
                      std::to_string(c.n_layers));
  }
  if (!(c.dropout_p >= 0.0 && c.dropout_p < 1.0)) {
    throw ConfigError(c.name + ": dropout_p must lie in [0, 1)");
  }
  if (!(c.init_std > 0.0)) throw ConfigError(c.name + ": init_std must be positive");
  std::vector<std::string> warnings;
  if (c.n_heads * c.d_head != c.d_layer) {
    warnings.push_back(c.name + ": n_heads * d_head = " +
                       std::to_string(c.n_heads * c.d_head) + " differs from d_layer = " +
                       std::to_string(c.d_layer));
  }
  return warnings;
}

double parse_magnitude(std::string_view text) {
  std::string s = trim(text);
  if (s.empty()) throw ConfigError("empty magnitude");
  double mult = 1.0;
  switch (s.back()) {
    case 'K': case 'k': mult = 1e3; s.pop_back(); break;
    case 'M': case 'm': mult = 1e6; s.pop_back(); break;
    case 'B': case 'b': case 'G': case 'g': mult = 1e9; s.pop_back(); break;
    case 'T': case 't': mult = 1e12; s.pop_back(); break;
    default: break;
  }
  return parse_double("magnitude", s) * mult;
}

std::string format_magnitude(double value) {
  std::ostringstream os;
  os.precision(4);
  if (value >= 1e9) os << value / 1e9 << 'B';
  else if (value >= 1e6) os << value / 1e6 << 'M';
  else if (value >= 1e3) os << value / 1e3 << 'K';
  else os << value;
  return os.str();
}

ModelConfig parse_model_config(std::istream& in) {
  ModelConfig c;
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    kv[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
  }
  for (const auto& [key, value] : kv) {
    if (key == "name") c.name = value;
    else if (key == "family") c.family = parse_family(value);
    else if (key == "n_layers") c.n_layers = parse_size(key, value);
    else if (key == "d_layer") c.d_layer = parse_size(key, value);
    else if (key == "n_heads") c.n_heads = parse_size(key, value);
    else if (key == "d_head") c.d_head = parse_size(key, value);
    else if (key == "d_ff") c.d_ff = parse_size(key, value);
    else if (key == "vocab_size") c.vocab_size = parse_size(key, value);
    else if (key == "max_seq_len") c.max_seq_len = parse_size(key, value);
    else if (key == "dropout") c.dropout_p = parse_double(key, value);
    else if (key == "tie_embeddings") c.tie_embeddings = parse_bool(key, value);
    else if (key == "init_std") c.init_std = parse_double(key, value);
    else if (key == "corpus_size") c.corpus_size = value;
    else if (key == "language") c.language = value;
    else if (key == "reported_params") c.reported_params = parse_magnitude(value);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  validate(c);
  return c;
}

ModelConfig load_model_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config file " + path);
  return parse_model_config(in);
}

void write_model_config(std::ostream& out, const ModelConfig& c) {
  out << "name = " << c.name << '\n'
      << "family = " << to_string(c.family) << '\n';
  if (!c.corpus_size.empty()) out << "corpus_size = " << c.corpus_size << '\n';
  if (!c.language.empty()) out << "language = " << c.language << '\n';
  if (c.reported_params) out << "reported_params = " << format_magnitude(*c.reported_params) << '\n';
  out << "n_layers = " << c.n_layers << '\n'
      << "d_layer = " << c.d_layer << '\n'
      << "n_heads = " << c.n_heads << '\n'
      << "d_head = " << c.d_head << '\n';
  if (c.d_ff != 0) out << "d_ff = " << c.d_ff << '\n';
  out << "vocab_size = " << c.vocab_size << '\n'
      << "max_seq_len = " << c.max_seq_len << '\n';
  std::ostringstream num;
  num.precision(17);
  num << c.dropout_p;
  out << "dropout = " << num.str() << '\n'
      << "tie_embeddings = " << (c.tie_embeddings ? "true" : "false") << '\n';
  num.str("");
  num << c.init_std;
  out << "init_std = " << num.str() << '\n';
}

std::string model_config_text(const ModelConfig& c) {
  std::ostringstream os;
  write_model_config(os, c);
  return os.str();
}

namespace {

void add_layer_norm(std::vector<ParamSpec>& out, const std::string& prefix,
                    std::size_t d) {
  out.push_back({prefix + ".gain", {d}, InitKind::ones, false});
  out.push_back({prefix + ".bias", {d}, InitKind::zeros, false});
}

void add_linear(std::vector<ParamSpec>& out, const std::string& prefix,
                std::size_t in, std::size_t outw, InitKind init) {
  out.push_back({prefix + ".weight", {in, outw}, init, true});
  out.push_back({prefix + ".bias", {outw}, InitKind::zeros, false});
}

void add_block(std::vector<ParamSpec>& out, const std::string& prefix,
               const ModelConfig& c, bool cross_attention) {
  const std::size_t d = c.d_layer;
  const std::size_t inner = c.n_heads * c.d_head;
  add_layer_norm(out, prefix + ".ln1", d);
  add_linear(out, prefix + ".attn.qkv", d, 3 * inner, InitKind::normal);
  add_linear(out, prefix + ".attn.out", inner, d, InitKind::residual);
  if (cross_attention) {
    add_layer_norm(out, prefix + ".ln_cross", d);
    add_linear(out, prefix + ".cross.q", d, inner, InitKind::normal);
    add_linear(out, prefix + ".cross.kv", d, 2 * inner, InitKind::normal);
    add_linear(out, prefix + ".cross.out", inner, d, InitKind::residual);
  }
  add_layer_norm(out, prefix + ".ln2", d);
  add_linear(out, prefix + ".mlp.fc1", d, c.ff_width(), InitKind::normal);
  add_linear(out, prefix + ".mlp.fc2", c.ff_width(), d, InitKind::residual);
}

}  // namespace

std::vector<ParamSpec> param_inventory(const ModelConfig& c) {
  validate(c);
  const std::size_t d = c.d_layer;
  const std::size_t v = c.vocab_size;
  std::vector<ParamSpec> out;
  out.push_back({"embed.token.weight", {v, d}, InitKind::normal, false});
  switch (c.family) {
    case Family::decoder_only:
      out.push_back({"embed.position.weight", {c.max_seq_len, d}, InitKind::normal, false});
      for (std::size_t l = 0; l < c.n_layers; ++l) {
        add_block(out, "block." + std::to_string(l), c, false);
      }
      add_layer_norm(out, "final_ln", d);
      if (!c.tie_embeddings) {
        out.push_back({"head.lm.weight", {v, d}, InitKind::normal, true});
      }
      break;
    case Family::encoder_only:
      out.push_back({"embed.position.weight", {c.max_seq_len, d}, InitKind::normal, false});
      out.push_back({"embed.segment.weight", {2, d}, InitKind::normal, false});
      for (std::size_t l = 0; l < c.n_layers; ++l) {
        add_block(out, "block." + std::to_string(l), c, false);
      }
      add_layer_norm(out, "final_ln", d);
      add_linear(out, "head.mlm.dense", d, d, InitKind::normal);
      add_layer_norm(out, "head.mlm.ln", d);
      if (!c.tie_embeddings) {
        out.push_back({"head.mlm.decoder.weight", {v, d}, InitKind::normal, true});
      }
      out.push_back({"head.mlm.bias", {v}, InitKind::zeros, false});
      add_linear(out, "head.pooler", d, d, InitKind::normal);
      add_linear(out, "head.sop", d, 2, InitKind::normal);
      break;
    case Family::encoder_decoder:
      out.push_back({"encoder.embed.position.weight", {c.max_seq_len, d}, InitKind::normal, false});
      out.push_back({"decoder.embed.position.weight", {c.max_seq_len, d}, InitKind::normal, false});
      for (std::size_t l = 0; l < c.encoder_layers(); ++l) {
        add_block(out, "encoder.block." + std::to_string(l), c, false);
      }
      add_layer_norm(out, "encoder.final_ln", d);
      for (std::size_t l = 0; l < c.decoder_layers(); ++l) {
        add_block(out, "decoder.block." + std::to_string(l), c, true);
      }
      add_layer_norm(out, "decoder.final_ln", d);
      if (!c.tie_embeddings) {
        out.push_back({"head.lm.weight", {v, d}, InitKind::normal, true});
      }
      break;
  }
  return out;
}

namespace {

struct BlockCounts {
  std::uint64_t self_block;
  std::uint64_t cross_block;
};

BlockCounts block_counts(const ModelConfig& c) {
  const std::uint64_t d = c.d_layer;
  const std::uint64_t i = static_cast<std::uint64_t>(c.n_heads) * c.d_head;
  const std::uint64_t ff = c.ff_width();
  const std::uint64_t ln = 2 * d;
  const std::uint64_t attn = (d * 3 * i + 3 * i) + (i * d + d);
  const std::uint64_t mlp = (d * ff + ff) + (ff * d + d);
  const std::uint64_t cross = ln + (d * i + i) + (d * 2 * i + 2 * i) + (i * d + d);
  const std::uint64_t self_block = 2 * ln + attn + mlp;
  return {self_block, self_block + cross};
}

}  // namespace

std::uint64_t count_block_params(const ModelConfig& c) {
  validate(c);
  const BlockCounts b = block_counts(c);
  if (c.family == Family::encoder_decoder) {
    return c.encoder_layers() * b.self_block + c.decoder_layers() * b.cross_block;
  }
  return c.n_layers * b.self_block;
}

std::uint64_t count_params(const ModelConfig& c) {
  const std::uint64_t d = c.d_layer;
  const std::uint64_t v = c.vocab_size;
  const std::uint64_t s = c.max_seq_len;
  const std::uint64_t untied_head = c.tie_embeddings ? 0 : v * d;
  const std::uint64_t blocks = count_block_params(c);
  switch (c.family) {
    case Family::decoder_only:
      return v * d + s * d + blocks + 2 * d + untied_head;
    case Family::encoder_only:
      return v * d + s * d + 2 * d + blocks + 2 * d  // embeddings, final ln
             + (d * d + d) + 2 * d + untied_head + v  // MLM head
             + (d * d + d) + (2 * d + 2);             // pooler, SOP head
    case Family::encoder_decoder:
      return v * d + 2 * s * d + blocks + 4 * d + untied_head;
  }
  return 0;
}

}  // namespace deepstack
