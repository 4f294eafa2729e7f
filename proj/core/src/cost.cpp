#include "deepstack/cost.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
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

double parse_number(std::string_view s, std::string_view what) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw InputError("bad " + std::string(what) + " '" + std::string(s) + "'");
  }
  return v;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace

WallTime WallTime::parse(std::string_view text) {
  const std::string s = trim(text);
  if (s.empty()) throw InputError("empty wall time");
  double hours = 0.0;
  std::size_t pos = 0;
  bool any = false;
  while (pos < s.size()) {
    std::size_t end = pos;
    while (end < s.size() && (std::isdigit(static_cast<unsigned char>(s[end])) || s[end] == '.')) {
      ++end;
    }
    if (end == pos || end == s.size()) {
      throw InputError("bad wall time '" + s + "' (expected e.g. 45h38m)");
    }
    const double v = parse_number(std::string_view(s).substr(pos, end - pos), "wall time");
    if (s[end] == 'h') hours += v;
    else if (s[end] == 'm') hours += v / 60.0;
    else throw InputError("bad wall time unit in '" + s + "'");
    pos = end + 1;
    any = true;
  }
  if (!any) throw InputError("bad wall time '" + s + "'");
  return WallTime{hours};
}

std::string WallTime::to_string() const {
  const auto total_minutes = static_cast<long long>(std::llround(hours * 60.0));
  const long long h = total_minutes / 60;
  const long long m = total_minutes % 60;
  return std::to_string(h) + "h" + (m != 0 ? std::to_string(m) + "m" : "");
}

void CostRecord::validate() const {
  if (wall_time.hours < 0.0) throw ConfigError(model + ": negative wall time");
  if (!(peak_rate > 0.0)) throw ConfigError(model + ": peak rate must be positive");
}

double eflops(const CostRecord& r) {
  r.validate();
  return r.wall_time.seconds() * static_cast<double>(r.gpus) * r.peak_rate / 1e18;
}

std::uint64_t tokens_per_step(const ModelConfig& config, std::uint64_t batch_size) {
  return batch_size * config.max_seq_len;
}

double theoretical_train_flops(const ModelConfig& config, double tokens) {
  return 6.0 * static_cast<double>(count_params(config)) * tokens;
}

std::optional<double> CostRow::relative_deviation() const {
  if (!reported_eflops || *reported_eflops == 0.0) return std::nullopt;
  return std::abs(computed_eflops - *reported_eflops) / *reported_eflops;
}

std::vector<CostRow> cost_table(const std::vector<CostRecord>& records,
                                const std::vector<ModelConfig>& configs) {
  std::map<std::string, const ModelConfig*> by_name;
  for (const auto& c : configs) by_name[c.name] = &c;
  std::vector<CostRow> rows;
  for (const auto& r : records) {
    CostRow row;
    row.model = r.model;
    row.wall_time = r.wall_time;
    row.steps = r.steps;
    row.gpus = r.gpus;
    row.computed_eflops = eflops(r);
    row.reported_eflops = r.reported_eflops;
    if (const auto it = by_name.find(r.model); it != by_name.end()) {
      row.params = count_params(*it->second);
      row.layers = it->second->n_layers;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_cost_text(std::ostream& out, const std::vector<CostRow>& rows) {
  out << std::left << std::setw(14) << "model" << std::right << std::setw(16) << "params"
      << std::setw(8) << "layers" << std::setw(10) << "time" << std::setw(10) << "steps"
      << std::setw(6) << "gpus" << std::setw(12) << "eflops" << std::setw(12) << "reported"
      << std::setw(10) << "dev" << '\n';
  for (const auto& r : rows) {
    const auto dev = r.relative_deviation();
    out << std::left << std::setw(14) << r.model << std::right << std::setw(16)
        << (r.params ? std::to_string(*r.params) : "") << std::setw(8)
        << (r.layers ? std::to_string(*r.layers) : "") << std::setw(10)
        << r.wall_time.to_string() << std::setw(10) << r.steps << std::setw(6) << r.gpus
        << std::setw(12) << fixed(r.computed_eflops, 2) << std::setw(12)
        << (r.reported_eflops ? fixed(*r.reported_eflops, 1) : "") << std::setw(10)
        << (dev ? fixed(*dev * 100.0, 2) + "%" : "") << '\n';
  }
}

void write_cost_csv(std::ostream& out, const std::vector<CostRow>& rows) {
  out << "model,params,layers,time,steps,gpus,eflops_computed,eflops_reported,relative_deviation\n";
  for (const auto& r : rows) {
    const auto dev = r.relative_deviation();
    out << r.model << ',' << (r.params ? std::to_string(*r.params) : "") << ','
        << (r.layers ? std::to_string(*r.layers) : "") << ',' << r.wall_time.to_string()
        << ',' << r.steps << ',' << r.gpus << ',' << fixed(r.computed_eflops, 4) << ','
        << (r.reported_eflops ? fixed(*r.reported_eflops, 4) : "") << ','
        << (dev ? fixed(*dev, 6) : "") << '\n';
  }
}

std::uint64_t parse_count(std::string_view text) {
  std::string s = trim(text);
  if (s.empty()) throw InputError("empty count");
  double mult = 1.0;
  if (s.back() == 'k' || s.back() == 'K') mult = 1e3;
  else if (s.back() == 'M' || s.back() == 'm') mult = 1e6;
  if (mult != 1.0) s.pop_back();
  const double v = parse_number(s, "count") * mult;
  if (v < 0.0) throw InputError("negative count '" + std::string(text) + "'");
  return static_cast<std::uint64_t>(std::llround(v));
}

std::vector<CostRecord> read_cost_records(std::istream& in) {
  std::vector<CostRecord> out;
  std::string line;
  std::size_t lineno = 0;
  bool header = true;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    if (header) {
      header = false;
      if (t.rfind("model", 0) == 0) continue;
    }
    const auto cells = split_csv(t);
    if (cells.size() < 4 || cells.size() > 5) {
      throw InputError("cost table line " + std::to_string(lineno) +
                       ": expected model,time,steps,gpus[,eflops]");
    }
    CostRecord r;
    r.model = cells[0];
    r.wall_time = WallTime::parse(cells[1]);
    r.steps = parse_count(cells[2]);
    r.gpus = parse_count(cells[3]);
    if (cells.size() == 5 && !cells[4].empty()) {
      r.reported_eflops = parse_number(cells[4], "eflops");
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<CostRecord> read_cost_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open cost table " + path);
  return read_cost_records(in);
}

}  // namespace deepstack
