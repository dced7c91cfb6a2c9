#include "idforget/config.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "idforget/checkpoint.hpp"
#include "idforget/errors.hpp"

namespace idf {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_commas(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) out.push_back(trim(item));
  if (!text.empty() && text.back() == ',') out.push_back("");
  return out;
}

std::uint64_t parse_count(const std::string& text, const std::string& what) {
  const std::string t = trim(text);
  std::uint64_t v = 0;
  const auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || end != t.data() + t.size()) {
    throw ConfigError(what + ": expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& text, const std::string& what) {
  const std::string t = trim(text);
  if (t == "true" || t == "1") return true;
  if (t == "false" || t == "0") return false;
  throw ConfigError(what + ": expected true or false, got '" + text + "'");
}

std::vector<std::size_t> parse_width_list(const std::string& text, const std::string& what) {
  std::vector<std::size_t> out;
  for (const std::string& item : split_commas(text)) {
    const std::uint64_t v = parse_count(item, what);
    if (v == 0) throw ConfigError(what + ": widths must be >= 1");
    out.push_back(v);
  }
  return out;
}

std::string join_widths(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::string join_numbers(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_double(v[i]);
  return out;
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Ref>
Field real_field(Ref ref) {
  return {[ref](RunConfig& c, const std::string& v, const std::string& key) { ref(c) = parse_number(v, key); },
          [ref](const RunConfig& c) { return format_double(ref(c)); }};
}

template <typename Ref>
Field count_field(Ref ref) {
  return {[ref](RunConfig& c, const std::string& v, const std::string& key) {
            ref(c) = static_cast<std::remove_cvref_t<decltype(ref(c))>>(parse_count(v, key));
          },
          [ref](const RunConfig& c) { return std::to_string(ref(c)); }};
}

template <typename Ref>
Field bool_field(Ref ref) {
  return {[ref](RunConfig& c, const std::string& v, const std::string& key) { ref(c) = parse_bool(v, key); },
          [ref](const RunConfig& c) { return std::string(ref(c) ? "true" : "false"); }};
}

template <typename Ref>
Field widths_field(Ref ref) {
  return {[ref](RunConfig& c, const std::string& v, const std::string& key) { ref(c) = parse_width_list(v, key); },
          [ref](const RunConfig& c) { return join_widths(ref(c)); }};
}

// Every accepted key, in the canonical order used by entries().
const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = [] {
    std::vector<std::pair<std::string, Field>> t;
    t.emplace_back("seed", count_field([](auto& c) -> auto& { return c.seed; }));

    t.emplace_back("world.n_identities", count_field([](auto& c) -> auto& { return c.world.n_identities; }));
    t.emplace_back("world.latent_dim", count_field([](auto& c) -> auto& { return c.world.latent_dim; }));
    t.emplace_back("world.channels", count_field([](auto& c) -> auto& { return c.world.channels; }));
    t.emplace_back("world.feature_h", count_field([](auto& c) -> auto& { return c.world.feature_h; }));
    t.emplace_back("world.feature_w", count_field([](auto& c) -> auto& { return c.world.feature_w; }));
    t.emplace_back("world.image_side", count_field([](auto& c) -> auto& { return c.world.image_side; }));
    t.emplace_back("world.n_poses", count_field([](auto& c) -> auto& { return c.world.n_poses; }));
    t.emplace_back("world.noise_std", real_field([](auto& c) -> auto& { return c.world.noise_std; }));

    t.emplace_back("pretrain.epochs", count_field([](auto& c) -> auto& { return c.pretrain.epochs; }));
    t.emplace_back("pretrain.lr", real_field([](auto& c) -> auto& { return c.pretrain.lr; }));
    t.emplace_back("pretrain.cycle_weight", real_field([](auto& c) -> auto& { return c.pretrain.cycle_weight; }));
    t.emplace_back("pretrain.mse_threshold", real_field([](auto& c) -> auto& { return c.pretrain.mse_threshold; }));
    t.emplace_back("pretrain.id_threshold", real_field([](auto& c) -> auto& { return c.pretrain.id_threshold; }));
    t.emplace_back("pretrain.whiten_latents", bool_field([](auto& c) -> auto& { return c.pretrain.whiten_latents; }));
    t.emplace_back("pretrain.generator_hidden",
                   widths_field([](auto& c) -> auto& { return c.pretrain.shapes.generator_hidden; }));
    t.emplace_back("pretrain.encoder_hidden",
                   widths_field([](auto& c) -> auto& { return c.pretrain.shapes.encoder_hidden; }));
    t.emplace_back("pretrain.embedder_hidden",
                   count_field([](auto& c) -> auto& { return c.pretrain.shapes.embedder_hidden; }));
    t.emplace_back("pretrain.embedding_dim",
                   count_field([](auto& c) -> auto& { return c.pretrain.shapes.embedding_dim; }));
    t.emplace_back("pretrain.perceptual_hidden",
                   count_field([](auto& c) -> auto& { return c.pretrain.shapes.perceptual_hidden; }));
    t.emplace_back("pretrain.perceptual_dim",
                   count_field([](auto& c) -> auto& { return c.pretrain.shapes.perceptual_dim; }));

    t.emplace_back("deident.d", real_field([](auto& c) -> auto& { return c.deident.d; }));
    t.emplace_back("deident.d_absolute", bool_field([](auto& c) -> auto& { return c.deident.d_absolute; }));
    t.emplace_back("deident.lambda_mse", real_field([](auto& c) -> auto& { return c.deident.lambda_mse; }));
    t.emplace_back("deident.lambda_per", real_field([](auto& c) -> auto& { return c.deident.lambda_per; }));
    t.emplace_back("deident.lambda_id", real_field([](auto& c) -> auto& { return c.deident.lambda_id; }));
    t.emplace_back("deident.epochs", count_field([](auto& c) -> auto& { return c.deident.epochs; }));
    t.emplace_back("deident.lr", real_field([](auto& c) -> auto& { return c.deident.lr; }));
    t.emplace_back("deident.batch", count_field([](auto& c) -> auto& { return c.deident.batch; }));

    t.emplace_back("unlearn.lambda_mse", real_field([](auto& c) -> auto& { return c.unlearn.lambda_mse; }));
    t.emplace_back("unlearn.lambda_per", real_field([](auto& c) -> auto& { return c.unlearn.lambda_per; }));
    t.emplace_back("unlearn.lambda_id", real_field([](auto& c) -> auto& { return c.unlearn.lambda_id; }));
    t.emplace_back("unlearn.lambda_nei", real_field([](auto& c) -> auto& { return c.unlearn.lambda_nei; }));
    t.emplace_back("unlearn.lambda_ewc", real_field([](auto& c) -> auto& { return c.unlearn.lambda_ewc; }));
    t.emplace_back("unlearn.alpha_max", real_field([](auto& c) -> auto& { return c.unlearn.alpha_max; }));
    t.emplace_back("unlearn.alpha_r", real_field([](auto& c) -> auto& { return c.unlearn.alpha_r; }));
    t.emplace_back("unlearn.probes_per_id", count_field([](auto& c) -> auto& { return c.unlearn.probes_per_id; }));
    t.emplace_back("unlearn.d", real_field([](auto& c) -> auto& { return c.unlearn.d; }));
    t.emplace_back("unlearn.distances_absolute",
                   bool_field([](auto& c) -> auto& { return c.unlearn.distances_absolute; }));
    t.emplace_back("unlearn.steps", count_field([](auto& c) -> auto& { return c.unlearn.steps; }));
    t.emplace_back("unlearn.lr", real_field([](auto& c) -> auto& { return c.unlearn.lr; }));
    t.emplace_back("unlearn.method",
                   Field{[](RunConfig& c, const std::string& v, const std::string&) { c.unlearn.method = parse_method(trim(v)); },
                         [](const RunConfig& c) { return method_name(c.unlearn.method); }});
    t.emplace_back("unlearn.empirical_fisher",
                   bool_field([](auto& c) -> auto& { return c.unlearn.empirical_fisher; }));

    t.emplace_back("eval.sweep_count", count_field([](auto& c) -> auto& { return c.eval.sweep_count; }));
    t.emplace_back("eval.sweep_deltas",
                   Field{[](RunConfig& c, const std::string& v, const std::string&) {
                           c.eval.sweep_deltas = parse_number_list(v);
                         },
                         [](const RunConfig& c) { return join_numbers(c.eval.sweep_deltas); }});
    return t;
  }();
  return table;
}

const std::set<std::string> kSections{"world", "pretrain", "deident", "unlearn", "eval"};

}  // namespace

double parse_number(const std::string& text, const std::string& what) {
  const std::string t = trim(text);
  double v = 0.0;
  const auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || end != t.data() + t.size() || !std::isfinite(v)) {
    throw ConfigError(what + ": expected a finite number, got '" + text + "'");
  }
  return v;
}

std::vector<double> parse_number_list(const std::string& text) {
  if (trim(text).empty()) throw ConfigError("empty value list");
  std::vector<double> out;
  for (const std::string& item : split_commas(text)) out.push_back(parse_number(item, "value list"));
  return out;
}

std::vector<int> parse_id_list(const std::string& text) {
  std::vector<int> out;
  if (trim(text).empty()) return out;
  for (const std::string& item : split_commas(text)) {
    const std::uint64_t v = parse_count(item, "identity list");
    if (v > static_cast<std::uint64_t>(std::numeric_limits<int>::max())) {
      throw ConfigError("identity list: id " + item + " out of range");
    }
    out.push_back(static_cast<int>(v));
  }
  return out;
}

std::vector<std::vector<int>> parse_stage_plan(const std::string& text) {
  std::vector<std::vector<int>> stages;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    stages.push_back(parse_id_list(t));
  }
  if (stages.empty()) throw ConfigError("stage plan: no stages");
  return stages;
}

std::vector<std::pair<std::string, std::string>> RunConfig::entries() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [key, field] : fields()) out.emplace_back(key, field.get(*this));
  return out;
}

void RunConfig::finalize() {
  world.seed = seed;
  deident.seed = seed;
  unlearn.seed = seed;
  world.validate();
  deident.validate();
  unlearn.validate();
  if (pretrain.epochs < 1 || !(pretrain.lr > 0.0)) throw ConfigError("pretrain: epochs must be >= 1 and lr > 0");
  if (eval.sweep_count < 1) throw ConfigError("eval.sweep_count must be >= 1");
  for (double d : eval.sweep_deltas) {
    if (!(d > 0.0)) throw ConfigError("eval.sweep_deltas must be > 0");
  }
}

RunConfig parse_run_config(const std::string& text) {
  std::istringstream in(text);
  CLI::ConfigINI ini;
  std::vector<CLI::ConfigItem> items;
  try {
    items = ini.from_config(in);
  } catch (const CLI::Error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  std::map<std::string, const Field*> lookup;
  for (const auto& [key, field] : fields()) lookup[key] = &field;

  RunConfig cfg;
  std::set<std::string> seen;
  for (const CLI::ConfigItem& item : items) {
    if (item.name == "++" || item.name == "--") continue;
    if (item.parents.size() > 1 || (item.parents.size() == 1 && !kSections.contains(item.parents[0]))) {
      throw ConfigError("config: unknown section for key '" + item.fullname() + "'");
    }
    const std::string key = item.fullname();
    const auto it = lookup.find(key);
    if (it == lookup.end()) throw ConfigError("config: unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError("config: key '" + key + "' given twice");
    std::string value;
    for (std::size_t i = 0; i < item.inputs.size(); ++i) value += (i ? "," : "") + item.inputs[i];
    try {
      it->second->set(cfg, value, key);
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      throw ConfigError(msg.find(key) == std::string::npos ? "config: key '" + key + "': " + msg : "config: " + msg);
    }
  }
  cfg.finalize();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  return parse_run_config(read_text_file(path));
}

}  // namespace idf
