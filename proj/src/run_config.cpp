#include "magd/run_config.hpp"

#include <charconv>
#include <functional>
#include <map>
#include <sstream>

#include "magd/binary_io.hpp"
#include "magd/errors.hpp"

namespace magd {

std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

namespace {

template <class T>
T parse_number(const std::string& key, const std::string& s) {
  T v{};
  const char* end = s.data() + s.size();
  auto r = std::from_chars(s.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end) throw ConfigError("bad value '" + s + "' for " + key);
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("bad boolean '" + s + "' for " + key);
}

std::vector<int> parse_int_list(const std::string& key, const std::string& s) {
  std::vector<int> out;
  if (s.empty() || s == "none") return out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(parse_number<int>(key, item));
  return out;
}

std::string int_list(const std::vector<int>& v) {
  if (v.empty()) return "none";
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define MAGD_INT(path)                                                                            \
  Field {                                                                                         \
    [](const RunConfig& c) { return std::to_string(c.path); },                                    \
        [](RunConfig& c, const std::string& v) { c.path = parse_number<decltype(c.path)>(#path, v); } \
  }
#define MAGD_DBL(path)                                                                  \
  Field {                                                                               \
    [](const RunConfig& c) { return format_double(c.path); },                           \
        [](RunConfig& c, const std::string& v) { c.path = parse_number<double>(#path, v); } \
  }

const std::vector<std::pair<std::string, Field>>& table() {
  static const std::vector<std::pair<std::string, Field>> t = {
      {"image_size", Field{[](const RunConfig& c) { return std::to_string(c.model.image_size); },
                           [](RunConfig& c, const std::string& v) {
                             c.model.image_size = c.data.image_size = parse_number<int>("image_size", v);
                           }}},
      {"channels", MAGD_INT(model.channels)},
      {"levels", MAGD_INT(model.levels)},
      {"heads", MAGD_INT(model.heads)},
      {"context_dim", MAGD_INT(model.context_dim)},
      {"prompt_len", Field{[](const RunConfig& c) { return std::to_string(c.model.max_prompt_len); },
                           [](RunConfig& c, const std::string& v) {
                             c.model.max_prompt_len = c.data.prompt_len = parse_number<int>("prompt_len", v);
                           }}},
      {"vocab_size", MAGD_INT(model.vocab_size)},
      {"groups", MAGD_INT(model.groups)},
      {"positional_embedding",
       Field{[](const RunConfig& c) { return std::string(c.model.positional_embedding ? "true" : "false"); },
             [](RunConfig& c, const std::string& v) {
               c.model.positional_embedding = parse_bool("positional_embedding", v);
             }}},
      {"init_seed", MAGD_INT(init_seed)},
      {"dataset_seed", MAGD_INT(dataset_seed)},
      {"dataset_count", MAGD_INT(dataset_count)},
      {"min_objects", MAGD_INT(data.min_objects)},
      {"max_objects", MAGD_INT(data.max_objects)},
      {"min_size", MAGD_INT(data.min_size)},
      {"max_size", MAGD_INT(data.max_size)},
      {"margin", MAGD_INT(data.margin)},
      {"train_steps", MAGD_INT(train.steps)},
      {"batch_size", MAGD_INT(train.batch_size)},
      {"lr", MAGD_DBL(train.lr)},
      {"clip_norm", MAGD_DBL(train.clip_norm)},
      {"null_prob", MAGD_DBL(train.null_prob)},
      {"optimizer", Field{[](const RunConfig& c) {
                            return std::string(c.train.optimizer == OptimizerKind::adam ? "adam" : "sgd");
                          },
                          [](RunConfig& c, const std::string& v) {
                            if (v == "adam") c.train.optimizer = OptimizerKind::adam;
                            else if (v == "sgd") c.train.optimizer = OptimizerKind::sgd;
                            else throw ConfigError("optimizer must be adam or sgd, got '" + v + "'");
                          }}},
      {"ema_decay", MAGD_DBL(train.ema_decay)},
      {"log_every", MAGD_INT(train.log_every)},
      {"train_seed", MAGD_INT(train.seed)},
      {"checkpoint_every", MAGD_INT(checkpoint_every)},
      {"ddim_steps", MAGD_INT(sampler.num_steps)},
      {"cfg_scale", MAGD_DBL(sampler.cfg_scale)},
      {"seed", MAGD_INT(sampler.seed)},
      {"snapshot_steps", Field{[](const RunConfig& c) { return int_list(c.sampler.snapshot_steps); },
                               [](RunConfig& c, const std::string& v) {
                                 c.sampler.snapshot_steps = parse_int_list("snapshot_steps", v);
                               }}},
      {"method", Field{[](const RunConfig& c) { return std::string(method_name(c.guidance.method)); },
                       [](RunConfig& c, const std::string& v) { c.guidance.method = parse_method(v); }}},
      {"alpha", MAGD_DBL(guidance.alpha)},
      {"lambda", MAGD_DBL(guidance.lambda)},
      {"tau_fraction", MAGD_DBL(guidance.tau_fraction)},
      {"pww_weight", MAGD_DBL(guidance.pww_weight)},
      {"guidance_repeats", MAGD_INT(guidance.guidance_repeats)},
      {"blended_alpha", MAGD_DBL(guidance.blended_alpha)},
      {"jobs", MAGD_INT(jobs)},
  };
  return t;
}

const Field& field(const std::string& key) {
  for (const auto& [k, f] : table())
    if (k == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& [key, _] : table()) out.push_back(key);
    return out;
  }();
  return k;
}

void RunConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, trim(value)); }

std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

void RunConfig::validate() const {
  model.validate();
  data.validate();
  guidance.validate();
  if (data.image_size != model.image_size) throw ConfigError("data and model image sizes differ");
  if (model.vocab_size != Vocabulary::shapes().size()) throw ConfigError("vocab_size must match the shapes vocabulary");
  if (dataset_count < 1) throw ConfigError("dataset_count must be >= 1");
  if (train.steps < 0) throw ConfigError("train_steps must be >= 0");
  if (train.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (sampler.num_steps < 1) throw ConfigError("ddim_steps must be >= 1");
  if (jobs < 0) throw ConfigError("jobs must be >= 0");
}

std::string RunConfig::dump() const {
  std::string out;
  for (const auto& [k, f] : table()) out += k + " = " + f.get(*this) + "\n";
  return out;
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  std::map<std::string, int> seen;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string body = trim(line.substr(0, line.find('#')));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(body.substr(0, eq));
    if (seen.count(key))
      throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    seen[key] = lineno;
    try {
      c.set(key, body.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

RunConfig load_run_config(const std::string& path) {
  try {
    return parse_run_config(io::read_text(path));
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace magd
