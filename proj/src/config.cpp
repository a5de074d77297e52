#include "coupondt/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace coupondt::config {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <typename T>
T parse_num(std::string_view v) {
  T x{};
  const auto* end = v.data() + v.size();
  const auto r = std::from_chars(v.data(), end, x);
  if (v.empty() || r.ec != std::errc() || r.ptr != end)
    throw std::invalid_argument("expected a number, got '" + std::string(v) + "'");
  return x;
}

std::string real(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string reals(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + real(v[i]);
  return s;
}

std::vector<double> parse_reals(std::string_view v) {
  std::vector<double> out;
  for (auto p : split(v, ',')) out.push_back(parse_num<double>(p));
  return out;
}

std::string strings(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
  return s;
}

std::vector<std::string> parse_strings(std::string_view v) {
  std::vector<std::string> out;
  if (trim(v).empty()) return out;
  for (auto p : split(v, ',')) out.emplace_back(p);
  return out;
}

// Low:0.1,0.15;Medium:0.3
std::string levels(const std::vector<bench::BudgetLevel>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ";" : "") + v[i].name + ":" + reals(v[i].fractions);
  return s;
}

std::vector<bench::BudgetLevel> parse_levels(std::string_view v) {
  std::vector<bench::BudgetLevel> out;
  for (auto part : split(v, ';')) {
    const auto colon = part.find(':');
    if (colon == std::string_view::npos) throw std::invalid_argument("level '" + std::string(part) + "' needs name:fractions");
    out.push_back({std::string(trim(part.substr(0, colon))), parse_reals(part.substr(colon + 1))});
  }
  return out;
}

struct Field {
  std::string key;
  std::function<std::string()> get;
  std::function<void(std::string_view)> set;
};

template <typename T>
Field num(std::string key, T& ref) {
  if constexpr (std::is_floating_point_v<T>)
    return {std::move(key), [&ref] { return real(ref); }, [&ref](std::string_view v) { ref = parse_num<T>(v); }};
  else
    return {std::move(key), [&ref] { return std::to_string(ref); },
            [&ref](std::string_view v) { ref = parse_num<T>(v); }};
}

Field text(std::string key, std::string& ref) {
  return {std::move(key), [&ref] { return ref; }, [&ref](std::string_view v) { ref = std::string(v); }};
}

using Section = std::pair<std::string, std::vector<Field>>;

std::vector<Section> sections(RunConfig& c) {
  std::vector<Section> s;
  s.push_back({"", {num("seed", c.seed)}});

  auto& e = c.env;
  s.push_back({"env",
               {num("n_users", e.n_users), num("horizon", e.horizon), num("n_actions", e.n_actions),
                num("feature_dim", e.feature_dim),
                {"coupon_face_values", [&e] { return reals(e.coupon_face_values); },
                 [&e](std::string_view v) { e.coupon_face_values = parse_reals(v); }},
                {"action_offsets", [&e] { return reals(e.action_offsets); },
                 [&e](std::string_view v) { e.action_offsets = parse_reals(v); }},
                num("noise_std", e.noise_std)}});

  auto& p = c.pipe;
  s.push_back({"pipe",
               {num("gamma", p.gamma), num("lambda_copies", p.lambda_copies), num("key_feature", p.key_feature),
                num("train_fraction", p.train_fraction)}});

  std::vector<Field> model;
  for (const auto& [k, v] : adt::model_config_fields(c.model)) {
    model.push_back({k,
                     [&m = c.model, k] {
                       for (const auto& [k2, v2] : adt::model_config_fields(m))
                         if (k2 == k) return v2;
                       return std::string();
                     },
                     [&m = c.model, k](std::string_view v) { adt::set_model_config_field(m, k, v); }});
  }
  s.push_back({"model", std::move(model)});

  auto& t = c.train;
  s.push_back({"train",
               {num("learning_rate", t.learning_rate), num("weight_decay", t.weight_decay), num("beta1", t.beta1),
                num("beta2", t.beta2), num("epsilon", t.epsilon), num("batch_size", t.batch_size),
                num("n_epochs", t.n_epochs), num("window_len", t.window_len), num("grad_clip", t.grad_clip),
                num("checkpoint_every", t.checkpoint_every)}});

  auto& d = c.dual;
  s.push_back({"dual",
               {num("max_iterations", d.max_iterations), num("noise", d.noise), num("lr_scale", d.lr_scale),
                num("inner_evaluations", d.inner_evaluations), num("epsilon_fraction", d.epsilon_fraction),
                num("budget_fraction", c.budget_fraction)}});

  auto& b = c.bench;
  auto& a = c.ablation;
  s.push_back({"bench",
               {{"levels", [&b] { return levels(b.levels); },
                 [&b](std::string_view v) { b.levels = parse_levels(v); }},
                num("n_seeds", b.n_seeds),
                {"policies", [&b] { return strings(b.policies); },
                 [&b](std::string_view v) { b.policies = parse_strings(v); }},
                text("baseline", b.baseline), num("calibration_users", b.calibration_users),
                {"ablation_levels", [&a] { return levels(a.levels); },
                 [&a](std::string_view v) { a.levels = parse_levels(v); }},
                num("ablation_seeds", a.n_seeds), num("ablation_users", a.n_users),
                num("timing_repeats", c.timing_repeats)}});

  auto& pa = c.paths;
  s.push_back({"paths",
               {text("dataset", pa.dataset), text("checkpoint", pa.checkpoint),
                text("checkpoint_no_rtg", pa.checkpoint_no_rtg),
                text("checkpoint_no_constraint", pa.checkpoint_no_constraint), text("reports", pa.reports)}});
  return s;
}

void validate(const RunConfig& c) {
  c.env.validate();
  c.pipe.validate();
  c.model.validate();
  c.train.validate();
  c.dual.validate();
  c.bench.validate();
  c.ablation.validate();
  if (c.model.state_dim != c.env.feature_dim)
    throw std::invalid_argument("model.state_dim must equal env.feature_dim");
  if (c.model.n_actions != c.env.n_actions) throw std::invalid_argument("model.n_actions must equal env.n_actions");
  if (c.model.max_timestep < c.env.horizon)
    throw std::invalid_argument("model.max_timestep must be at least env.horizon");
  if (!(c.budget_fraction >= 0.0 && c.budget_fraction <= 1.0))
    throw std::invalid_argument("dual.budget_fraction must lie in [0, 1]");
  if (c.timing_repeats < 1) throw std::invalid_argument("bench.timing_repeats must be >= 1");
}

}  // namespace

void apply_global_seed(RunConfig& c) {
  c.env.seed = derive_seed(c.seed, "env");
  c.pipe.seed = derive_seed(c.seed, "pipe");
  c.train.seed = derive_seed(c.seed, "train");
  c.dual.seed = derive_seed(c.seed, "dual");
  c.bench.seed = derive_seed(c.seed, "bench");
  c.ablation.seed = derive_seed(c.seed, "bench", 1);
}

std::uint64_t logging_seed(const RunConfig& c) { return derive_seed(c.seed, "env", 1); }

RunConfig default_config() {
  RunConfig c;
  apply_global_seed(c);
  return c;
}

RunConfig parse_config(std::string_view input) {
  RunConfig c = default_config();
  auto secs = sections(c);
  const std::vector<Field>* current = &secs.front().second;
  std::string current_name;
  bool saw_header = false;
  std::size_t lineno = 0;
  std::istringstream in{std::string(input)};
  for (std::string raw; std::getline(in, raw);) {
    ++lineno;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "config line " + std::to_string(lineno) + ": ";
    if (!saw_header) {
      if (line != kConfigVersion)
        throw ConfigError(where + "expected version header '" + kConfigVersion + "', got '" + std::string(line) + "'");
      saw_header = true;
      continue;
    }
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header");
      current_name = std::string(trim(line.substr(1, line.size() - 2)));
      current = nullptr;
      for (const auto& [name, fields] : secs)
        if (!name.empty() && name == current_name) current = &fields;
      if (!current) throw ConfigError(where + "unknown section [" + current_name + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + "expected key = value");
    const std::string key(trim(line.substr(0, eq)));
    const auto value = trim(line.substr(eq + 1));
    const std::string full = current_name.empty() ? key : current_name + "." + key;
    const Field* f = nullptr;
    for (const auto& cand : *current)
      if (cand.key == key) f = &cand;
    if (!f) throw ConfigError(where + "unknown key '" + full + "'");
    try {
      f->set(value);
    } catch (const std::exception& e) {
      throw ConfigError(where + "bad value for '" + full + "': " + e.what());
    }
  }
  if (!saw_header) throw ConfigError(std::string("config: missing version header '") + kConfigVersion + "'");
  apply_global_seed(c);
  try {
    validate(c);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const RunConfig& config) {
  RunConfig c = config;
  std::string out = std::string(kConfigVersion) + "\n";
  for (const auto& [name, fields] : sections(c)) {
    if (!name.empty()) out += "\n[" + name + "]\n";
    for (const auto& f : fields) out += f.key + " = " + f.get() + "\n";
  }
  return out;
}

}  // namespace coupondt::config
