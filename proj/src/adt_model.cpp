#include "coupondt/adt_model.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace coupondt::adt {

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_constraint: return "no_constraint";
    case Variant::no_rtg: return "no_rtg";
  }
  return "full";
}

Variant parse_variant(std::string_view s) {
  if (s == "full") return Variant::full;
  if (s == "no_constraint") return Variant::no_constraint;
  if (s == "no_rtg") return Variant::no_rtg;
  throw std::invalid_argument("unknown variant '" + std::string(s) + "' (expected full, no_constraint or no_rtg)");
}

void ModelConfig::validate() const {
  if (state_dim < 1) throw std::invalid_argument("model: state_dim must be >= 1");
  if (n_actions < 1) throw std::invalid_argument("model: n_actions must be >= 1");
  if (embed_dim < 1 || n_heads < 1 || embed_dim % n_heads != 0)
    throw std::invalid_argument("model: embed_dim must be a positive multiple of n_heads");
  if (n_layers < 0) throw std::invalid_argument("model: n_layers must be >= 0");
  if (window_len < 1 || max_timestep < 1 || window_len > max_timestep)
    throw std::invalid_argument("model: need 1 <= window_len <= max_timestep");
  if (lambda_buckets < 1) throw std::invalid_argument("model: lambda_buckets must be >= 1");
}

std::vector<TokenKind> ModelConfig::token_kinds() const {
  std::vector<TokenKind> kinds;
  if (uses_ctg()) kinds.push_back(TokenKind::ctg);
  if (uses_rtg()) kinds.push_back(TokenKind::rtg);
  kinds.push_back(TokenKind::state);
  kinds.push_back(TokenKind::action);
  return kinds;
}

int lambda_bucket(double lambda, int buckets) {
  const double clipped = std::clamp(lambda, 0.0, 1.0);
  return std::min(buckets - 1, static_cast<int>(clipped * buckets));
}

int TokenWindow::valid_steps() const {
  return static_cast<int>(std::count_if(steps.begin(), steps.end(), [](const WindowStep& s) { return s.valid; }));
}

ModelParams::ModelParams(const ModelConfig& config) : config_(config) {
  config_.validate();
  const int D = config_.embed_dim;
  std::size_t offset = 0;
  auto add = [&](std::string name, int rows, int cols, bool decay) {
    tensors_.push_back({std::move(name), rows, cols, offset, decay});
    offset += static_cast<std::size_t>(rows) * cols;
    return tensors_.back().offset;
  };
  layout_.state_w = add("embed.state.weight", config_.state_dim, D, true);
  layout_.state_b = add("embed.state.bias", 1, D, false);
  layout_.action_w = add("embed.action.weight", config_.n_actions, D, true);
  if (config_.uses_rtg()) {
    layout_.rtg_w = add("embed.rtg.weight", 1, D, true);
    layout_.rtg_b = add("embed.rtg.bias", 1, D, false);
  }
  if (config_.uses_ctg()) {
    layout_.ctg_w = add("embed.ctg.weight", 1, D, true);
    layout_.ctg_b = add("embed.ctg.bias", 1, D, false);
  }
  layout_.time_w = add("embed.timestep.weight", config_.max_timestep, D, true);
  if (config_.uses_lambda()) layout_.lambda_w = add("embed.lambda.weight", config_.lambda_buckets, D, true);
  layout_.ln0_g = add("embed.ln.gain", 1, D, false);
  layout_.ln0_b = add("embed.ln.bias", 1, D, false);
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    BlockLayout b{};
    b.ln1_g = add(p + "ln1.gain", 1, D, false);
    b.ln1_b = add(p + "ln1.bias", 1, D, false);
    b.qkv_w = add(p + "attn.qkv.weight", D, 3 * D, true);
    b.qkv_b = add(p + "attn.qkv.bias", 1, 3 * D, false);
    b.out_w = add(p + "attn.out.weight", D, D, true);
    b.out_b = add(p + "attn.out.bias", 1, D, false);
    b.ln2_g = add(p + "ln2.gain", 1, D, false);
    b.ln2_b = add(p + "ln2.bias", 1, D, false);
    b.fc_w = add(p + "mlp.fc.weight", D, 4 * D, true);
    b.fc_b = add(p + "mlp.fc.bias", 1, 4 * D, false);
    b.proj_w = add(p + "mlp.proj.weight", 4 * D, D, true);
    b.proj_b = add(p + "mlp.proj.bias", 1, D, false);
    layout_.blocks.push_back(b);
  }
  layout_.lnf_g = add("final.ln.gain", 1, D, false);
  layout_.lnf_b = add("final.ln.bias", 1, D, false);
  layout_.head_w = add("head.weight", D, config_.n_actions, true);
  layout_.head_b = add("head.bias", 1, config_.n_actions, false);
  layout_.total = offset;

  values_.assign(offset, 0.0);
  for (const auto& t : tensors_)
    if (t.name.ends_with(".gain")) std::fill_n(values_.begin() + static_cast<std::ptrdiff_t>(t.offset), t.size(), 1.0);
}

const TensorInfo& ModelParams::tensor(std::string_view name) const {
  for (const auto& t : tensors_)
    if (t.name == name) return t;
  throw std::out_of_range("model has no tensor '" + std::string(name) + "'");
}

bool ModelParams::has_tensor(std::string_view name) const {
  return std::any_of(tensors_.begin(), tensors_.end(), [&](const TensorInfo& t) { return t.name == name; });
}

std::span<double> ModelParams::data(std::string_view name) {
  const auto& t = tensor(name);
  return {values_.data() + t.offset, t.size()};
}

std::span<const double> ModelParams::data(std::string_view name) const {
  const auto& t = tensor(name);
  return {values_.data() + t.offset, t.size()};
}

void round_to_storage(std::span<double> values) {
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

void init_params(ModelParams& params, Rng& rng) {
  constexpr double kStd = 0.02;
  std::normal_distribution<double> normal(0.0, 1.0);
  auto values = params.values();
  for (const auto& t : params.tensors()) {
    double* p = values.data() + t.offset;
    if (t.decay) {
      for (std::size_t i = 0; i < t.size(); ++i) {
        double z;
        do {
          z = normal(rng);
        } while (std::abs(z) > 2.0);
        p[i] = kStd * z;
      }
    } else {
      const double fill = t.name.ends_with(".gain") ? 1.0 : 0.0;
      std::fill_n(p, t.size(), fill);
    }
  }
  round_to_storage(values);
}

// --- configuration fields -------------------------------------------------

namespace {

template <class T>
T parse_number(std::string_view key, std::string_view s) {
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
    throw std::invalid_argument("malformed value '" + std::string(s) + "' for key '" + std::string(key) + "'");
  return v;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> model_config_fields(const ModelConfig& c) {
  return {{"state_dim", std::to_string(c.state_dim)},
          {"n_actions", std::to_string(c.n_actions)},
          {"embed_dim", std::to_string(c.embed_dim)},
          {"n_layers", std::to_string(c.n_layers)},
          {"n_heads", std::to_string(c.n_heads)},
          {"window_len", std::to_string(c.window_len)},
          {"max_timestep", std::to_string(c.max_timestep)},
          {"lambda_buckets", std::to_string(c.lambda_buckets)},
          {"variant", std::string(to_string(c.variant))}};
}

bool set_model_config_field(ModelConfig& c, std::string_view key, std::string_view value) {
  if (key == "state_dim") c.state_dim = parse_number<int>(key, value);
  else if (key == "n_actions") c.n_actions = parse_number<int>(key, value);
  else if (key == "embed_dim") c.embed_dim = parse_number<int>(key, value);
  else if (key == "n_layers") c.n_layers = parse_number<int>(key, value);
  else if (key == "n_heads") c.n_heads = parse_number<int>(key, value);
  else if (key == "window_len") c.window_len = parse_number<int>(key, value);
  else if (key == "max_timestep") c.max_timestep = parse_number<int>(key, value);
  else if (key == "lambda_buckets") c.lambda_buckets = parse_number<int>(key, value);
  else if (key == "variant") c.variant = parse_variant(value);
  else return false;
  return true;
}

// --- checkpoints ----------------------------------------------------------

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw CheckpointError("write failed for '" + path.string() + "'");
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint file missing: '" + path.string() + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(item);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::string join_reals(std::span<const double> v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += '\t';
    s += data::format_real(v[i]);
  }
  return s;
}

std::vector<double> parse_reals(const std::vector<std::string>& fields, std::size_t from, const std::string& what) {
  std::vector<double> out;
  for (std::size_t i = from; i < fields.size(); ++i) {
    try {
      out.push_back(parse_number<double>(what, fields[i]));
    } catch (const std::invalid_argument& e) {
      throw CheckpointError(e.what());
    }
  }
  return out;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& params = ckpt.params;

  std::string cfg;
  for (const auto& [k, v] : model_config_fields(params.config())) cfg += k + "=" + v + "\n";
  write_text(dir / "model.cfg", cfg);

  std::string manifest;
  for (const auto& t : params.tensors())
    manifest += t.name + "\t" + std::to_string(t.rows) + "," + std::to_string(t.cols) + "\t" +
                std::to_string(t.offset * sizeof(float)) + "\n";
  write_text(dir / "manifest", manifest);

  std::string blob(params.size() * sizeof(float), '\0');
  const auto values = params.values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto f = static_cast<float>(values[i]);
    auto bits = std::bit_cast<std::uint32_t>(f);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    std::memcpy(blob.data() + i * sizeof(float), &bits, sizeof bits);
  }
  write_text(dir / "weights.bin", blob);

  write_text(dir / "normalizer",
             "mu\t" + join_reals(ckpt.normalizer.mu) + "\nsigma\t" + join_reals(ckpt.normalizer.sigma) + "\n");
  write_text(dir / "conditioning", "rtg_target\t" + data::format_real(ckpt.rtg_target) + "\nctg_max\t" +
                                       data::format_real(ckpt.ctg_max) + "\nrtg_per_cost\t" +
                                       data::format_real(ckpt.rtg_per_cost) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir, const ModelConfig* expected) {
  if (!std::filesystem::is_directory(dir)) throw CheckpointError("checkpoint not found: '" + dir.string() + "'");
  ModelConfig config;
  for (const auto& line : read_lines(dir / "model.cfg")) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("model.cfg: malformed line '" + line + "'");
    try {
      if (!set_model_config_field(config, line.substr(0, eq), line.substr(eq + 1)))
        throw CheckpointError("model.cfg: unknown key '" + line.substr(0, eq) + "'");
    } catch (const std::invalid_argument& e) {
      throw CheckpointError(std::string("model.cfg: ") + e.what());
    }
  }
  if (expected && !(*expected == config))
    throw CheckpointError("config mismatch: checkpoint was saved with a different model configuration");

  Checkpoint ckpt{ModelParams(config), {}, 0.0};
  auto& params = ckpt.params;
  const auto manifest = read_lines(dir / "manifest");
  if (manifest.size() != params.tensors().size())
    throw CheckpointError("manifest lists " + std::to_string(manifest.size()) + " tensors, configuration needs " +
                          std::to_string(params.tensors().size()));
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const auto fields = split(manifest[i], '\t');
    const auto& t = params.tensors()[i];
    if (fields.size() != 3 || fields[0] != t.name)
      throw CheckpointError("manifest line " + std::to_string(i + 1) + ": expected tensor '" + t.name + "'");
    const std::string shape = std::to_string(t.rows) + "," + std::to_string(t.cols);
    if (fields[1] != shape)
      throw CheckpointError("tensor '" + t.name + "': manifest shape " + fields[1] + " does not match " + shape);
    if (fields[2] != std::to_string(t.offset * sizeof(float)))
      throw CheckpointError("tensor '" + t.name + "': unexpected byte offset " + fields[2]);
  }

  std::ifstream in(dir / "weights.bin", std::ios::binary);
  if (!in) throw CheckpointError("checkpoint file missing: '" + (dir / "weights.bin").string() + "'");
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (blob.size() != params.size() * sizeof(float))
    throw CheckpointError("weights.bin: truncated blob (" + std::to_string(blob.size()) + " bytes, expected " +
                          std::to_string(params.size() * sizeof(float)) + ")");
  auto values = params.values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, blob.data() + i * sizeof(float), sizeof bits);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    values[i] = static_cast<double>(std::bit_cast<float>(bits));
    if (!std::isfinite(values[i])) throw CheckpointError("weights.bin: non-finite parameter at index " + std::to_string(i));
  }

  for (const auto& line : read_lines(dir / "normalizer")) {
    const auto fields = split(line, '\t');
    if (fields.empty()) continue;
    if (fields[0] == "mu") ckpt.normalizer.mu = parse_reals(fields, 1, "mu");
    else if (fields[0] == "sigma") ckpt.normalizer.sigma = parse_reals(fields, 1, "sigma");
    else throw CheckpointError("normalizer: unknown row '" + fields[0] + "'");
  }
  if (ckpt.normalizer.mu.size() != static_cast<std::size_t>(config.state_dim) ||
      ckpt.normalizer.sigma.size() != ckpt.normalizer.mu.size())
    throw CheckpointError("normalizer: dimension does not match state_dim");

  for (const auto& line : read_lines(dir / "conditioning")) {
    const auto fields = split(line, '\t');
    if (fields.size() == 2 && fields[0] == "rtg_target") ckpt.rtg_target = parse_reals(fields, 1, "rtg_target")[0];
    else if (fields.size() == 2 && fields[0] == "ctg_max") ckpt.ctg_max = parse_reals(fields, 1, "ctg_max")[0];
    else if (fields.size() == 2 && fields[0] == "rtg_per_cost")
      ckpt.rtg_per_cost = parse_reals(fields, 1, "rtg_per_cost")[0];
    else throw CheckpointError("conditioning: malformed line '" + line + "'");
  }
  return ckpt;
}

}  // namespace coupondt::adt
