#include "coupondt/datapipe.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace coupondt::data {

void PipeConfig::validate() const {
  if (gamma != 1.0) throw std::invalid_argument("pipe: gamma is fixed at 1.0");
  if (lambda_copies < 1) throw std::invalid_argument("pipe: lambda_copies must be >= 1");
  if (key_feature < 0) throw std::invalid_argument("pipe: key_feature must be >= 0");
  if (!(train_fraction > 0.0 && train_fraction <= 1.0))
    throw std::invalid_argument("pipe: train_fraction must be in (0, 1]");
}

std::vector<Trajectory> build_trajectories(std::span<const InteractionRecord> records,
                                           const PipeConfig& config) {
  if (records.empty()) throw std::invalid_argument("build_trajectories: no records");
  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::int64_t> ids;
  std::unordered_map<std::int64_t, std::size_t> by_id;
  std::map<std::uint64_t, std::size_t> by_key;  // bit pattern of the key feature

  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    for (double f : r.features)
      if (!std::isfinite(f))
        throw std::invalid_argument("build_trajectories: record " + std::to_string(i) +
                                    " has a non-finite feature");
    if (!(r.cost >= 0.0) || !(r.reward >= 0.0) || !std::isfinite(r.cost) || !std::isfinite(r.reward))
      throw std::invalid_argument("build_trajectories: record " + std::to_string(i) +
                                  " has a negative or non-finite cost/reward");
    std::size_t g;
    if (r.user_id >= 0) {
      auto [it, fresh] = by_id.try_emplace(r.user_id, groups.size());
      g = it->second;
      if (fresh) {
        groups.emplace_back();
        ids.push_back(r.user_id);
      }
    } else {
      if (config.key_feature >= static_cast<int>(r.features.size()))
        throw std::invalid_argument("build_trajectories: key feature out of range for record " +
                                    std::to_string(i));
      double key = r.features[config.key_feature];
      if (key == 0.0) key = 0.0;  // fold -0 into +0
      std::uint64_t bits;
      std::memcpy(&bits, &key, sizeof bits);
      auto [it, fresh] = by_key.try_emplace(bits, groups.size());
      g = it->second;
      if (fresh) {
        groups.emplace_back();
        ids.push_back(-static_cast<std::int64_t>(by_key.size()));
      }
    }
    groups[g].push_back(i);
  }

  std::vector<Trajectory> out;
  out.reserve(groups.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    auto& idx = groups[g];
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return records[a].time < records[b].time; });
    auto steps = std::make_shared<StepList>();
    steps->reserve(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto& r = records[idx[k]];
      steps->push_back({r.features, r.action, r.reward, r.cost, 0.0, 0.0, static_cast<int>(k)});
    }
    out.push_back({ids[g], std::move(steps), -1.0});
  }
  return out;
}

Trajectory annotate_to_go(const Trajectory& trajectory, double gamma) {
  auto steps = std::make_shared<StepList>(*trajectory.steps);
  double rtg = 0.0;
  double ctg = 0.0;
  for (std::size_t k = steps->size(); k-- > 0;) {
    auto& s = (*steps)[k];
    rtg = s.reward + gamma * rtg;
    ctg = s.cost + gamma * ctg;
    s.rtg = rtg;
    s.ctg = ctg;
  }
  return {trajectory.user_id, std::move(steps), trajectory.lambda};
}

std::vector<Trajectory> augment_lambda(std::span<const Trajectory> trajectories, int lambda_copies,
                                       Rng& rng) {
  if (lambda_copies < 1) throw std::invalid_argument("augment_lambda: lambda_copies must be >= 1");
  std::vector<Trajectory> out;
  out.reserve(trajectories.size() * static_cast<std::size_t>(lambda_copies));
  for (const auto& tr : trajectories)
    for (int c = 0; c < lambda_copies; ++c) out.push_back({tr.user_id, tr.steps, uniform_open01(rng)});
  return out;
}

Normalizer fit_normalizer(std::span<const Trajectory> trajectories) {
  std::size_t n = 0;
  std::size_t dim = 0;
  for (const auto& tr : trajectories) {
    if (tr.size() > 0) {
      dim = tr[0].state.size();
      break;
    }
  }
  Normalizer norm;
  norm.mu.assign(dim, 0.0);
  norm.sigma.assign(dim, 0.0);
  for (const auto& tr : trajectories)
    for (const auto& s : *tr.steps) {
      if (s.state.size() != dim) throw std::invalid_argument("fit_normalizer: ragged states");
      for (std::size_t j = 0; j < dim; ++j) norm.mu[j] += s.state[j];
      ++n;
    }
  if (n == 0) throw std::invalid_argument("fit_normalizer: no steps");
  for (double& m : norm.mu) m /= static_cast<double>(n);
  for (const auto& tr : trajectories)
    for (const auto& s : *tr.steps)
      for (std::size_t j = 0; j < dim; ++j) {
        const double d = s.state[j] - norm.mu[j];
        norm.sigma[j] += d * d;
      }
  for (double& s : norm.sigma) {
    s = std::sqrt(s / static_cast<double>(n));
    if (s < 1e-8) s = 1.0;
  }
  return norm;
}

void Normalizer::apply_in_place(std::span<double> state) const {
  if (state.size() != mu.size()) throw std::invalid_argument("normalizer: state dimension mismatch");
  for (std::size_t j = 0; j < state.size(); ++j) state[j] = (state[j] - mu[j]) / sigma[j];
}

std::vector<double> Normalizer::apply(std::span<const double> state) const {
  std::vector<double> out(state.begin(), state.end());
  apply_in_place(out);
  return out;
}

std::vector<double> apply_normalizer(const Normalizer& normalizer, std::span<const double> state) {
  return normalizer.apply(state);
}

std::pair<std::vector<Trajectory>, std::vector<Trajectory>> split_train_test(
    std::span<const Trajectory> trajectories, double train_fraction, Rng& rng) {
  std::vector<std::size_t> order(trajectories.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Fisher-Yates with our own uniform draw keeps the split library independent.
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(order[i - 1], order[std::min(j, i - 1)]);
  }
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(order.size())));
  std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::sort(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::pair<std::vector<Trajectory>, std::vector<Trajectory>> out;
  for (std::size_t k = 0; k < order.size(); ++k)
    (k < n_train ? out.first : out.second).push_back(trajectories[order[k]]);
  return out;
}

std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find('\t', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <class T>
T parse_field(std::string_view s, std::size_t line, const char* what) {
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
    throw FormatError(std::string("malformed ") + what + " '" + std::string(s) + "'", line);
  return v;
}

int parse_header(std::istream& in, const std::string& expected_version) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("missing header", 1);
  const auto fields = split_tabs(line);
  if (fields.size() != 2) throw FormatError("malformed header", 1);
  if (fields[0] != expected_version)
    throw FormatError("version mismatch: expected " + expected_version + ", found '" +
                          std::string(fields[0]) + "'",
                      1);
  constexpr std::string_view key = "feature_dim=";
  if (fields[1].substr(0, key.size()) != key) throw FormatError("header lacks feature_dim", 1);
  const int dim = parse_field<int>(fields[1].substr(key.size()), 1, "feature_dim");
  if (dim < 0) throw FormatError("negative feature_dim", 1);
  return dim;
}

void write_record_fields(std::ostream& out, std::int64_t user_id, std::int64_t time,
                         std::span<const double> features, int action, double cost, double reward) {
  out << user_id << '\t' << time;
  for (double f : features) out << '\t' << format_real(f);
  out << '\t' << action << '\t' << format_real(cost) << '\t' << format_real(reward);
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  return in;
}

}  // namespace

void write_dataset(const std::filesystem::path& path, std::span<const InteractionRecord> records,
                   int feature_dim) {
  if (feature_dim < 0) feature_dim = records.empty() ? 0 : static_cast<int>(records.front().features.size());
  auto out = open_out(path);
  out << kDatasetVersion << "\tfeature_dim=" << feature_dim << '\n';
  for (const auto& r : records) {
    if (static_cast<int>(r.features.size()) != feature_dim)
      throw std::invalid_argument("write_dataset: record feature dimension differs from header");
    write_record_fields(out, r.user_id, r.time, r.features, r.action, r.cost, r.reward);
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

std::vector<InteractionRecord> read_dataset(const std::filesystem::path& path) {
  auto in = open_in(path);
  const int dim = parse_header(in, kDatasetVersion);
  const std::size_t expected = static_cast<std::size_t>(dim) + 5;
  std::vector<InteractionRecord> out;
  std::string line;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const auto f = split_tabs(line);
    if (f.size() != expected)
      throw FormatError("expected " + std::to_string(expected) + " fields, found " + std::to_string(f.size()),
                        line_no);
    InteractionRecord r;
    r.user_id = parse_field<std::int64_t>(f[0], line_no, "user_id");
    r.time = parse_field<std::int64_t>(f[1], line_no, "time");
    r.features.resize(dim);
    for (int j = 0; j < dim; ++j) r.features[j] = parse_field<double>(f[2 + j], line_no, "feature");
    r.action = parse_field<int>(f[2 + dim], line_no, "action");
    r.cost = parse_field<double>(f[3 + dim], line_no, "cost");
    r.reward = parse_field<double>(f[4 + dim], line_no, "reward");
    out.push_back(std::move(r));
  }
  return out;
}

void write_trajectories(const std::filesystem::path& path, std::span<const Trajectory> trajectories) {
  int dim = 0;
  for (const auto& tr : trajectories)
    if (tr.size() > 0) {
      dim = static_cast<int>(tr[0].state.size());
      break;
    }
  auto out = open_out(path);
  out << kTrajectoryVersion << "\tfeature_dim=" << dim << '\n';
  for (const auto& tr : trajectories)
    for (const auto& s : *tr.steps) {
      write_record_fields(out, tr.user_id, s.t, s.state, s.action, s.cost, s.reward);
      out << '\t' << format_real(s.rtg) << '\t' << format_real(s.ctg) << '\t' << format_real(tr.lambda)
          << '\n';
    }
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

std::vector<Trajectory> read_trajectories(const std::filesystem::path& path) {
  auto in = open_in(path);
  const int dim = parse_header(in, kTrajectoryVersion);
  const std::size_t expected = static_cast<std::size_t>(dim) + 8;
  std::vector<Trajectory> out;
  std::shared_ptr<StepList> current;
  std::string line;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const auto f = split_tabs(line);
    if (f.size() != expected)
      throw FormatError("expected " + std::to_string(expected) + " fields, found " + std::to_string(f.size()),
                        line_no);
    TrajectoryStep s;
    const auto user = parse_field<std::int64_t>(f[0], line_no, "user_id");
    s.t = parse_field<int>(f[1], line_no, "time");
    s.state.resize(dim);
    for (int j = 0; j < dim; ++j) s.state[j] = parse_field<double>(f[2 + j], line_no, "feature");
    s.action = parse_field<int>(f[2 + dim], line_no, "action");
    s.cost = parse_field<double>(f[3 + dim], line_no, "cost");
    s.reward = parse_field<double>(f[4 + dim], line_no, "reward");
    s.rtg = parse_field<double>(f[5 + dim], line_no, "rtg");
    s.ctg = parse_field<double>(f[6 + dim], line_no, "ctg");
    const double lambda = parse_field<double>(f[7 + dim], line_no, "lambda");
    const bool continues = current && !out.empty() && out.back().user_id == user &&
                           out.back().lambda == lambda && current->back().t < s.t;
    if (!continues) {
      current = std::make_shared<StepList>();
      out.push_back({user, current, lambda});
    }
    current->push_back(std::move(s));
  }
  return out;
}

}  // namespace coupondt::data
