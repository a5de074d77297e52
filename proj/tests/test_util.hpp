#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "coupondt/adt_model.hpp"
#include "coupondt/rng.hpp"

namespace coupondt::testing {

inline adt::ModelConfig tiny_config(adt::Variant variant = adt::Variant::full) {
  adt::ModelConfig c;
  c.state_dim = 3;
  c.n_actions = 4;
  c.embed_dim = 8;
  c.n_layers = 1;
  c.n_heads = 1;
  c.window_len = 3;
  c.max_timestep = 5;
  c.lambda_buckets = 4;
  c.variant = variant;
  return c;
}

// Every parameter drawn N(0, std^2); layer-norm gains centred at 1.
inline void randomize(adt::ModelParams& params, std::uint64_t seed, double std = 0.5) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, std);
  for (const auto& t : params.tensors()) {
    auto d = params.data(t.name);
    const double base = t.name.ends_with(".gain") ? 1.0 : 0.0;
    for (double& v : d) v = base + normal(rng);
  }
}

inline adt::TokenWindow random_window(const adt::ModelConfig& c, Rng& rng, int valid, int first_t = 0) {
  std::normal_distribution<double> normal(0.0, 1.0);
  adt::TokenWindow w;
  w.lambda = uniform_open01(rng);
  w.steps.resize(static_cast<std::size_t>(c.window_len));
  const int pad = c.window_len - valid;
  for (int i = 0; i < c.window_len; ++i) {
    auto& s = w.steps[i];
    s.state.resize(static_cast<std::size_t>(c.state_dim));
    for (double& x : s.state) x = normal(rng);
    s.valid = i >= pad;
    s.t = s.valid ? first_t + (i - pad) : 0;
    s.action = static_cast<int>(uniform01(rng) * c.n_actions);
    s.rtg = 3.0 * uniform01(rng);
    s.ctg = 2.0 * uniform01(rng);
  }
  return w;
}

inline std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "coupondt_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace coupondt::testing
