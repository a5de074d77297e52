#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numeric>

#include "coupondt/adt_model.hpp"
#include "test_util.hpp"

using namespace coupondt;
using namespace coupondt::adt;
using coupondt::testing::random_window;
using coupondt::testing::randomize;
using coupondt::testing::tiny_config;

namespace {

double batch_loss(const ModelParams& p, std::span<const TokenWindow> windows) {
  return ce_loss(forward_batch(p, windows), window_targets(windows));
}

double max_fd_relative_error(ModelConfig config, std::uint64_t seed) {
  ModelParams params(config);
  randomize(params, seed);
  Rng rng(seed + 1);
  std::vector<TokenWindow> batch{random_window(config, rng, 3), random_window(config, rng, 2, 1),
                                 random_window(config, rng, 1, 4)};
  std::vector<double> grad(params.size(), 0.0);
  loss_and_gradient(params, batch, grad);

  const double h = 1e-4;
  double worst = 0.0;
  auto values = params.values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double keep = values[i];
    values[i] = keep + h;
    const double up = batch_loss(params, batch);
    values[i] = keep - h;
    const double down = batch_loss(params, batch);
    values[i] = keep;
    const double fd = (up - down) / (2 * h);
    const double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-7});
    worst = std::max(worst, std::abs(fd - grad[i]) / denom);
  }
  return worst;
}

}  // namespace

TEST_CASE("gradient matches central finite differences for every variant") {
  for (Variant v : {Variant::full, Variant::no_constraint, Variant::no_rtg}) {
    CAPTURE(to_string(v));
    CHECK(max_fd_relative_error(tiny_config(v), 11) < 1e-4);
  }
  auto two_heads = tiny_config();
  two_heads.n_heads = 2;
  two_heads.n_layers = 2;
  CHECK(max_fd_relative_error(two_heads, 5) < 1e-4);
}

TEST_CASE("token counts per variant") {
  Rng rng(1);
  for (auto [v, per_step] : {std::pair{Variant::full, 4}, {Variant::no_constraint, 3}, {Variant::no_rtg, 3}}) {
    auto c = tiny_config(v);
    ModelParams p(c);
    randomize(p, 2);
    auto w = random_window(c, rng, 3);
    CHECK(c.tokens_per_step() == per_step);
    CHECK(embed_window(p, w).rows == per_step * 3);
    CHECK(forward(p, w).rows == 3);
    auto short_w = random_window(c, rng, 2);
    CHECK(embed_window(p, short_w).rows == per_step * 2);
  }
  ModelParams no_rtg(tiny_config(Variant::no_rtg));
  CHECK_FALSE(no_rtg.has_tensor("embed.rtg.weight"));
  CHECK_FALSE(no_rtg.has_tensor("embed.rtg.bias"));
  ModelParams no_c(tiny_config(Variant::no_constraint));
  CHECK_FALSE(no_c.has_tensor("embed.ctg.weight"));
  CHECK_FALSE(no_c.has_tensor("embed.lambda.weight"));
}

TEST_CASE("zero tables give zero embeddings") {
  auto c = tiny_config();
  ModelParams p(c);  // all zero apart from layer-norm gains
  Rng rng(3);
  const auto e = embed_window(p, random_window(c, rng, 3));
  for (double v : e.data) CHECK(v == 0.0);
}

TEST_CASE("lambda shifts every token by the table delta") {
  auto c = tiny_config();
  ModelParams p(c);
  randomize(p, 4);
  Rng rng(5);
  auto w = random_window(c, rng, 3);
  w.lambda = 0.1;  // bucket 0
  const auto a = embed_window(p, w);
  w.lambda = 0.8;  // bucket 3
  const auto b = embed_window(p, w);
  const auto table = p.data("embed.lambda.weight");
  const int D = c.embed_dim;
  for (int r = 0; r < a.rows; ++r)
    for (int j = 0; j < D; ++j) CHECK(b(r, j) - a(r, j) == doctest::Approx(table[3 * D + j] - table[j]).epsilon(1e-12));
  CHECK(lambda_bucket(0.0, 100) == 0);
  CHECK(lambda_bucket(0.999, 100) == 99);
  CHECK(lambda_bucket(1.0, 100) == 99);
  CHECK(lambda_bucket(0.25, 4) == 1);
}

TEST_CASE("logits are causal") {
  ModelConfig c = tiny_config();
  c.window_len = 10;
  c.max_timestep = 10;
  c.n_layers = 2;
  c.n_heads = 2;
  c.embed_dim = 8;
  for (Variant v : {Variant::full, Variant::no_constraint, Variant::no_rtg}) {
    c.variant = v;
    ModelParams p(c);
    randomize(p, 6);
    Rng rng(7);
    const auto base = random_window(c, rng, 10);
    const auto ref = forward(p, base);
    for (int t = 0; t < 10; ++t) {
      auto pert = base;
      for (int k = t + 1; k < 10; ++k) {
        auto& s = pert.steps[k];
        for (double& x : s.state) x += 3.0;
        s.rtg += 5.0;
        s.ctg -= 1.0;
        s.action = (s.action + 1) % c.n_actions;
      }
      pert.steps[t].action = (pert.steps[t].action + 2) % c.n_actions;  // same-step action follows the state
      const auto out = forward(p, pert);
      for (int r = 0; r <= t; ++r)
        for (int a = 0; a < c.n_actions; ++a) CHECK(out(r, a) == ref(r, a));
    }
    // Prefix windows give bit-identical logits for the shared steps.
    for (int len = 1; len < 10; ++len) {
      TokenWindow prefix = base;
      prefix.steps.resize(len);
      const auto out = forward(p, prefix);
      for (int r = 0; r < len; ++r)
        for (int a = 0; a < c.n_actions; ++a) CHECK(out(r, a) == ref(r, a));
    }
  }
}

TEST_CASE("batching does not change logits") {
  auto c = tiny_config();
  ModelParams p(c);
  randomize(p, 8);
  Rng rng(9);
  std::vector<TokenWindow> ws{random_window(c, rng, 3), random_window(c, rng, 1, 2), random_window(c, rng, 2)};
  const auto batch = forward_batch(p, ws);
  int row = 0;
  for (const auto& w : ws) {
    const auto single = forward(p, w);
    for (int r = 0; r < single.rows; ++r, ++row)
      for (int a = 0; a < c.n_actions; ++a) CHECK(batch(row, a) == single(r, a));
  }
}

TEST_CASE("padding contributes nothing") {
  auto c = tiny_config();
  ModelParams p(c);
  randomize(p, 10);
  Rng rng(11);
  auto w = random_window(c, rng, 2);
  std::vector<double> g1(p.size(), 0.0), g2(p.size(), 0.0);
  const auto r1 = loss_and_gradient(p, std::span<const TokenWindow>(&w, 1), g1);
  w.steps[0].state = {9.0, -9.0, 9.0};
  w.steps[0].rtg = 100.0;
  w.steps[0].ctg = -5.0;
  w.steps[0].action = 3;
  const auto r2 = loss_and_gradient(p, std::span<const TokenWindow>(&w, 1), g2);
  CHECK(r1.loss == r2.loss);
  CHECK(r1.positions == 2);
  CHECK(g1 == g2);
}

TEST_CASE("loss sanity") {
  Matrix uniform(3, 4);
  std::vector<int> acts{0, 3, 2};
  CHECK(std::abs(ce_loss(uniform, acts) - std::log(4.0)) < 1e-9);
  Matrix sat(1, 4);
  sat(0, 2) = 30.0;
  CHECK(ce_loss(sat, std::vector<int>{2}) < 1e-9);
  CHECK_THROWS_AS(ce_loss(uniform, std::vector<int>{0, 4, 1}), std::out_of_range);
  CHECK_THROWS_AS(ce_loss(uniform, std::vector<int>{0}), std::invalid_argument);

  // A zero head makes every logit equal.
  auto c = tiny_config();
  ModelParams p(c);
  randomize(p, 12);
  for (double& v : p.data("head.weight")) v = 0.0;
  for (double& v : p.data("head.bias")) v = 0.0;
  Rng rng(13);
  const auto logits = forward(p, random_window(c, rng, 3));
  for (int r = 0; r < logits.rows; ++r)
    for (int a = 1; a < c.n_actions; ++a) CHECK(logits(r, a) == logits(r, 0));

  Rng srng(14);
  std::normal_distribution<double> normal(0.0, 5.0);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> l(6);
    for (double& x : l) x = normal(srng);
    const auto s = softmax(l);
    CHECK(std::abs(std::accumulate(s.begin(), s.end(), 0.0) - 1.0) < 1e-6);
  }
}

TEST_CASE("greedy decoding tie-break and shift invariance") {
  CHECK(argmax_lowest(std::vector<double>{0.1, 0.9, 0.9, 0.2}) == 1);
  auto c = tiny_config();
  ModelParams p(c);
  randomize(p, 15);
  Rng rng(16);
  std::vector<HistoryStep> hist{{{0.1, 0.2, 0.3}, 2, 5.0, 1.0}};
  const std::vector<double> state{0.5, -0.5, 0.0};
  const int a = predict_action(p, hist, state, 4.0, 0.5, 0.3, DecodeMode::greedy, nullptr);
  for (double& v : p.data("head.bias")) v += 17.25;
  CHECK(predict_action(p, hist, state, 4.0, 0.5, 0.3, DecodeMode::greedy, nullptr) == a);

  for (double& v : p.data("head.weight")) v = 0.0;
  auto bias = p.data("head.bias");
  for (double& v : bias) v = 0.0;
  bias[0] = 5.0;
  for (int i = 0; i < 20; ++i) {
    std::vector<double> s{uniform01(rng), uniform01(rng), uniform01(rng)};
    CHECK(predict_action(p, hist, s, 4.0, 0.5, 0.3, DecodeMode::greedy, nullptr) == 0);
  }

  // Sampling follows the softmax.
  bias[0] = 0.0;
  bias[1] = std::log(3.0);
  Rng srng(17);
  int ones = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) ones += predict_action(p, hist, state, 4.0, 0.5, 0.3, DecodeMode::sample, &srng) == 1;
  CHECK(std::abs(ones / static_cast<double>(n) - 0.5) < 0.02);
}

TEST_CASE("make_window keeps the most recent steps") {
  auto c = tiny_config();
  std::vector<HistoryStep> hist;
  for (int t = 0; t < 4; ++t) hist.push_back({{double(t), 0.0, 0.0}, t % 4, 10.0 - t, 5.0 - t});
  const std::vector<double> state{9.0, 9.0, 9.0};
  auto w = make_window(c, hist, state, 2.0, 1.0, 0.4);
  REQUIRE(w.steps.size() == 3);
  CHECK(w.valid_steps() == 3);
  CHECK(w.steps[0].t == 2);
  CHECK(w.steps[0].state[0] == 2.0);
  CHECK(w.steps[2].t == 4);
  CHECK(w.steps[2].rtg == 2.0);
  CHECK(w.steps[2].ctg == 1.0);
  auto first = make_window(c, std::span<const HistoryStep>(), state, 2.0, 1.0, 0.4);
  CHECK(first.valid_steps() == 1);
  CHECK(first.steps[2].t == 0);
}

TEST_CASE("incremental decoding matches the full forward pass") {
  for (Variant v : {Variant::full, Variant::no_constraint, Variant::no_rtg}) {
    ModelConfig c = tiny_config(v);
    c.n_layers = 2;
    c.n_heads = 2;
    c.window_len = 3;
    c.max_timestep = 6;
    ModelParams p(c);
    randomize(p, 18);
    const int users = 5;
    DecodeSession session(p, users);
    Rng rng(19);
    std::vector<std::vector<HistoryStep>> hist(users);
    std::vector<int> prev(users, 0);
    std::vector<double> lambdas(users);
    for (double& l : lambdas) l = uniform01(rng);
    for (int t = 0; t < 6; ++t) {
      Matrix states(users, c.state_dim);
      std::vector<double> rtg(users), ctg(users);
      for (int u = 0; u < users; ++u) {
        for (int j = 0; j < c.state_dim; ++j) states(u, j) = uniform01(rng) - 0.5;
        rtg[u] = 10.0 * uniform01(rng);
        ctg[u] = 3.0 * uniform01(rng);
      }
      const Matrix& logits = session.step(ctg, rtg, states, prev, lambdas);
      for (int u = 0; u < users; ++u) {
        const auto w = make_window(c, hist[u], states.row(u), rtg[u], ctg[u], lambdas[u]);
        const auto ref = forward(p, w);
        for (int a = 0; a < c.n_actions; ++a) CHECK(logits(u, a) == ref(ref.rows - 1, a));
        const int act = static_cast<int>(uniform01(rng) * c.n_actions);
        hist[u].push_back({{states.row(u).begin(), states.row(u).end()}, act, rtg[u], ctg[u]});
        prev[u] = act;
      }
    }
  }
}

TEST_CASE("checkpoint round-trip and diagnostics") {
  auto c = tiny_config(Variant::no_rtg);
  Checkpoint ck{ModelParams(c), {{0.5, -1.0, 2.0}, {1.0, 2.0, 0.25}}, 42.5, 17.0, 1.75};
  randomize(ck.params, 20);
  round_to_storage(ck.params.values());
  const auto dir = coupondt::testing::temp_path("ckpt_a");
  std::filesystem::remove_all(dir);
  save_checkpoint(ck, dir);
  const auto back = load_checkpoint(dir, &c);
  CHECK(back.params == ck.params);
  CHECK(back.params.config() == c);
  CHECK(back.normalizer == ck.normalizer);
  CHECK(back.rtg_target == 42.5);
  CHECK(back.ctg_max == 17.0);
  CHECK(back.rtg_per_cost == 1.75);
  CHECK(std::filesystem::file_size(dir / "weights.bin") == ck.params.size() * 4);

  std::ifstream manifest_in(dir / "manifest");
  std::string manifest((std::istreambuf_iterator<char>(manifest_in)), {});
  CHECK(manifest.find("embed.rtg") == std::string::npos);
  CHECK(manifest.find("embed.ctg.weight") != std::string::npos);

  auto other = c;
  other.embed_dim = 16;
  CHECK_THROWS_WITH_AS(load_checkpoint(dir, &other), doctest::Contains("config mismatch"), CheckpointError);

  // Wrong shape for one tensor.
  const auto bad = coupondt::testing::temp_path("ckpt_bad");
  std::filesystem::remove_all(bad);
  std::filesystem::copy(dir, bad);
  {
    const auto pos = manifest.find("head.weight\t");
    std::string edited = manifest;
    const auto tab = edited.find('\t', pos);
    const auto comma = edited.find(',', tab);
    edited.replace(tab + 1, comma - tab - 1, "7");
    std::ofstream(bad / "manifest") << edited;
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(bad), doctest::Contains("head.weight"), CheckpointError);

  // Truncated blob.
  std::filesystem::remove_all(bad);
  std::filesystem::copy(dir, bad);
  std::filesystem::resize_file(bad / "weights.bin", ck.params.size() * 4 - 4);
  CHECK_THROWS_WITH_AS(load_checkpoint(bad), doctest::Contains("truncated"), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(coupondt::testing::temp_path("ckpt_missing")), CheckpointError);
}
