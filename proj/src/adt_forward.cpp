#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "coupondt/adt_model.hpp"
#include "kernels.hpp"

namespace coupondt::adt {

namespace k = kernels;

namespace {

struct TokenSpec {
  TokenKind kind;
  double scalar;         // ctg or rtg value
  const double* state;   // normalized state for state tokens
  int action;
  int t;
  int bucket;            // lambda bucket, ignored when the variant has none
};

void check_step(const ModelConfig& c, const WindowStep& s) {
  if (static_cast<int>(s.state.size()) != c.state_dim)
    throw std::invalid_argument("window step state has dimension " + std::to_string(s.state.size()) + ", model expects " +
                                std::to_string(c.state_dim));
  if (s.action < 0 || s.action >= c.n_actions)
    throw std::invalid_argument("window step action " + std::to_string(s.action) + " out of range");
  if (s.t < 0 || s.t >= c.max_timestep)
    throw std::invalid_argument("window step timestep " + std::to_string(s.t) + " outside [0, max_timestep)");
}

// Content embedding, then timestep embedding, then lambda embedding.
void embed_token(const ModelParams& p, const TokenSpec& tok, double* out) {
  const auto& c = p.config();
  const auto& L = p.layout();
  const int D = c.embed_dim;
  switch (tok.kind) {
    case TokenKind::ctg:
    case TokenKind::rtg: {
      const double* w = p.ptr(tok.kind == TokenKind::ctg ? L.ctg_w : L.rtg_w);
      const double* b = p.ptr(tok.kind == TokenKind::ctg ? L.ctg_b : L.rtg_b);
      for (int j = 0; j < D; ++j) out[j] = std::fma(tok.scalar, w[j], b[j]);
      break;
    }
    case TokenKind::state:
      k::matmul(tok.state, p.ptr(L.state_w), p.ptr(L.state_b), out, 1, c.state_dim, D);
      break;
    case TokenKind::action: {
      const double* w = p.ptr(L.action_w) + static_cast<std::size_t>(tok.action) * D;
      std::copy(w, w + D, out);
      break;
    }
  }
  const double* te = p.ptr(L.time_w) + static_cast<std::size_t>(tok.t) * D;
  for (int j = 0; j < D; ++j) out[j] += te[j];
  if (c.uses_lambda()) {
    const double* le = p.ptr(L.lambda_w) + static_cast<std::size_t>(tok.bucket) * D;
    for (int j = 0; j < D; ++j) out[j] += le[j];
  }
}

struct Seq {
  int offset;
  int length;
  std::size_t probs_offset;
};

struct Plan {
  int M = 0;
  std::vector<Seq> seqs;
  std::vector<TokenSpec> tokens;
  std::vector<int> pred_rows;
  std::vector<int> targets;
  std::size_t probs_size = 0;
};

Plan make_plan(const ModelConfig& c, std::span<const TokenWindow> windows) {
  Plan plan;
  const auto kinds = c.token_kinds();
  const int H = c.n_heads;
  for (const auto& w : windows) {
    if (static_cast<int>(w.steps.size()) > c.window_len)
      throw std::invalid_argument("window has " + std::to_string(w.steps.size()) + " steps, window_len is " +
                                  std::to_string(c.window_len));
    const int bucket = lambda_bucket(w.lambda, c.lambda_buckets);
    Seq seq{plan.M, 0, plan.probs_size};
    bool seen_valid = false;
    for (const auto& s : w.steps) {
      if (!s.valid) {
        if (seen_valid) throw std::invalid_argument("padding must precede all valid window steps");
        continue;
      }
      seen_valid = true;
      check_step(c, s);
      for (TokenKind kind : kinds) {
        double scalar = kind == TokenKind::ctg ? s.ctg : kind == TokenKind::rtg ? s.rtg : 0.0;
        if (kind == TokenKind::state) {
          plan.pred_rows.push_back(static_cast<int>(plan.tokens.size()));
          plan.targets.push_back(s.action);
        }
        plan.tokens.push_back({kind, scalar, s.state.data(), s.action, s.t, bucket});
      }
    }
    seq.length = static_cast<int>(plan.tokens.size()) - seq.offset;
    plan.M = static_cast<int>(plan.tokens.size());
    plan.probs_size += static_cast<std::size_t>(H) * seq.length * seq.length;
    plan.seqs.push_back(seq);
  }
  return plan;
}

struct LayerCache {
  std::vector<double> ln1, mean1, rstd1, qkv, probs, att, mid, ln2, mean2, rstd2, fc, tanh_fc, act;
};

struct Cache {
  std::vector<double> x0, mean0, rstd0;
  std::vector<std::vector<double>> h;  // h[l] enters block l; h[L] leaves the last block
  std::vector<LayerCache> layers;
  std::vector<double> z, lnf, meanf, rstdf;
  Matrix logits;
};

void run_forward(const ModelParams& p, const Plan& plan, Cache& cache) {
  const auto& c = p.config();
  const auto& L = p.layout();
  const int D = c.embed_dim;
  const int H = c.n_heads;
  const int M = plan.M;
  const int P = static_cast<int>(plan.pred_rows.size());
  const auto MD = static_cast<std::size_t>(M) * D;

  cache.x0.assign(MD, 0.0);
  for (int i = 0; i < M; ++i) embed_token(p, plan.tokens[i], cache.x0.data() + static_cast<std::size_t>(i) * D);
  cache.mean0.assign(M, 0.0);
  cache.rstd0.assign(M, 0.0);
  cache.h.resize(static_cast<std::size_t>(c.n_layers) + 1);
  cache.h[0].assign(MD, 0.0);
  k::layernorm(cache.x0.data(), p.ptr(L.ln0_g), p.ptr(L.ln0_b), cache.h[0].data(), cache.mean0.data(),
               cache.rstd0.data(), M, D);

  cache.layers.resize(c.n_layers);
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& b = L.blocks[l];
    auto& lc = cache.layers[l];
    const auto& h = cache.h[l];
    lc.ln1.assign(MD, 0.0);
    lc.mean1.assign(M, 0.0);
    lc.rstd1.assign(M, 0.0);
    k::layernorm(h.data(), p.ptr(b.ln1_g), p.ptr(b.ln1_b), lc.ln1.data(), lc.mean1.data(), lc.rstd1.data(), M, D);
    lc.qkv.assign(MD * 3, 0.0);
    k::matmul(lc.ln1.data(), p.ptr(b.qkv_w), p.ptr(b.qkv_b), lc.qkv.data(), M, D, 3 * D);
    lc.att.assign(MD, 0.0);
    lc.probs.assign(plan.probs_size, 0.0);
    for (const auto& s : plan.seqs) {
      const double* base = lc.qkv.data() + static_cast<std::size_t>(s.offset) * 3 * D;
      for (int i = 0; i < s.length; ++i) {
        double* probs = lc.probs.data() + s.probs_offset + static_cast<std::size_t>(i) * H * s.length;
        k::attend_row(base + static_cast<std::size_t>(i) * 3 * D, base + D, base + 2 * D, 3 * D, i + 1, D, H,
                      lc.att.data() + static_cast<std::size_t>(s.offset + i) * D, probs);
      }
    }
    lc.mid.assign(MD, 0.0);
    k::matmul(lc.att.data(), p.ptr(b.out_w), p.ptr(b.out_b), lc.mid.data(), M, D, D);
    for (std::size_t i = 0; i < MD; ++i) lc.mid[i] = h[i] + lc.mid[i];
    lc.ln2.assign(MD, 0.0);
    lc.mean2.assign(M, 0.0);
    lc.rstd2.assign(M, 0.0);
    k::layernorm(lc.mid.data(), p.ptr(b.ln2_g), p.ptr(b.ln2_b), lc.ln2.data(), lc.mean2.data(), lc.rstd2.data(), M,
                 D);
    lc.fc.assign(MD * 4, 0.0);
    k::matmul(lc.ln2.data(), p.ptr(b.fc_w), p.ptr(b.fc_b), lc.fc.data(), M, D, 4 * D);
    lc.act.assign(MD * 4, 0.0);
    lc.tanh_fc.resize(MD * 4);
    k::gelu(lc.fc.data(), lc.act.data(), MD * 4, lc.tanh_fc.data());
    auto& out = cache.h[l + 1];
    out.assign(MD, 0.0);
    k::matmul(lc.act.data(), p.ptr(b.proj_w), p.ptr(b.proj_b), out.data(), M, 4 * D, D);
    for (std::size_t i = 0; i < MD; ++i) out[i] = lc.mid[i] + out[i];
  }

  const auto& top = cache.h[c.n_layers];
  cache.z.assign(static_cast<std::size_t>(P) * D, 0.0);
  for (int r = 0; r < P; ++r)
    std::copy_n(top.data() + static_cast<std::size_t>(plan.pred_rows[r]) * D, D,
                cache.z.data() + static_cast<std::size_t>(r) * D);
  cache.lnf.assign(cache.z.size(), 0.0);
  cache.meanf.assign(P, 0.0);
  cache.rstdf.assign(P, 0.0);
  k::layernorm(cache.z.data(), p.ptr(L.lnf_g), p.ptr(L.lnf_b), cache.lnf.data(), cache.meanf.data(),
               cache.rstdf.data(), P, D);
  cache.logits = Matrix(P, c.n_actions);
  k::matmul(cache.lnf.data(), p.ptr(L.head_w), p.ptr(L.head_b), cache.logits.data.data(), P, D, c.n_actions);
  for (double v : cache.logits.data)
    if (!std::isfinite(v)) throw NumericError("non-finite activation in forward pass");
}

double log_sum_exp(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

}  // namespace

Matrix embed_window(const ModelParams& params, const TokenWindow& window) {
  const Plan plan = make_plan(params.config(), std::span<const TokenWindow>(&window, 1));
  Matrix out(plan.M, params.config().embed_dim);
  for (int i = 0; i < plan.M; ++i) embed_token(params, plan.tokens[i], out.row(i).data());
  return out;
}

Matrix forward_batch(const ModelParams& params, std::span<const TokenWindow> windows) {
  const Plan plan = make_plan(params.config(), windows);
  Cache cache;
  run_forward(params, plan, cache);
  return std::move(cache.logits);
}

Matrix forward(const ModelParams& params, const TokenWindow& window) {
  return forward_batch(params, std::span<const TokenWindow>(&window, 1));
}

std::vector<int> window_targets(std::span<const TokenWindow> windows) {
  std::vector<int> out;
  for (const auto& w : windows)
    for (const auto& s : w.steps)
      if (s.valid) out.push_back(s.action);
  return out;
}

std::vector<double> softmax(std::span<const double> logits) {
  const double lse = log_sum_exp(logits);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = std::exp(logits[i] - lse);
  return out;
}

int argmax_lowest(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("argmax of an empty range");
  int best = 0;
  for (int i = 1; i < static_cast<int>(values.size()); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

double ce_loss(const Matrix& logits, std::span<const int> actions) {
  if (static_cast<int>(actions.size()) != logits.rows)
    throw std::invalid_argument("ce_loss: need one observed action per prediction row");
  if (logits.rows == 0) return 0.0;
  double total = 0.0;
  for (int r = 0; r < logits.rows; ++r) {
    const int a = actions[r];
    if (a < 0 || a >= logits.cols)
      throw std::out_of_range("ce_loss: action id " + std::to_string(a) + " out of range");
    total += log_sum_exp(logits.row(r)) - logits(r, a);
  }
  return total / logits.rows;
}

LossReport loss_and_gradient(const ModelParams& params, std::span<const TokenWindow> windows,
                             std::span<double> grad) {
  if (grad.size() != params.size()) throw std::invalid_argument("gradient buffer size mismatch");
  const auto& c = params.config();
  const auto& L = params.layout();
  const int D = c.embed_dim;
  const int H = c.n_heads;
  const int A = c.n_actions;
  const Plan plan = make_plan(c, windows);
  const int M = plan.M;
  const int P = static_cast<int>(plan.pred_rows.size());
  LossReport report;
  report.positions = P;
  if (P == 0) return report;

  thread_local Cache cache;  // buffers are reused across training steps
  run_forward(params, plan, cache);
  const auto MD = static_cast<std::size_t>(M) * D;
  double* g = grad.data();

  Matrix d_logits(P, A);
  for (int r = 0; r < P; ++r) {
    const auto row = cache.logits.row(r);
    const double lse = log_sum_exp(row);
    const int target = plan.targets[r];
    report.loss += lse - row[target];
    if (argmax_lowest(row) == target) ++report.correct;
    for (int a = 0; a < A; ++a) d_logits(r, a) = (std::exp(row[a] - lse) - (a == target ? 1.0 : 0.0)) / P;
  }
  report.loss /= P;

  std::vector<double> d_lnf(static_cast<std::size_t>(P) * D, 0.0);
  k::matmul_backward(cache.lnf.data(), params.ptr(L.head_w), d_logits.data.data(), d_lnf.data(), g + L.head_w,
                     g + L.head_b, P, D, A);
  std::vector<double> d_z(static_cast<std::size_t>(P) * D, 0.0);
  k::layernorm_backward(cache.z.data(), params.ptr(L.lnf_g), cache.meanf.data(), cache.rstdf.data(), d_lnf.data(),
                        d_z.data(), g + L.lnf_g, g + L.lnf_b, P, D);
  std::vector<double> d_h(MD, 0.0);
  for (int r = 0; r < P; ++r)
    std::copy_n(d_z.data() + static_cast<std::size_t>(r) * D, D,
                d_h.data() + static_cast<std::size_t>(plan.pred_rows[r]) * D);

  thread_local std::vector<double> d_act, d_fc, d_ln2, d_att, d_qkv, d_ln1;
  for (int l = c.n_layers - 1; l >= 0; --l) {
    const auto& b = L.blocks[l];
    const auto& lc = cache.layers[l];

    d_act.assign(MD * 4, 0.0);
    k::matmul_backward(lc.act.data(), params.ptr(b.proj_w), d_h.data(), d_act.data(), g + b.proj_w, g + b.proj_b, M,
                       4 * D, D);
    d_fc.assign(MD * 4, 0.0);
    k::gelu_backward(lc.fc.data(), lc.tanh_fc.data(), d_act.data(), d_fc.data(), MD * 4);
    d_ln2.assign(MD, 0.0);
    k::matmul_backward(lc.ln2.data(), params.ptr(b.fc_w), d_fc.data(), d_ln2.data(), g + b.fc_w, g + b.fc_b, M, D,
                       4 * D);
    k::layernorm_backward(lc.mid.data(), params.ptr(b.ln2_g), lc.mean2.data(), lc.rstd2.data(), d_ln2.data(),
                          d_h.data(), g + b.ln2_g, g + b.ln2_b, M, D);

    d_att.assign(MD, 0.0);
    k::matmul_backward(lc.att.data(), params.ptr(b.out_w), d_h.data(), d_att.data(), g + b.out_w, g + b.out_b, M, D,
                       D);
    d_qkv.assign(MD * 3, 0.0);
    const int dh = D / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> dp;
    for (const auto& s : plan.seqs) {
      const std::size_t base = static_cast<std::size_t>(s.offset) * 3 * D;
      const double* qkv = lc.qkv.data() + base;
      double* dqkv = d_qkv.data() + base;
      for (int i = 0; i < s.length; ++i) {
        const double* probs = lc.probs.data() + s.probs_offset + static_cast<std::size_t>(i) * H * s.length;
        const double* dy = d_att.data() + static_cast<std::size_t>(s.offset + i) * D;
        const int n = i + 1;
        dp.assign(static_cast<std::size_t>(n), 0.0);
        for (int h = 0; h < H; ++h) {
          const double* ph = probs + static_cast<std::size_t>(h) * n;
          const double* dyh = dy + h * dh;
          double dot = 0.0;
          for (int j = 0; j < n; ++j) {
            const double* vj = qkv + static_cast<std::size_t>(j) * 3 * D + 2 * D + h * dh;
            double* dvj = dqkv + static_cast<std::size_t>(j) * 3 * D + 2 * D + h * dh;
            double acc = 0.0;
            for (int cc = 0; cc < dh; ++cc) {
              acc += dyh[cc] * vj[cc];
              dvj[cc] += ph[j] * dyh[cc];
            }
            dp[j] = acc;
            dot += ph[j] * acc;
          }
          const double* qi = qkv + static_cast<std::size_t>(i) * 3 * D + h * dh;
          double* dqi = dqkv + static_cast<std::size_t>(i) * 3 * D + h * dh;
          for (int j = 0; j < n; ++j) {
            const double ds = ph[j] * (dp[j] - dot) * scale;
            const double* kj = qkv + static_cast<std::size_t>(j) * 3 * D + D + h * dh;
            double* dkj = dqkv + static_cast<std::size_t>(j) * 3 * D + D + h * dh;
            for (int cc = 0; cc < dh; ++cc) {
              dqi[cc] += ds * kj[cc];
              dkj[cc] += ds * qi[cc];
            }
          }
        }
      }
    }
    d_ln1.assign(MD, 0.0);
    k::matmul_backward(lc.ln1.data(), params.ptr(b.qkv_w), d_qkv.data(), d_ln1.data(), g + b.qkv_w, g + b.qkv_b, M, D,
                       3 * D);
    k::layernorm_backward(cache.h[l].data(), params.ptr(b.ln1_g), lc.mean1.data(), lc.rstd1.data(), d_ln1.data(),
                          d_h.data(), g + b.ln1_g, g + b.ln1_b, M, D);
  }

  std::vector<double> d_x0(MD, 0.0);
  k::layernorm_backward(cache.x0.data(), params.ptr(L.ln0_g), cache.mean0.data(), cache.rstd0.data(), d_h.data(),
                        d_x0.data(), g + L.ln0_g, g + L.ln0_b, M, D);

  for (int i = 0; i < M; ++i) {
    const auto& tok = plan.tokens[i];
    const double* dx = d_x0.data() + static_cast<std::size_t>(i) * D;
    double* dt = g + L.time_w + static_cast<std::size_t>(tok.t) * D;
    for (int j = 0; j < D; ++j) dt[j] += dx[j];
    if (c.uses_lambda()) {
      double* dl = g + L.lambda_w + static_cast<std::size_t>(tok.bucket) * D;
      for (int j = 0; j < D; ++j) dl[j] += dx[j];
    }
    switch (tok.kind) {
      case TokenKind::ctg:
      case TokenKind::rtg: {
        double* dw = g + (tok.kind == TokenKind::ctg ? L.ctg_w : L.rtg_w);
        double* db = g + (tok.kind == TokenKind::ctg ? L.ctg_b : L.rtg_b);
        for (int j = 0; j < D; ++j) {
          dw[j] += tok.scalar * dx[j];
          db[j] += dx[j];
        }
        break;
      }
      case TokenKind::state: {
        double* dw = g + L.state_w;
        for (int s = 0; s < c.state_dim; ++s)
          for (int j = 0; j < D; ++j) dw[static_cast<std::size_t>(s) * D + j] += tok.state[s] * dx[j];
        double* db = g + L.state_b;
        for (int j = 0; j < D; ++j) db[j] += dx[j];
        break;
      }
      case TokenKind::action: {
        double* dw = g + L.action_w + static_cast<std::size_t>(tok.action) * D;
        for (int j = 0; j < D; ++j) dw[j] += dx[j];
        break;
      }
    }
  }
  return report;
}

// --- decoding ---------------------------------------------------------------

TokenWindow make_window(const ModelConfig& config, std::span<const HistoryStep> history,
                        std::span<const double> state, double rtg_target, double ctg_target, double lambda) {
  const int total = static_cast<int>(history.size()) + 1;
  const int keep = std::min(total, config.window_len);
  TokenWindow w;
  w.lambda = lambda;
  w.steps.resize(static_cast<std::size_t>(config.window_len));
  const int pad = config.window_len - keep;
  for (int i = 0; i < pad; ++i) {
    w.steps[i].valid = false;
    w.steps[i].state.assign(static_cast<std::size_t>(config.state_dim), 0.0);
  }
  for (int k = 0; k < keep; ++k) {
    const int t = total - keep + k;
    auto& s = w.steps[static_cast<std::size_t>(pad + k)];
    s.t = t;
    if (t < total - 1) {
      const auto& h = history[static_cast<std::size_t>(t)];
      s.state = h.state;
      s.action = h.action;
      s.rtg = h.rtg;
      s.ctg = h.ctg;
    } else {
      s.state.assign(state.begin(), state.end());
      s.action = 0;
      s.rtg = rtg_target;
      s.ctg = ctg_target;
    }
  }
  return w;
}

int predict_action(const ModelParams& params, std::span<const HistoryStep> history, std::span<const double> state,
                   double rtg_target, double ctg_target, double lambda, DecodeMode mode, Rng* rng) {
  const TokenWindow w = make_window(params.config(), history, state, rtg_target, ctg_target, lambda);
  const Matrix logits = forward(params, w);
  const auto last = logits.row(logits.rows - 1);
  if (mode == DecodeMode::greedy) return argmax_lowest(last);
  if (!rng) throw std::invalid_argument("predict_action: sampling mode needs a random stream");
  const auto probs = softmax(last);
  const double u = uniform01(*rng);
  double acc = 0.0;
  for (int a = 0; a < static_cast<int>(probs.size()); ++a) {
    acc += probs[a];
    if (u < acc) return a;
  }
  return static_cast<int>(probs.size()) - 1;
}

DecodeSession::DecodeSession(const ModelParams& params, int n_users) : params_(&params), n_users_(n_users) {
  const auto& c = params.config();
  const std::size_t per_layer =
      static_cast<std::size_t>(n_users) * c.tokens_per_step() * c.window_len * c.embed_dim;
  keys_.assign(static_cast<std::size_t>(c.n_layers), std::vector<double>(per_layer, 0.0));
  values_.assign(static_cast<std::size_t>(c.n_layers), std::vector<double>(per_layer, 0.0));
  history_.assign(static_cast<std::size_t>(n_users), {});
}

const Matrix& DecodeSession::step(std::span<const double> ctg_targets, std::span<const double> rtg_targets,
                                  const Matrix& states, std::span<const int> prev_actions,
                                  std::span<const double> lambdas) {
  const ModelParams& p = *params_;
  const auto& c = p.config();
  const auto& L = p.layout();
  const int N = n_users_;
  const int D = c.embed_dim;
  const int H = c.n_heads;
  const int t = round_;
  if (states.rows != N || states.cols != c.state_dim || static_cast<int>(ctg_targets.size()) != N ||
      static_cast<int>(rtg_targets.size()) != N || static_cast<int>(lambdas.size()) != N ||
      (t > 0 && static_cast<int>(prev_actions.size()) != N))
    throw std::invalid_argument("decode step: input sizes do not match the session");
  if (t >= c.max_timestep) throw std::invalid_argument("decode step: episode exceeds max_timestep");

  for (int u = 0; u < N; ++u) {
    auto& hist = history_[u];
    if (t > 0) {
      if (prev_actions[u] < 0 || prev_actions[u] >= c.n_actions)
        throw std::invalid_argument("decode step: previous action out of range");
      hist.back().action = prev_actions[u];
    }
    const auto s = states.row(u);
    hist.push_back({{s.begin(), s.end()}, 0, rtg_targets[u], ctg_targets[u]});
  }

  if (t >= c.window_len) {
    step_full_window(lambdas);
    ++round_;
    return logits_;
  }

  // New tokens this round: the previous action, then this round's tokens up
  // to and including the state.
  std::vector<TokenKind> kinds;
  if (t > 0) kinds.push_back(TokenKind::action);
  for (TokenKind kind : c.token_kinds())
    if (kind != TokenKind::action) kinds.push_back(kind);
  const int n_new = static_cast<int>(kinds.size());
  const int M = N * n_new;
  const auto MD = static_cast<std::size_t>(M) * D;
  const int max_tokens = c.tokens_per_step() * c.window_len;

  std::vector<double> x0(MD), h(MD);
  for (int u = 0; u < N; ++u) {
    const int bucket = lambda_bucket(lambdas[u], c.lambda_buckets);
    for (int r = 0; r < n_new; ++r) {
      const TokenKind kind = kinds[r];
      TokenSpec tok{kind, 0.0, states.row(u).data(), 0, t, bucket};
      if (kind == TokenKind::action) {
        tok.action = prev_actions[u];
        tok.t = t - 1;
      } else if (kind == TokenKind::ctg) {
        tok.scalar = ctg_targets[u];
      } else if (kind == TokenKind::rtg) {
        tok.scalar = rtg_targets[u];
      }
      embed_token(p, tok, x0.data() + (static_cast<std::size_t>(u) * n_new + r) * D);
    }
  }
  k::layernorm(x0.data(), p.ptr(L.ln0_g), p.ptr(L.ln0_b), h.data(), nullptr, nullptr, M, D);

  std::vector<double> a(MD), qkv(MD * 3), att(MD), mid(MD), fc(MD * 4), act(MD * 4);
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& b = L.blocks[l];
    k::layernorm(h.data(), p.ptr(b.ln1_g), p.ptr(b.ln1_b), a.data(), nullptr, nullptr, M, D);
    k::matmul(a.data(), p.ptr(b.qkv_w), p.ptr(b.qkv_b), qkv.data(), M, D, 3 * D);
    for (int u = 0; u < N; ++u) {
      double* keys = keys_[l].data() + static_cast<std::size_t>(u) * max_tokens * D;
      double* vals = values_[l].data() + static_cast<std::size_t>(u) * max_tokens * D;
      for (int r = 0; r < n_new; ++r) {
        const double* row = qkv.data() + (static_cast<std::size_t>(u) * n_new + r) * 3 * D;
        const int pos = cached_tokens_ + r;
        std::copy_n(row + D, D, keys + static_cast<std::size_t>(pos) * D);
        std::copy_n(row + 2 * D, D, vals + static_cast<std::size_t>(pos) * D);
      }
      for (int r = 0; r < n_new; ++r) {
        const std::size_t idx = static_cast<std::size_t>(u) * n_new + r;
        k::attend_row(qkv.data() + idx * 3 * D, keys, vals, D, cached_tokens_ + r + 1, D, H, att.data() + idx * D,
                      nullptr);
      }
    }
    k::matmul(att.data(), p.ptr(b.out_w), p.ptr(b.out_b), mid.data(), M, D, D);
    for (std::size_t i = 0; i < MD; ++i) mid[i] = h[i] + mid[i];
    k::layernorm(mid.data(), p.ptr(b.ln2_g), p.ptr(b.ln2_b), a.data(), nullptr, nullptr, M, D);
    k::matmul(a.data(), p.ptr(b.fc_w), p.ptr(b.fc_b), fc.data(), M, D, 4 * D);
    k::gelu(fc.data(), act.data(), MD * 4);
    k::matmul(act.data(), p.ptr(b.proj_w), p.ptr(b.proj_b), h.data(), M, 4 * D, D);
    for (std::size_t i = 0; i < MD; ++i) h[i] = mid[i] + h[i];
  }
  cached_tokens_ += n_new;

  std::vector<double> z(static_cast<std::size_t>(N) * D), zn(static_cast<std::size_t>(N) * D);
  for (int u = 0; u < N; ++u)
    std::copy_n(h.data() + (static_cast<std::size_t>(u) * n_new + n_new - 1) * D, D,
                z.data() + static_cast<std::size_t>(u) * D);
  k::layernorm(z.data(), p.ptr(L.lnf_g), p.ptr(L.lnf_b), zn.data(), nullptr, nullptr, N, D);
  logits_ = Matrix(N, c.n_actions);
  k::matmul(zn.data(), p.ptr(L.head_w), p.ptr(L.head_b), logits_.data.data(), N, D, c.n_actions);
  for (double v : logits_.data)
    if (!std::isfinite(v)) throw NumericError("non-finite activation in decode step");
  ++round_;
  return logits_;
}

void DecodeSession::step_full_window(std::span<const double> lambdas) {
  const auto& c = params_->config();
  std::vector<TokenWindow> windows;
  windows.reserve(static_cast<std::size_t>(n_users_));
  for (int u = 0; u < n_users_; ++u) {
    const auto& hist = history_[u];
    const auto& cur = hist.back();
    windows.push_back(make_window(c, std::span<const HistoryStep>(hist.data(), hist.size() - 1), cur.state, cur.rtg,
                                  cur.ctg, lambdas[u]));
  }
  const Matrix all = forward_batch(*params_, windows);
  logits_ = Matrix(n_users_, c.n_actions);
  int row = -1;
  for (int u = 0; u < n_users_; ++u) {
    row += windows[u].valid_steps();
    std::copy_n(all.row(row).data(), c.n_actions, logits_.row(u).data());
  }
}

}  // namespace coupondt::adt
