#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "coupondt/datapipe.hpp"
#include "coupondt/rng.hpp"

namespace coupondt::adt {

enum class Variant { full, no_constraint, no_rtg };

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view s);

enum class TokenKind { ctg, rtg, state, action };

struct ModelConfig {
  int state_dim = 5;
  int n_actions = 5;
  int embed_dim = 64;
  int n_layers = 2;
  int n_heads = 4;
  int window_len = 10;  // timesteps of context
  int max_timestep = 10;
  int lambda_buckets = 100;
  Variant variant = Variant::full;

  void validate() const;
  bool uses_ctg() const { return variant != Variant::no_constraint; }
  bool uses_rtg() const { return variant != Variant::no_rtg; }
  bool uses_lambda() const { return variant != Variant::no_constraint; }
  /// Token kinds emitted per timestep, in sequence order.
  std::vector<TokenKind> token_kinds() const;
  int tokens_per_step() const { return static_cast<int>(token_kinds().size()); }
  /// Offset of the state token inside a timestep; logits are read there.
  int prediction_offset() const { return tokens_per_step() - 2; }

  bool operator==(const ModelConfig&) const = default;
};

class NumericError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Row-major dense matrix.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}
  double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  std::span<double> row(int r) { return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)}; }
  std::span<const double> row(int r) const {
    return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
  }
};

struct TensorInfo {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  bool decay = false;  // subject to decoupled weight decay

  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

inline constexpr std::size_t kAbsent = static_cast<std::size_t>(-1);

struct BlockLayout {
  std::size_t ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b;
  std::size_t ln2_g, ln2_b, fc_w, fc_b, proj_w, proj_b;
};

/// Flat-buffer offsets of every tensor; kAbsent for tensors a variant lacks.
struct Layout {
  std::size_t state_w = kAbsent, state_b = kAbsent, action_w = kAbsent;
  std::size_t rtg_w = kAbsent, rtg_b = kAbsent, ctg_w = kAbsent, ctg_b = kAbsent;
  std::size_t time_w = kAbsent, lambda_w = kAbsent, ln0_g = kAbsent, ln0_b = kAbsent;
  std::vector<BlockLayout> blocks;
  std::size_t lnf_g = kAbsent, lnf_b = kAbsent, head_w = kAbsent, head_b = kAbsent;
  std::size_t total = 0;
};

/// All trainable parameters in one flat buffer with named tensor views.
class ModelParams {
 public:
  /// Zero-filled parameters with layer-norm gains at 1.
  explicit ModelParams(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const Layout& layout() const { return layout_; }
  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  const TensorInfo& tensor(std::string_view name) const;
  bool has_tensor(std::string_view name) const;

  std::size_t size() const { return values_.size(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::span<double> data(std::string_view name);
  std::span<const double> data(std::string_view name) const;
  const double* ptr(std::size_t offset) const { return values_.data() + offset; }

  bool operator==(const ModelParams& other) const {
    return config_ == other.config_ && values_ == other.values_;
  }

 private:
  ModelConfig config_;
  Layout layout_;
  std::vector<TensorInfo> tensors_;
  std::vector<double> values_;
};

/// Stored parameters are kept exactly representable in 32-bit floats so that
/// checkpoints round-trip without loss.
void round_to_storage(std::span<double> values);

/// Truncated-normal (std 0.02, cut at 2 std) weights, zero biases, unit
/// layer-norm gains.
void init_params(ModelParams& params, Rng& rng);

int lambda_bucket(double lambda, int buckets);

struct WindowStep {
  double ctg = 0.0;
  double rtg = 0.0;
  std::vector<double> state;  // normalized
  int action = 0;
  int t = 0;
  bool valid = true;
};

/// One context window. Padding slots (valid == false) sit at the front and
/// take no part in attention, loss or gradients.
struct TokenWindow {
  std::vector<WindowStep> steps;
  double lambda = 0.5;

  int valid_steps() const;
};

/// Token embeddings before the embedding layer norm, one row per token.
Matrix embed_window(const ModelParams& params, const TokenWindow& window);

/// Action logits, one row per valid timestep.
Matrix forward(const ModelParams& params, const TokenWindow& window);
Matrix forward_batch(const ModelParams& params, std::span<const TokenWindow> windows);

/// Mean negative log-likelihood of `actions` under row-wise softmax.
double ce_loss(const Matrix& logits, std::span<const int> actions);

std::vector<double> softmax(std::span<const double> logits);
int argmax_lowest(std::span<const double> values);

struct LossReport {
  double loss = 0.0;
  int positions = 0;
  int correct = 0;  // greedy predictions matching the logged action
};

/// Cross-entropy over all valid positions of the batch and its gradient with
/// respect to every parameter (accumulated into `grad`, which must be zeroed
/// by the caller).
LossReport loss_and_gradient(const ModelParams& params, std::span<const TokenWindow> windows,
                             std::span<double> grad);

/// Observed actions at every valid position of the batch, in logit row order.
std::vector<int> window_targets(std::span<const TokenWindow> windows);

struct HistoryStep {
  std::vector<double> state;  // normalized
  int action = 0;
  double rtg = 0.0;
  double ctg = 0.0;
};

enum class DecodeMode { greedy, sample };

/// Builds the context window for the next decision; older steps beyond
/// window_len are dropped from the left.
TokenWindow make_window(const ModelConfig& config, std::span<const HistoryStep> history,
                        std::span<const double> state, double rtg_target, double ctg_target,
                        double lambda);

int predict_action(const ModelParams& params, std::span<const HistoryStep> history,
                   std::span<const double> state, double rtg_target, double ctg_target, double lambda,
                   DecodeMode mode = DecodeMode::greedy, Rng* rng = nullptr);

/// Batched incremental decoder: one episode per user, advanced one round at a
/// time for all users with cached attention keys and values. Produces the same
/// logits as `forward` on the corresponding windows while the episode fits in
/// the window.
class DecodeSession {
 public:
  DecodeSession(const ModelParams& params, int n_users);

  /// Logits for round `t` of every user given this round's targets and
  /// normalized states. `prev_actions` holds the actions taken at t - 1 and is
  /// ignored for t == 0.
  const Matrix& step(std::span<const double> ctg_targets, std::span<const double> rtg_targets,
                     const Matrix& states, std::span<const int> prev_actions, std::span<const double> lambdas);
  int round() const { return round_; }

 private:
  void step_full_window(std::span<const double> lambdas);

  const ModelParams* params_;
  int n_users_;
  int round_ = 0;
  int cached_tokens_ = 0;
  // Per layer: [user][token][embed] keys and values.
  std::vector<std::vector<double>> keys_;
  std::vector<std::vector<double>> values_;
  // Full history, used once the episode outgrows the window.
  std::vector<std::vector<HistoryStep>> history_;
  Matrix logits_;
};

struct Checkpoint {
  ModelParams params;
  data::Normalizer normalizer;
  double rtg_target = 0.0;  // initial return-to-go used for decoding
  double ctg_max = 0.0;     // largest initial cost-to-go seen in training
  /// Total initial return-to-go over total initial cost-to-go in training;
  /// lets the return target grow with a large cost target. 0 disables that.
  double rtg_per_cost = 0.0;
};

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& dir);
/// Throws CheckpointError on manifest, shape or size problems, and when
/// `expected` is given and differs from the stored configuration.
Checkpoint load_checkpoint(const std::filesystem::path& dir, const ModelConfig* expected = nullptr);

std::vector<std::pair<std::string, std::string>> model_config_fields(const ModelConfig& config);
/// Returns false for an unknown key; throws on a malformed value.
bool set_model_config_field(ModelConfig& config, std::string_view key, std::string_view value);

}  // namespace coupondt::adt
