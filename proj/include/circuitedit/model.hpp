#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "circuitedit/autodiff.hpp"
#include "circuitedit/graph.hpp"
#include "circuitedit/model_config.hpp"
#include "circuitedit/tensor.hpp"

namespace circuitedit {

// Weight matrices that can receive adapters.
enum class MatrixKind { Query, Key, Value, Output, MlpIn, MlpOut };

struct MatrixId {
  MatrixKind kind = MatrixKind::MlpIn;
  int layer = 0;
  int head = -1;  // -1 for MLP matrices

  auto operator<=>(const MatrixId&) const = default;
};

std::string to_string(MatrixKind k);
std::string to_string(const MatrixId& m);
MatrixId matrix_from_string(const std::string& s);

// Block indices of every parameter tensor, in checkpoint order:
//   tok_emb, pos_emb,
//   per layer: ln1.g, ln1.b, per head (W_Q, b_Q, W_K, b_K, W_V, b_V, W_O),
//              ln2.g, ln2.b, W_in, b_in, W_out, b_out,
//   lnf.g, lnf.b, W_U.
class ParamLayout {
 public:
  explicit ParamLayout(const ModelConfig& config);

  std::size_t count() const { return names_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const Shape& shape(std::size_t i) const { return shapes_[i]; }

  std::size_t tok_emb() const { return 0; }
  std::size_t pos_emb() const { return 1; }
  std::size_t ln1_gain(int l) const { return layer_base(l); }
  std::size_t ln1_bias(int l) const { return layer_base(l) + 1; }
  std::size_t w_q(int l, int h) const { return head_base(l, h); }
  std::size_t b_q(int l, int h) const { return head_base(l, h) + 1; }
  std::size_t w_k(int l, int h) const { return head_base(l, h) + 2; }
  std::size_t b_k(int l, int h) const { return head_base(l, h) + 3; }
  std::size_t w_v(int l, int h) const { return head_base(l, h) + 4; }
  std::size_t b_v(int l, int h) const { return head_base(l, h) + 5; }
  std::size_t w_o(int l, int h) const { return head_base(l, h) + 6; }
  std::size_t ln2_gain(int l) const { return head_base(l, heads_); }
  std::size_t ln2_bias(int l) const { return head_base(l, heads_) + 1; }
  std::size_t w_in(int l) const { return head_base(l, heads_) + 2; }
  std::size_t b_in(int l) const { return head_base(l, heads_) + 3; }
  std::size_t w_out(int l) const { return head_base(l, heads_) + 4; }
  std::size_t b_out(int l) const { return head_base(l, heads_) + 5; }
  std::size_t lnf_gain() const { return layer_base(layers_); }
  std::size_t lnf_bias() const { return layer_base(layers_) + 1; }
  std::size_t w_unembed() const { return layer_base(layers_) + 2; }

  std::size_t block_of(const MatrixId& m) const;
  // Every adaptable matrix in layout order.
  std::vector<MatrixId> all_matrices() const;

 private:
  static constexpr std::size_t kPerHead = 7;
  static constexpr std::size_t kPerLayerFixed = 2 + 6;
  std::size_t layer_base(int l) const {
    return 2 + static_cast<std::size_t>(l) * (kPerLayerFixed + kPerHead * static_cast<std::size_t>(heads_));
  }
  std::size_t head_base(int l, int h) const { return layer_base(l) + 2 + kPerHead * static_cast<std::size_t>(h); }

  int layers_;
  int heads_;
  std::vector<std::string> names_;
  std::vector<Shape> shapes_;
};

struct Parameters {
  ModelConfig config;
  std::vector<Tensor> blocks;  // indexed by ParamLayout

  ParamLayout layout() const { return ParamLayout(config); }
  Tensor& operator[](std::size_t i) { return blocks[i]; }
  const Tensor& operator[](std::size_t i) const { return blocks[i]; }
  std::size_t scalar_count() const;
  bool bit_equal(const Parameters& other) const;
  // FNV-1a over the raw bytes of every block.
  std::uint64_t checksum() const;
};

// Deterministic in config.seed: matrices ~ N(0, 0.02), biases 0, LayerNorm gain 1.
Parameters init_params(const ModelConfig& config);

// Parameter blocks as tape values, one Var per block. Callers may substitute
// entries (adapters do this) before running a forward pass.
using ParamVars = std::vector<Var>;
ParamVars bind_parameters(Tape& tape, const Parameters& params, bool requires_grad);

// Additive perturbation applied to the input of one reader port only.
struct PortDelta {
  std::size_t port = 0;  // index into reader_ports(config)
  Tensor delta;          // [seq, d_model]
};

// Residual-stream view of one traced forward pass.
struct ForwardTrace {
  ModelConfig config;
  std::vector<int> tokens;
  std::vector<Var> writer_out;  // aligned with writer_nodes(config), each [seq, d]
  std::vector<Var> port_in;     // aligned with reader_ports(config), pre-LayerNorm [seq, d]
  Var logits;                   // [seq, vocab]

  std::size_t seq_len() const { return tokens.size(); }
};

// Token + position embedding sum, the Embedding writer's output.
Tensor embed_tokens(const Parameters& params, std::span<const int> tokens);

// Records a forward pass. tokens are validated against vocab and max_seq_len.
ForwardTrace trace_forward(Tape& tape, const ModelConfig& config, const ParamVars& params,
                           std::span<const int> tokens, std::span<const PortDelta> patches = {});

// Same, starting from an explicit initial residual stream (used to
// interpolate between clean and corrupt embeddings). tokens only set length.
ForwardTrace trace_forward_from_residual(Tape& tape, const ModelConfig& config, const ParamVars& params,
                                         Var residual, std::span<const int> tokens,
                                         std::span<const PortDelta> patches = {});

// Owns its tape; the tape stays active on this thread until destruction.
class TracedRun {
 public:
  TracedRun(const Parameters& params, std::span<const int> tokens, bool param_grads = false);
  Tape& tape() { return tape_; }
  const ForwardTrace& trace() const { return trace_; }
  const ParamVars& params() const { return params_; }

 private:
  Tape tape_;
  ParamVars params_;
  ForwardTrace trace_;
};

// Trace-free forward producing logits [seq, vocab].
Tensor forward_logits(const Parameters& params, std::span<const int> tokens);

enum class LossMetric { Nll, LogitDiff };
std::string to_string(LossMetric m);
LossMetric loss_metric_from_string(const std::string& s);

// -log softmax(logits[position])[target].
Var loss_nll(const ForwardTrace& trace, int target, std::size_t position);
// logits[position][clean] - logits[position][corrupt].
Var logit_diff(const ForwardTrace& trace, int clean_target, int corrupt_target, std::size_t position);

// Argmax of the final-position logits, ties to the lowest token id.
int predict_token(const Parameters& params, std::span<const int> prompt);
int argmax_row(const Tensor& logits, std::size_t row);

// Training example: the final token is the target, preceding tokens the prompt.
using TokenSequence = std::vector<int>;

struct LmTrainConfig {
  int steps = 2000;
  double learning_rate = 0.1;
  double clip_norm = 1.0;
};

struct LmTrainResult {
  Parameters params;
  std::vector<double> loss_curve;  // mean loss before each step
};

// Full-batch gradient descent with global gradient-norm clipping.
LmTrainResult train_lm(const Parameters& params, const std::vector<TokenSequence>& corpus,
                       const LmTrainConfig& config);

// Fraction of sequences whose final token is the argmax prediction.
double next_token_accuracy(const Parameters& params, const std::vector<TokenSequence>& corpus);

}  // namespace circuitedit
