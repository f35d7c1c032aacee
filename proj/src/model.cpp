#include "circuitedit/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <random>

#include "circuitedit/errors.hpp"

namespace circuitedit {

std::string to_string(MatrixKind k) {
  switch (k) {
    case MatrixKind::Query:
      return "W_Q";
    case MatrixKind::Key:
      return "W_K";
    case MatrixKind::Value:
      return "W_V";
    case MatrixKind::Output:
      return "W_O";
    case MatrixKind::MlpIn:
      return "W_in";
    case MatrixKind::MlpOut:
      return "W_out";
  }
  return "?";
}

std::string to_string(const MatrixId& m) {
  if (m.head >= 0) return to_string(m.kind) + "(" + std::to_string(m.layer) + "," + std::to_string(m.head) + ")";
  return to_string(m.kind) + "(" + std::to_string(m.layer) + ")";
}

MatrixId matrix_from_string(const std::string& s) {
  const auto open = s.find('(');
  if (open == std::string::npos || s.back() != ')') throw ConfigError("malformed matrix id '" + s + "'");
  const std::string kind = s.substr(0, open);
  MatrixId m;
  if (kind == "W_Q") m.kind = MatrixKind::Query;
  else if (kind == "W_K") m.kind = MatrixKind::Key;
  else if (kind == "W_V") m.kind = MatrixKind::Value;
  else if (kind == "W_O") m.kind = MatrixKind::Output;
  else if (kind == "W_in") m.kind = MatrixKind::MlpIn;
  else if (kind == "W_out") m.kind = MatrixKind::MlpOut;
  else throw ConfigError("unknown matrix kind in '" + s + "'");
  int l = -1, h = -1;
  const std::string args = s.substr(open + 1, s.size() - open - 2);
  const bool per_head = m.kind != MatrixKind::MlpIn && m.kind != MatrixKind::MlpOut;
  if (per_head ? std::sscanf(args.c_str(), "%d,%d", &l, &h) != 2 : std::sscanf(args.c_str(), "%d", &l) != 1) {
    throw ConfigError("malformed matrix id '" + s + "'");
  }
  m.layer = l;
  m.head = per_head ? h : -1;
  return m;
}

ParamLayout::ParamLayout(const ModelConfig& config) : layers_(config.layers), heads_(config.heads) {
  config.validate();
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto hd = static_cast<std::size_t>(config.head_dim());
  const auto ff = static_cast<std::size_t>(config.d_ff);
  const auto v = static_cast<std::size_t>(config.vocab);
  auto push = [this](std::string n, Shape s) {
    names_.push_back(std::move(n));
    shapes_.push_back(std::move(s));
  };
  push("tok_emb", {v, d});
  push("pos_emb", {static_cast<std::size_t>(config.max_seq_len), d});
  for (int l = 0; l < layers_; ++l) {
    const std::string p = "l" + std::to_string(l) + ".";
    push(p + "ln1.g", {1, d});
    push(p + "ln1.b", {1, d});
    for (int h = 0; h < heads_; ++h) {
      const std::string q = p + "h" + std::to_string(h) + ".";
      push(q + "W_Q", {d, hd});
      push(q + "b_Q", {1, hd});
      push(q + "W_K", {d, hd});
      push(q + "b_K", {1, hd});
      push(q + "W_V", {d, hd});
      push(q + "b_V", {1, hd});
      push(q + "W_O", {hd, d});
    }
    push(p + "ln2.g", {1, d});
    push(p + "ln2.b", {1, d});
    push(p + "W_in", {d, ff});
    push(p + "b_in", {1, ff});
    push(p + "W_out", {ff, d});
    push(p + "b_out", {1, d});
  }
  push("lnf.g", {1, d});
  push("lnf.b", {1, d});
  push("W_U", {d, v});
}

std::size_t ParamLayout::block_of(const MatrixId& m) const {
  if (m.layer < 0 || m.layer >= layers_) throw ConfigError("matrix " + to_string(m) + " has no such layer");
  const bool per_head = m.kind != MatrixKind::MlpIn && m.kind != MatrixKind::MlpOut;
  if (per_head && (m.head < 0 || m.head >= heads_)) throw ConfigError("matrix " + to_string(m) + " has no such head");
  switch (m.kind) {
    case MatrixKind::Query:
      return w_q(m.layer, m.head);
    case MatrixKind::Key:
      return w_k(m.layer, m.head);
    case MatrixKind::Value:
      return w_v(m.layer, m.head);
    case MatrixKind::Output:
      return w_o(m.layer, m.head);
    case MatrixKind::MlpIn:
      return w_in(m.layer);
    case MatrixKind::MlpOut:
      return w_out(m.layer);
  }
  throw ConfigError("unknown matrix kind");
}

std::vector<MatrixId> ParamLayout::all_matrices() const {
  std::vector<MatrixId> out;
  for (int l = 0; l < layers_; ++l) {
    for (int h = 0; h < heads_; ++h) {
      out.push_back({MatrixKind::Query, l, h});
      out.push_back({MatrixKind::Key, l, h});
      out.push_back({MatrixKind::Value, l, h});
      out.push_back({MatrixKind::Output, l, h});
    }
    out.push_back({MatrixKind::MlpIn, l, -1});
    out.push_back({MatrixKind::MlpOut, l, -1});
  }
  return out;
}

std::size_t Parameters::scalar_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.numel();
  return n;
}

bool Parameters::bit_equal(const Parameters& other) const {
  if (!(config == other.config) || blocks.size() != other.blocks.size()) return false;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (!blocks[i].bit_equal(other.blocks[i])) return false;
  }
  return true;
}

std::uint64_t Parameters::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& b : blocks) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(b.data().data());
    for (std::size_t i = 0; i < b.numel() * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

Parameters init_params(const ModelConfig& config) {
  config.validate();
  ParamLayout layout(config);
  Parameters p;
  p.config = config;
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (std::size_t i = 0; i < layout.count(); ++i) {
    Tensor t(layout.shape(i));
    const std::string& name = layout.name(i);
    const bool is_gain = name.ends_with(".g");
    const bool is_bias = name.ends_with(".b") || name.find(".b_") != std::string::npos;
    if (is_gain) {
      t.fill(1.0);
    } else if (!is_bias) {
      for (auto& v : t.storage()) v = normal(rng);
    }
    p.blocks.push_back(std::move(t));
  }
  return p;
}

ParamVars bind_parameters(Tape& tape, const Parameters& params, bool requires_grad) {
  ParamVars vars;
  vars.reserve(params.blocks.size());
  for (const auto& b : params.blocks) vars.push_back(tape.leaf(b, requires_grad));
  return vars;
}

namespace {

void validate_tokens(const ModelConfig& config, std::span<const int> tokens) {
  if (tokens.empty()) throw ConfigError("empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(config.max_seq_len)) {
    throw ConfigError("sequence of length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                      std::to_string(config.max_seq_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= config.vocab) {
      throw ConfigError("token id " + std::to_string(t) + " outside vocabulary of " + std::to_string(config.vocab));
    }
  }
}

Tensor causal_mask(std::size_t n) {
  Tensor m({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) m.at(i, j) = -1e9;
  }
  return m;
}

// Fixed attention pattern of the linear fixture: uniform over the causal prefix.
Tensor uniform_causal(std::size_t n) {
  Tensor m({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) m.at(i, j) = 1.0 / static_cast<double>(i + 1);
  }
  return m;
}

std::vector<const PortDelta*> index_patches(std::size_t n_ports, std::span<const PortDelta> patches) {
  std::vector<const PortDelta*> by_port(n_ports, nullptr);
  for (const auto& p : patches) {
    if (p.port >= n_ports) throw ConfigError("patch refers to port " + std::to_string(p.port) + " of " +
                                             std::to_string(n_ports));
    if (by_port[p.port]) throw ConfigError("port " + std::to_string(p.port) + " patched twice");
    by_port[p.port] = &p;
  }
  return by_port;
}

}  // namespace

Tensor embed_tokens(const Parameters& params, std::span<const int> tokens) {
  validate_tokens(params.config, tokens);
  ParamLayout lay(params.config);
  Tensor x = kernels::embedding(params[lay.tok_emb()], tokens);
  const Tensor& pos = params[lay.pos_emb()];
  const std::size_t d = x.cols();
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) x.at(i, j) += pos.at(i, j);
  }
  return x;
}

ForwardTrace trace_forward(Tape& tape, const ModelConfig& config, const ParamVars& params,
                           std::span<const int> tokens, std::span<const PortDelta> patches) {
  validate_tokens(config, tokens);
  ParamLayout lay(config);
  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
  Var tok = ops::embedding(params[lay.tok_emb()], tokens);
  Var pos = ops::embedding(params[lay.pos_emb()], positions);
  return trace_forward_from_residual(tape, config, params, ops::add(tok, pos), tokens, patches);
}

ForwardTrace trace_forward_from_residual(Tape& tape, const ModelConfig& config, const ParamVars& params,
                                         Var residual, std::span<const int> tokens,
                                         std::span<const PortDelta> patches) {
  validate_tokens(config, tokens);
  ParamLayout lay(config);
  if (params.size() != lay.count()) throw ConfigError("parameter list does not match the model layout");
  const std::size_t n = tokens.size();
  const std::size_t d = static_cast<std::size_t>(config.d_model);
  if (residual.shape() != Shape{n, d}) {
    throw ShapeError("initial residual " + shape_str(residual.shape()) + " does not match " + shape_str({n, d}));
  }
  const bool linear = config.variant == ModelVariant::Linear;
  const auto ports = reader_ports(config);
  const auto by_port = index_patches(ports.size(), patches);

  ForwardTrace tr;
  tr.config = config;
  tr.tokens.assign(tokens.begin(), tokens.end());
  tr.writer_out.push_back(residual);
  tr.port_in.reserve(ports.size());

  auto read_port = [&](Var resid) {
    const std::size_t idx = tr.port_in.size();
    Var in = by_port[idx] ? ops::add(resid, tape.constant(by_port[idx]->delta)) : ops::scale(resid, 1.0);
    tr.port_in.push_back(in);
    return in;
  };
  auto norm = [&](Var x, std::size_t gain, std::size_t bias) {
    return linear ? x : ops::layer_norm(x, params[gain], params[bias]);
  };

  Var mask = tape.constant(causal_mask(n));
  Var pattern = linear ? tape.constant(uniform_causal(n)) : Var{};
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(config.head_dim()));

  Var resid = residual;
  for (int l = 0; l < config.layers; ++l) {
    std::vector<Var> head_out;
    for (int h = 0; h < config.heads; ++h) {
      Var q_in = norm(read_port(resid), lay.ln1_gain(l), lay.ln1_bias(l));
      Var k_in = norm(read_port(resid), lay.ln1_gain(l), lay.ln1_bias(l));
      Var v_in = norm(read_port(resid), lay.ln1_gain(l), lay.ln1_bias(l));
      Var v = ops::add(ops::matmul(v_in, params[lay.w_v(l, h)]), params[lay.b_v(l, h)]);
      Var attn;
      if (linear) {
        attn = pattern;
      } else {
        Var q = ops::add(ops::matmul(q_in, params[lay.w_q(l, h)]), params[lay.b_q(l, h)]);
        Var k = ops::add(ops::matmul(k_in, params[lay.w_k(l, h)]), params[lay.b_k(l, h)]);
        Var scores = ops::add(ops::scale(ops::matmul(q, k, true), inv_sqrt_hd), mask);
        attn = ops::softmax(scores);
      }
      Var z = ops::matmul(attn, v);
      Var out = ops::matmul(z, params[lay.w_o(l, h)]);
      tr.writer_out.push_back(out);
      head_out.push_back(out);
    }
    for (Var out : head_out) resid = ops::add(resid, out);

    Var m_in = norm(read_port(resid), lay.ln2_gain(l), lay.ln2_bias(l));
    Var hidden = ops::add(ops::matmul(m_in, params[lay.w_in(l)]), params[lay.b_in(l)]);
    if (!linear) hidden = ops::gelu(hidden);
    Var m_out = ops::add(ops::matmul(hidden, params[lay.w_out(l)]), params[lay.b_out(l)]);
    tr.writer_out.push_back(m_out);
    resid = ops::add(resid, m_out);
  }
  Var f_in = norm(read_port(resid), lay.lnf_gain(), lay.lnf_bias());
  tr.logits = ops::matmul(f_in, params[lay.w_unembed()]);
  return tr;
}

TracedRun::TracedRun(const Parameters& params, std::span<const int> tokens, bool param_grads)
    : params_(bind_parameters(tape_, params, param_grads)) {
  trace_ = trace_forward(tape_, params.config, params_, tokens);
}

Tensor forward_logits(const Parameters& params, std::span<const int> tokens) {
  const ModelConfig& config = params.config;
  ParamLayout lay(config);
  const std::size_t n = tokens.size();
  const bool linear = config.variant == ModelVariant::Linear;
  Tensor resid = embed_tokens(params, tokens);
  const Tensor mask = causal_mask(n);
  const Tensor pattern = linear ? uniform_causal(n) : Tensor();
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(config.head_dim()));
  auto norm = [&](const Tensor& x, std::size_t g, std::size_t b) {
    return linear ? x : kernels::layer_norm(x, params[g], params[b]);
  };

  for (int l = 0; l < config.layers; ++l) {
    const Tensor x = norm(resid, lay.ln1_gain(l), lay.ln1_bias(l));
    std::vector<Tensor> head_out;
    for (int h = 0; h < config.heads; ++h) {
      Tensor v = kernels::add(kernels::matmul(x, params[lay.w_v(l, h)]), params[lay.b_v(l, h)]);
      Tensor attn;
      if (linear) {
        attn = pattern;
      } else {
        Tensor q = kernels::add(kernels::matmul(x, params[lay.w_q(l, h)]), params[lay.b_q(l, h)]);
        Tensor k = kernels::add(kernels::matmul(x, params[lay.w_k(l, h)]), params[lay.b_k(l, h)]);
        Tensor scores = kernels::add(kernels::scale(kernels::matmul(q, k, true), inv_sqrt_hd), mask);
        attn = kernels::softmax_rows(scores);
      }
      head_out.push_back(kernels::matmul(kernels::matmul(attn, v), params[lay.w_o(l, h)]));
    }
    for (const Tensor& out : head_out) kernels::add_inplace(resid, out);
    const Tensor m_in = norm(resid, lay.ln2_gain(l), lay.ln2_bias(l));
    Tensor hidden = kernels::add(kernels::matmul(m_in, params[lay.w_in(l)]), params[lay.b_in(l)]);
    if (!linear) hidden = kernels::gelu(hidden);
    kernels::add_inplace(resid, kernels::add(kernels::matmul(hidden, params[lay.w_out(l)]), params[lay.b_out(l)]));
  }
  return kernels::matmul(norm(resid, lay.lnf_gain(), lay.lnf_bias()), params[lay.w_unembed()]);
}

std::string to_string(LossMetric m) { return m == LossMetric::Nll ? "nll" : "logit-diff"; }

LossMetric loss_metric_from_string(const std::string& s) {
  if (s == "nll") return LossMetric::Nll;
  if (s == "logit-diff") return LossMetric::LogitDiff;
  throw ConfigError("unknown loss metric '" + s + "'");
}

namespace {

void check_position(const ForwardTrace& trace, std::size_t position) {
  if (position >= trace.seq_len()) {
    throw ConfigError("position " + std::to_string(position) + " outside sequence of length " +
                      std::to_string(trace.seq_len()));
  }
}

void check_target(const ForwardTrace& trace, int target) {
  if (target < 0 || target >= trace.config.vocab) {
    throw ConfigError("target id " + std::to_string(target) + " outside vocabulary of " +
                      std::to_string(trace.config.vocab));
  }
}

}  // namespace

Var loss_nll(const ForwardTrace& trace, int target, std::size_t position) {
  check_position(trace, position);
  check_target(trace, target);
  Var row = ops::slice(trace.logits, 0, position, position + 1);
  const int targets[] = {target};
  return ops::cross_entropy(row, targets);
}

Var logit_diff(const ForwardTrace& trace, int clean_target, int corrupt_target, std::size_t position) {
  check_position(trace, position);
  check_target(trace, clean_target);
  check_target(trace, corrupt_target);
  Var row = ops::slice(trace.logits, 0, position, position + 1);
  Tensor selector({static_cast<std::size_t>(trace.config.vocab), 1});
  selector[static_cast<std::size_t>(clean_target)] += 1.0;
  selector[static_cast<std::size_t>(corrupt_target)] -= 1.0;
  return ops::matmul(row, trace.logits.tape->constant(std::move(selector)));
}

int argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t c = logits.cols();
  std::size_t best = 0;
  for (std::size_t j = 1; j < c; ++j) {
    if (logits.at(row, j) > logits.at(row, best)) best = j;
  }
  return static_cast<int>(best);
}

int predict_token(const Parameters& params, std::span<const int> prompt) {
  Tensor logits = forward_logits(params, prompt);
  return argmax_row(logits, prompt.size() - 1);
}

double next_token_accuracy(const Parameters& params, const std::vector<TokenSequence>& corpus) {
  if (corpus.empty()) throw ConfigError("accuracy over an empty corpus");
  std::size_t correct = 0;
  for (const auto& seq : corpus) {
    if (seq.size() < 2) throw ConfigError("training sequences need a prompt and a target");
    std::span<const int> prompt(seq.data(), seq.size() - 1);
    if (predict_token(params, prompt) == seq.back()) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(corpus.size());
}

LmTrainResult train_lm(const Parameters& params, const std::vector<TokenSequence>& corpus,
                       const LmTrainConfig& config) {
  if (corpus.empty()) throw ConfigError("training corpus is empty");
  if (config.steps < 0) throw ConfigError("negative step count");
  for (const auto& seq : corpus) {
    if (seq.size() < 2) throw ConfigError("training sequences need a prompt and a target");
  }
  LmTrainResult result{params, {}};
  Parameters& p = result.params;
  const double inv_n = 1.0 / static_cast<double>(corpus.size());
  for (int step = 0; step < config.steps; ++step) {
    std::vector<Tensor> grads;
    double loss_value = 0.0;
    {
      Tape tape;
      ParamVars vars = bind_parameters(tape, p, true);
      Var total;
      for (const auto& seq : corpus) {
        std::span<const int> prompt(seq.data(), seq.size() - 1);
        ForwardTrace tr = trace_forward(tape, p.config, vars, prompt);
        Var loss = loss_nll(tr, seq.back(), prompt.size() - 1);
        total = total.valid() ? ops::add(total, loss) : loss;
      }
      Var mean = ops::scale(total, inv_n);
      loss_value = mean.value().item();
      if (!std::isfinite(loss_value)) {
        throw NumericError("training loss became non-finite at step " + std::to_string(step));
      }
      tape.backward(mean);
      grads.reserve(vars.size());
      for (Var v : vars) grads.push_back(tape.grad(v));
    }
    result.loss_curve.push_back(loss_value);
    double norm2 = 0.0;
    for (const auto& g : grads) {
      for (double v : g.storage()) norm2 += v * v;
    }
    const double norm = std::sqrt(norm2);
    if (!std::isfinite(norm)) throw NumericError("gradient norm became non-finite at step " + std::to_string(step));
    const double factor = norm > config.clip_norm ? config.clip_norm / norm : 1.0;
    const double step_size = config.learning_rate * factor;
    for (std::size_t i = 0; i < grads.size(); ++i) {
      auto& w = p.blocks[i].storage();
      const auto& g = grads[i].storage();
      for (std::size_t j = 0; j < w.size(); ++j) w[j] -= step_size * g[j];
    }
  }
  return result;
}

}  // namespace circuitedit
