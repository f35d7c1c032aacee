#include "circuitedit/editor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "circuitedit/errors.hpp"
#include "circuitedit/random.hpp"

namespace circuitedit {

std::string to_string(PlanStrategy s) {
  switch (s) {
    case PlanStrategy::Circuit: return "circuit";
    case PlanStrategy::FullGraph: return "full-graph";
    case PlanStrategy::OnlyMlps: return "only-mlps";
    case PlanStrategy::RandomEdges: return "random-edges";
  }
  return "?";
}

PlanStrategy plan_strategy_from_string(const std::string& s) {
  if (s == "circuit") return PlanStrategy::Circuit;
  if (s == "full-graph") return PlanStrategy::FullGraph;
  if (s == "only-mlps") return PlanStrategy::OnlyMlps;
  if (s == "random-edges") return PlanStrategy::RandomEdges;
  throw ConfigError("unknown edit strategy '" + s + "' (circuit, full-graph, only-mlps, random-edges)");
}

std::string to_string(EditMode m) { return m == EditMode::SingleHop ? "single-hop" : "augmented"; }

EditMode edit_mode_from_string(const std::string& s) {
  if (s == "single-hop") return EditMode::SingleHop;
  if (s == "augmented") return EditMode::Augmented;
  throw ConfigError("unknown edit mode '" + s + "' (single-hop, augmented)");
}

namespace {

void add_head(std::set<MatrixId>& out, int l, int h, bool q, bool k, bool v, bool o) {
  if (q) out.insert({MatrixKind::Query, l, h});
  if (k) out.insert({MatrixKind::Key, l, h});
  if (v) out.insert({MatrixKind::Value, l, h});
  if (o) out.insert({MatrixKind::Output, l, h});
}

void add_mlp(std::set<MatrixId>& out, int l) {
  out.insert({MatrixKind::MlpIn, l, -1});
  out.insert({MatrixKind::MlpOut, l, -1});
}

}  // namespace

std::set<MatrixId> target_matrices(const ComputeGraph& graph, const std::vector<std::size_t>& edges, bool coarse) {
  std::set<MatrixId> out;
  for (std::size_t idx : edges) {
    if (idx >= graph.edge_count()) {
      throw ConfigError("edge " + std::to_string(idx) + " does not belong to " + graph.fingerprint());
    }
    const Edge& e = graph.edges()[idx];
    const NodeId src = graph.src_node(e);
    if (src.kind == NodeKind::AttnHead) add_head(out, src.layer, src.head, coarse, coarse, coarse, true);
    if (src.kind == NodeKind::Mlp) add_mlp(out, src.layer);

    const ReaderPort& port = graph.dst_port(e);
    switch (port.kind) {
      case PortKind::Query: add_head(out, port.layer, port.head, true, coarse, coarse, coarse); break;
      case PortKind::Key: add_head(out, port.layer, port.head, coarse, true, coarse, coarse); break;
      case PortKind::Value: add_head(out, port.layer, port.head, coarse, coarse, true, coarse); break;
      case PortKind::MlpIn: add_mlp(out, port.layer); break;
      case PortKind::LogitsIn: break;
    }
  }
  return out;
}

EditPlan plan_from_edges(const ComputeGraph& graph, std::vector<std::size_t> edges, PlanStrategy strategy,
                         bool coarse) {
  std::sort(edges.begin(), edges.end());
  EditPlan plan;
  plan.strategy = strategy;
  plan.targets = target_matrices(graph, edges, coarse);
  plan.edges = std::move(edges);
  plan.coarse = coarse;
  return plan;
}

EditPlan plan_from_circuit(const ComputeGraph& graph, const Circuit& circuit, bool coarse) {
  if (circuit.graph_fingerprint != graph.fingerprint()) {
    throw ConfigError("circuit does not belong to " + graph.fingerprint());
  }
  EditPlan plan = plan_from_edges(graph, circuit.edges, PlanStrategy::Circuit, coarse);
  if (plan.empty()) throw ConfigError("circuit contains no trainable module (only embedding/logits edges)");
  return plan;
}

EditPlan full_graph_plan(const ModelConfig& config) {
  EditPlan plan;
  plan.strategy = PlanStrategy::FullGraph;
  for (const MatrixId& m : ParamLayout(config).all_matrices()) plan.targets.insert(m);
  return plan;
}

EditPlan only_mlps_plan(const ModelConfig& config) {
  EditPlan plan;
  plan.strategy = PlanStrategy::OnlyMlps;
  for (int l = 0; l < config.layers; ++l) add_mlp(plan.targets, l);
  return plan;
}

EditPlan random_edges_plan(const ComputeGraph& graph, std::size_t edge_count, std::uint64_t seed, bool coarse) {
  std::vector<std::size_t> all(graph.edge_count());
  std::iota(all.begin(), all.end(), 0);
  std::mt19937_64 rng(seed);
  shuffle(all, rng);
  all.resize(std::min(edge_count, all.size()));
  EditPlan plan = plan_from_edges(graph, std::move(all), PlanStrategy::RandomEdges, coarse);
  plan.seed = seed;
  return plan;
}

BaselinePlans baseline_plans(const ComputeGraph& graph, const Circuit& reference, std::uint64_t seed, bool coarse) {
  return {full_graph_plan(graph.config()), only_mlps_plan(graph.config()),
          random_edges_plan(graph, reference.edges.size(), seed, coarse)};
}

Tensor Adapter::delta() const { return kernels::scale(kernels::matmul(b, a), scale); }

const Adapter* AdapterSet::find(const MatrixId& m) const {
  for (const auto& ad : adapters) {
    if (ad.matrix == m) return &ad;
  }
  return nullptr;
}

AdapterSet init_adapters(const Parameters& params, const EditPlan& plan, double alpha, int rank, std::uint64_t seed) {
  if (!(alpha > 0.0) || rank < 1) throw ConfigError("adapters need alpha > 0 and rank >= 1");
  ParamLayout lay(params.config);
  AdapterSet set;
  set.alpha = alpha;
  set.rank = rank;
  std::mt19937_64 rng(seed);
  for (const MatrixId& m : plan.targets) {
    const Tensor& w = params[lay.block_of(m)];
    const std::size_t n = w.rows(), k = w.cols();
    const auto r = std::min<std::size_t>({static_cast<std::size_t>(rank), n, k});
    Adapter ad;
    ad.matrix = m;
    ad.rank = static_cast<int>(r);
    ad.scale = alpha / static_cast<double>(r);
    ad.b = Tensor::zeros({n, r});
    ad.a = Tensor::zeros({r, k});
    const double bound = 1.0 / std::sqrt(static_cast<double>(k));
    for (double& v : ad.a.storage()) v = bound * (2.0 * uniform01(rng) - 1.0);
    set.adapters.push_back(std::move(ad));
  }
  return set;
}

namespace {

void check_adapter(const Parameters& params, const ParamLayout& lay, const Adapter& ad) {
  const Tensor& w = params[lay.block_of(ad.matrix)];
  const std::size_t r = static_cast<std::size_t>(ad.rank);
  if (ad.b.shape() != Shape{w.rows(), r} || ad.a.shape() != Shape{r, w.cols()}) {
    throw ShapeError("adapter for " + to_string(ad.matrix) + " has B " + shape_str(ad.b.shape()) + " and A " +
                     shape_str(ad.a.shape()) + " but the matrix is " + shape_str(w.shape()));
  }
}

}  // namespace

ParamVars attach(Tape& tape, const Parameters& params, const AdapterSet& adapters, bool train_factors,
                 std::vector<Var>* factors) {
  ParamLayout lay(params.config);
  ParamVars vars = bind_parameters(tape, params, false);
  for (const Adapter& ad : adapters.adapters) {
    check_adapter(params, lay, ad);
    Var a = tape.leaf(ad.a, train_factors);
    Var b = tape.leaf(ad.b, train_factors);
    if (factors) {
      factors->push_back(a);
      factors->push_back(b);
    }
    const std::size_t blk = lay.block_of(ad.matrix);
    vars[blk] = ops::add(vars[blk], ops::scale(ops::matmul(b, a), ad.scale));
  }
  return vars;
}

Parameters merge(const Parameters& params, const AdapterSet& adapters) {
  ParamLayout lay(params.config);
  Parameters out = params;
  for (const Adapter& ad : adapters.adapters) {
    check_adapter(params, lay, ad);
    const std::size_t blk = lay.block_of(ad.matrix);
    out[blk] = kernels::add(params[blk], ad.delta());
  }
  return out;
}

void EditConfig::validate() const {
  if (!(alpha > 0.0)) throw ConfigError("edit alpha must be positive");
  if (rank < 1) throw ConfigError("edit rank must be >= 1");
  if (steps < 0) throw ConfigError("edit steps must be >= 0");
  if (!(learning_rate > 0.0)) throw ConfigError("edit learning rate must be positive");
  if (!(clip_norm > 0.0)) throw ConfigError("clip norm must be positive");
}

EditResult train_edit(const Parameters& params, const EditPlan& plan, const EditConfig& config,
                      const std::vector<EditSample>& samples, std::uint64_t seed) {
  config.validate();
  if (plan.empty()) throw ConfigError("edit plan targets no matrix");
  if (samples.empty()) throw ConfigError("no edit prompts");
  if (config.metric == LossMetric::LogitDiff) {
    for (const auto& s : samples) {
      if (s.foil < 0) throw ConfigError("logit-difference editing needs a foil token for every prompt");
    }
  }
  EditResult result;
  result.adapters = init_adapters(params, plan, config.alpha, config.rank, seed);
  const double inv_n = 1.0 / static_cast<double>(samples.size());

  for (int step = 0; step <= config.steps; ++step) {
    std::vector<Tensor> grads;
    {
      Tape tape;
      std::vector<Var> factors;
      ParamVars vars = attach(tape, params, result.adapters, true, &factors);
      Var total, total_nll;
      for (const auto& s : samples) {
        ForwardTrace tr = trace_forward(tape, params.config, vars, s.prompt);
        const std::size_t pos = s.prompt.size() - 1;
        Var nll = loss_nll(tr, s.target, pos);
        Var loss = config.metric == LossMetric::Nll ? nll : ops::scale(logit_diff(tr, s.target, s.foil, pos), -1.0);
        total = total.valid() ? ops::add(total, loss) : loss;
        total_nll = total_nll.valid() ? ops::add(total_nll, nll) : nll;
      }
      Var mean = ops::scale(total, inv_n);
      const double loss_value = mean.value().item();
      const double nll_value = total_nll.value().item() * inv_n;
      if (!std::isfinite(loss_value) || !std::isfinite(nll_value)) {
        throw NumericError("edit loss became non-finite at step " + std::to_string(step));
      }
      result.loss_curve.push_back(loss_value);
      result.nll_curve.push_back(nll_value);
      if (step == config.steps || nll_value < config.stop_nll) break;
      tape.backward(mean);
      for (Var f : factors) grads.push_back(tape.grad(f));
    }
    double norm2 = 0.0;
    for (const auto& g : grads) {
      for (double v : g.storage()) norm2 += v * v;
    }
    const double norm = std::sqrt(norm2);
    if (!std::isfinite(norm)) throw NumericError("edit gradient became non-finite at step " + std::to_string(step));
    const double step_size = config.learning_rate * (norm > config.clip_norm ? config.clip_norm / norm : 1.0);
    for (std::size_t i = 0; i < result.adapters.adapters.size(); ++i) {
      Adapter& ad = result.adapters.adapters[i];
      for (int f = 0; f < 2; ++f) {
        auto& w = (f == 0 ? ad.a : ad.b).storage();
        const auto& g = grads[2 * i + static_cast<std::size_t>(f)].storage();
        for (std::size_t j = 0; j < w.size(); ++j) w[j] -= step_size * g[j];
      }
    }
    ++result.steps_run;
  }
  return result;
}

std::vector<EditSample> edit_samples(const EvalSets& sets, EditMode mode) {
  std::vector<EditSample> out;
  for (const auto& p : sets.single_hop) out.push_back({p.prompt, p.answer, p.previous});
  if (mode == EditMode::Augmented) {
    for (const auto& p : sets.multi_hop_training) out.push_back({p.prompt, p.answer, p.previous});
  }
  return out;
}

nlohmann::json plan_to_json(const EditPlan& plan) {
  nlohmann::json targets = nlohmann::json::array();
  for (const MatrixId& m : plan.targets) targets.push_back(to_string(m));
  return {{"strategy", to_string(plan.strategy)},
          {"targets", targets},
          {"edges", plan.edges},
          {"seed", plan.seed},
          {"coarse", plan.coarse}};
}

EditPlan plan_from_json(const nlohmann::json& j) {
  try {
    EditPlan plan;
    plan.strategy = plan_strategy_from_string(j.at("strategy").get<std::string>());
    for (const auto& t : j.at("targets")) plan.targets.insert(matrix_from_string(t.get<std::string>()));
    plan.edges = j.at("edges").get<std::vector<std::size_t>>();
    plan.seed = j.at("seed").get<std::uint64_t>();
    plan.coarse = j.at("coarse").get<bool>();
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed edit plan: ") + e.what());
  }
}

}  // namespace circuitedit
