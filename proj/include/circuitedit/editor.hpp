#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "circuitedit/attribution.hpp"
#include "circuitedit/fact_world.hpp"
#include "circuitedit/graph.hpp"
#include "circuitedit/model.hpp"

namespace circuitedit {

enum class PlanStrategy { Circuit, FullGraph, OnlyMlps, RandomEdges };
std::string to_string(PlanStrategy s);
PlanStrategy plan_strategy_from_string(const std::string& s);

struct EditPlan {
  PlanStrategy strategy = PlanStrategy::Circuit;
  std::set<MatrixId> targets;
  std::vector<std::size_t> edges;  // edge set the plan was derived from, if any
  std::uint64_t seed = 0;          // random-edges only
  bool coarse = false;

  bool empty() const { return targets.empty(); }
  bool operator==(const EditPlan&) const = default;
};

// Matrices touched by an edge set. Port-sensitive by default: a Q/K/V port
// maps to W_Q/W_K/W_V of that head, a head's writer face to its W_O, either
// face of an MLP to W_in and W_out. coarse targets all four matrices of any
// touched head. Embedding and Logits never map to a matrix.
std::set<MatrixId> target_matrices(const ComputeGraph& graph, const std::vector<std::size_t>& edges, bool coarse);

// Throws ConfigError when the circuit touches no trainable matrix.
EditPlan plan_from_circuit(const ComputeGraph& graph, const Circuit& circuit, bool coarse = false);
// Like plan_from_circuit but an empty target set is returned, not rejected.
EditPlan plan_from_edges(const ComputeGraph& graph, std::vector<std::size_t> edges, PlanStrategy strategy,
                         bool coarse = false);
EditPlan full_graph_plan(const ModelConfig& config);
EditPlan only_mlps_plan(const ModelConfig& config);
EditPlan random_edges_plan(const ComputeGraph& graph, std::size_t edge_count, std::uint64_t seed, bool coarse = false);

struct BaselinePlans {
  EditPlan full_graph;
  EditPlan only_mlps;
  EditPlan random_edges;
};
BaselinePlans baseline_plans(const ComputeGraph& graph, const Circuit& reference, std::uint64_t seed,
                             bool coarse = false);

// Delta W = scale * B A with W of shape [n, k], B [n, r_eff], A [r_eff, k].
struct Adapter {
  MatrixId matrix;
  Tensor a;
  Tensor b;
  int rank = 0;  // r_eff = min(r, n, k)
  double scale = 0.0;  // alpha / r_eff

  Tensor delta() const;
};

struct AdapterSet {
  double alpha = 8.0;
  int rank = 32;
  std::vector<Adapter> adapters;  // ascending MatrixId

  const Adapter* find(const MatrixId& m) const;
};

// B = 0, A ~ U(-1/sqrt(k), 1/sqrt(k)), deterministic in seed.
AdapterSet init_adapters(const Parameters& params, const EditPlan& plan, double alpha, int rank, std::uint64_t seed);

// Parameter vars with W + scale * B A substituted for each adapted matrix. The
// adapter factors are bound as leaves; their Vars are appended to factors
// (A then B per adapter) when requested.
ParamVars attach(Tape& tape, const Parameters& params, const AdapterSet& adapters, bool train_factors = false,
                 std::vector<Var>* factors = nullptr);
Parameters merge(const Parameters& params, const AdapterSet& adapters);

// Augmented adds the affected multi-hop chains to the edit prompt.
enum class EditMode { SingleHop, Augmented };
std::string to_string(EditMode m);
EditMode edit_mode_from_string(const std::string& s);

struct EditSample {
  std::vector<int> prompt;
  int target = 0;
  int foil = -1;  // competing token for the logit-difference loss
};

struct EditConfig {
  double alpha = 8.0;
  int rank = 32;
  double learning_rate = 0.05;
  int steps = 200;
  double clip_norm = 1.0;
  double stop_nll = 0.01;
  EditMode mode = EditMode::SingleHop;
  LossMetric metric = LossMetric::Nll;
  bool coarse = false;

  void validate() const;
};

struct EditResult {
  AdapterSet adapters;
  std::vector<double> loss_curve;  // mean training loss before each step
  std::vector<double> nll_curve;   // mean NLL before each step
  int steps_run = 0;
};

// Gradient descent on A and B only; params are never written.
EditResult train_edit(const Parameters& params, const EditPlan& plan, const EditConfig& config,
                      const std::vector<EditSample>& samples, std::uint64_t seed);

// The edited fact's single-hop prompt, plus the affected chains in Augmented mode.
std::vector<EditSample> edit_samples(const EvalSets& sets, EditMode mode);

nlohmann::json plan_to_json(const EditPlan& plan);
EditPlan plan_from_json(const nlohmann::json& j);

}  // namespace circuitedit
