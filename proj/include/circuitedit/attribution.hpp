#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "circuitedit/fact_world.hpp"
#include "circuitedit/graph.hpp"
#include "circuitedit/model.hpp"

namespace circuitedit {

// Riemann schedule gamma_k = k/m, k = 1..m.
class InterpolationSchedule {
 public:
  explicit InterpolationSchedule(int m = 5);
  int steps() const { return m_; }
  double gamma(int k) const;  // k in 1..m; gamma(m) == 1 exactly
  std::vector<double> gammas() const;
  bool operator==(const InterpolationSchedule&) const = default;

 private:
  int m_;
};

enum class AttributionMethod { Eap, EapIg, ActivationPatch };
std::string to_string(AttributionMethod m);
AttributionMethod attribution_method_from_string(const std::string& s);

struct AttributionResult {
  std::vector<double> scores;  // signed, indexed by edge
  std::vector<std::vector<double>> position_scores;  // [edge][position], debugging only
  AttributionMethod method = AttributionMethod::EapIg;
  std::optional<InterpolationSchedule> schedule;  // set for EAP-IG
  std::string pair_label;
  LossMetric metric = LossMetric::Nll;
  std::string graph_fingerprint;

  // e.g. "eap-ig/m=5/nll/<label>"
  std::string identity() const;
};

AttributionResult eap_scores(const Parameters& params, const ComputeGraph& graph, const PromptPair& pair,
                             LossMetric metric);
AttributionResult eap_ig_scores(const Parameters& params, const ComputeGraph& graph, const PromptPair& pair,
                                const InterpolationSchedule& schedule, LossMetric metric);
// Exact per-edge effect: loss with the src writer's corrupt contribution
// substituted at the dst port only, minus the clean loss.
AttributionResult activation_patch_oracle(const Parameters& params, const ComputeGraph& graph,
                                          const PromptPair& pair, LossMetric metric);

struct Circuit {
  std::vector<std::size_t> edges;     // ascending edge indices
  std::vector<double> edge_scores;    // signed phi aligned with edges
  std::set<NodeId> modules;           // both endpoints of every retained edge
  std::size_t k = 0;
  std::string source;                 // AttributionResult::identity()
  std::string graph_fingerprint;

  bool contains(std::size_t edge) const;
  bool operator==(const Circuit&) const = default;
};

// Ranks by |phi| descending, ties by ascending edge index, keeps min(K, |E|).
Circuit prune_top_k(const AttributionResult& result, const ComputeGraph& graph, std::size_t k);
// Circuit over an explicit edge set; scores are taken from result when given.
Circuit circuit_from_edges(const ComputeGraph& graph, std::vector<std::size_t> edges,
                           const AttributionResult* result = nullptr);
std::set<NodeId> induced_modules(const ComputeGraph& graph, const std::vector<std::size_t>& edges);

// K = max(1, round(fraction * |E|)).
std::size_t k_for_fraction(const ComputeGraph& graph, double fraction);

// rows = layers, columns = head 0..H-1 then MLP; cell = mean over results of
// the summed |phi| of edges incident to that component.
struct Heatmap {
  int layers = 0;
  int heads = 0;
  std::vector<std::vector<double>> cells;
  std::string to_csv() const;
};
Heatmap aggregate_heatmap(const std::vector<AttributionResult>& results, const ComputeGraph& graph);

struct LayerDiff {
  int layer = 0;  // -1 embedding, L logits
  std::size_t new_nodes = 0;
  double abs_phi = 0.0;  // summed |phi| of multi's retained edges incident to the new nodes
};
struct CircuitDiff {
  std::vector<NodeId> new_nodes;
  std::vector<LayerDiff> layers;  // one row per layer from -1 to L
  std::string to_csv() const;
};
CircuitDiff circuit_diff(const Circuit& multi, const Circuit& single, const ComputeGraph& graph);

// "circuit/1" documents.
nlohmann::json circuit_to_json(const Circuit& c, const ComputeGraph& graph);
Circuit circuit_from_json(const nlohmann::json& j, const ComputeGraph& graph);
nlohmann::json attribution_to_json(const AttributionResult& r);

std::string to_dot(const ComputeGraph& graph, const Circuit& circuit, const AttributionResult* scores = nullptr);

// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& a, const std::vector<double>& b);
// |top_k(|a|) intersect top_k(|b|)|, ties by index.
std::size_t top_k_overlap(const std::vector<double>& a, const std::vector<double>& b, std::size_t k);

}  // namespace circuitedit
