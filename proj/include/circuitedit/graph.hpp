#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "circuitedit/model_config.hpp"

namespace circuitedit {

enum class NodeKind { Embedding, AttnHead, Mlp, Logits };

// A sub-module of the transformer. layer/head are -1 where not applicable.
struct NodeId {
  NodeKind kind = NodeKind::Embedding;
  int layer = -1;
  int head = -1;

  static NodeId embedding() { return {NodeKind::Embedding, -1, -1}; }
  static NodeId attn_head(int l, int h) { return {NodeKind::AttnHead, l, h}; }
  static NodeId mlp(int l) { return {NodeKind::Mlp, l, -1}; }
  static NodeId logits() { return {NodeKind::Logits, -1, -1}; }

  auto operator<=>(const NodeId&) const = default;
};

enum class PortKind { Query, Key, Value, MlpIn, LogitsIn };

// The face of a node that reads the residual stream (through its LayerNorm).
struct ReaderPort {
  PortKind kind = PortKind::LogitsIn;
  int layer = -1;
  int head = -1;

  NodeId node() const;
  auto operator<=>(const ReaderPort&) const = default;
};

std::string to_string(NodeId n);
std::string to_string(PortKind k);
std::string to_string(const ReaderPort& p);
NodeId node_from_string(const std::string& s);

// Writers in computation order: Embedding, then per layer its heads and MLP.
std::vector<NodeId> writer_nodes(const ModelConfig& config);
// Reader ports in computation order: per layer Q,K,V of each head then
// MLP-in, finally Logits-in.
std::vector<ReaderPort> reader_ports(const ModelConfig& config);

// Position in the residual stream schedule; a writer feeds a port iff
// writer_stage < port_stage.
int writer_stage(NodeId writer);
int port_stage(const ReaderPort& port);

struct Edge {
  std::size_t index = 0;
  std::size_t src = 0;  // index into ComputeGraph::writers
  std::size_t dst = 0;  // index into ComputeGraph::ports
};

class ComputeGraph {
 public:
  explicit ComputeGraph(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const std::vector<NodeId>& writers() const { return writers_; }
  const std::vector<ReaderPort>& ports() const { return ports_; }
  const std::vector<Edge>& edges() const { return edges_; }
  // All nodes: writers in order followed by Logits.
  const std::vector<NodeId>& nodes() const { return nodes_; }
  std::size_t edge_count() const { return edges_.size(); }

  NodeId src_node(const Edge& e) const { return writers_[e.src]; }
  const ReaderPort& dst_port(const Edge& e) const { return ports_[e.dst]; }
  NodeId dst_node(const Edge& e) const { return ports_[e.dst].node(); }

  // Edge index for (writer, port) or nullopt when the pair is not an edge.
  std::optional<std::size_t> find_edge(NodeId src, const ReaderPort& dst) const;

  // Stable identity for cross-checking persisted circuits, e.g. "graph/L2H2/46".
  std::string fingerprint() const;

  // Kahn's algorithm over nodes; returns nodes in a topological order or
  // throws if a cycle exists.
  std::vector<NodeId> topological_order() const;

 private:
  ModelConfig config_;
  std::vector<NodeId> writers_;
  std::vector<ReaderPort> ports_;
  std::vector<NodeId> nodes_;
  std::vector<Edge> edges_;
};

ComputeGraph build_graph(const ModelConfig& config);

// Closed form |E| = [L(3H+1)+1] + sum_l [H(1 + (L-1-l)(3H+1) + 1) + ((L-1-l)(3H+1) + 1)].
std::size_t closed_form_edge_count(int layers, int heads);

// Optional highlighting for DOT export.
struct DotOverlay {
  std::optional<std::vector<std::size_t>> circuit_edges;
  std::optional<std::vector<double>> scores;  // one per edge, labels carry |score|
};

// Graphviz export; deterministic. Throws ConfigError on an edge index or score
// vector that does not belong to this graph.
std::string to_dot(const ComputeGraph& graph, const DotOverlay& overlay = {});

// Per-layer node and edge counts. Edges are counted at their source layer;
// Embedding is layer -1.
std::string graph_summary_csv(const ComputeGraph& graph);

}  // namespace circuitedit
