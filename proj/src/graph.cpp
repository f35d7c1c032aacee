#include "circuitedit/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <queue>
#include <set>
#include <sstream>

#include "circuitedit/errors.hpp"

namespace circuitedit {

NodeId ReaderPort::node() const {
  switch (kind) {
    case PortKind::Query:
    case PortKind::Key:
    case PortKind::Value:
      return NodeId::attn_head(layer, head);
    case PortKind::MlpIn:
      return NodeId::mlp(layer);
    case PortKind::LogitsIn:
      return NodeId::logits();
  }
  return NodeId::logits();
}

std::string to_string(NodeId n) {
  switch (n.kind) {
    case NodeKind::Embedding:
      return "embed";
    case NodeKind::AttnHead:
      return "a" + std::to_string(n.layer) + "." + std::to_string(n.head);
    case NodeKind::Mlp:
      return "m" + std::to_string(n.layer);
    case NodeKind::Logits:
      return "logits";
  }
  return "?";
}

std::string to_string(PortKind k) {
  switch (k) {
    case PortKind::Query:
      return "q";
    case PortKind::Key:
      return "k";
    case PortKind::Value:
      return "v";
    case PortKind::MlpIn:
      return "in";
    case PortKind::LogitsIn:
      return "in";
  }
  return "?";
}

std::string to_string(const ReaderPort& p) { return to_string(p.node()) + "." + to_string(p.kind); }

NodeId node_from_string(const std::string& s) {
  if (s == "embed") return NodeId::embedding();
  if (s == "logits") return NodeId::logits();
  int l = -1, h = -1;
  char tail = 0;
  if (s.size() > 1 && s[0] == 'a' && std::sscanf(s.c_str(), "a%d.%d%c", &l, &h, &tail) == 2) {
    return NodeId::attn_head(l, h);
  }
  if (s.size() > 1 && s[0] == 'm' && std::sscanf(s.c_str(), "m%d%c", &l, &tail) == 1) return NodeId::mlp(l);
  throw ConfigError("unrecognized node name '" + s + "'");
}

std::vector<NodeId> writer_nodes(const ModelConfig& config) {
  std::vector<NodeId> out{NodeId::embedding()};
  for (int l = 0; l < config.layers; ++l) {
    for (int h = 0; h < config.heads; ++h) out.push_back(NodeId::attn_head(l, h));
    out.push_back(NodeId::mlp(l));
  }
  return out;
}

std::vector<ReaderPort> reader_ports(const ModelConfig& config) {
  std::vector<ReaderPort> out;
  for (int l = 0; l < config.layers; ++l) {
    for (int h = 0; h < config.heads; ++h) {
      out.push_back({PortKind::Query, l, h});
      out.push_back({PortKind::Key, l, h});
      out.push_back({PortKind::Value, l, h});
    }
    out.push_back({PortKind::MlpIn, l, -1});
  }
  out.push_back({PortKind::LogitsIn, -1, -1});
  return out;
}

int writer_stage(NodeId writer) {
  switch (writer.kind) {
    case NodeKind::Embedding:
      return 0;
    case NodeKind::AttnHead:
      return 2 * writer.layer + 1;
    case NodeKind::Mlp:
      return 2 * writer.layer + 2;
    case NodeKind::Logits:
      break;
  }
  throw ConfigError("logits node is not a writer");
}

int port_stage(const ReaderPort& port) {
  switch (port.kind) {
    case PortKind::Query:
    case PortKind::Key:
    case PortKind::Value:
      return 2 * port.layer + 1;
    case PortKind::MlpIn:
      return 2 * port.layer + 2;
    case PortKind::LogitsIn:
      return 1 << 30;
  }
  return 0;
}

ComputeGraph::ComputeGraph(const ModelConfig& config)
    : config_(config), writers_(writer_nodes(config)), ports_(reader_ports(config)) {
  config_.validate();
  nodes_ = writers_;
  nodes_.push_back(NodeId::logits());
  for (std::size_t s = 0; s < writers_.size(); ++s) {
    for (std::size_t d = 0; d < ports_.size(); ++d) {
      if (writer_stage(writers_[s]) < port_stage(ports_[d])) edges_.push_back({edges_.size(), s, d});
    }
  }
}

std::optional<std::size_t> ComputeGraph::find_edge(NodeId src, const ReaderPort& dst) const {
  for (const Edge& e : edges_) {
    if (writers_[e.src] == src && ports_[e.dst] == dst) return e.index;
  }
  return std::nullopt;
}

std::string ComputeGraph::fingerprint() const {
  return "graph/L" + std::to_string(config_.layers) + "H" + std::to_string(config_.heads) + "/" +
         std::to_string(edges_.size());
}

std::vector<NodeId> ComputeGraph::topological_order() const {
  std::map<NodeId, std::size_t> indeg;
  std::map<NodeId, std::set<NodeId>> succ;
  for (const NodeId& n : nodes_) indeg[n] = 0;
  for (const Edge& e : edges_) {
    NodeId a = src_node(e), b = dst_node(e);
    if (succ[a].insert(b).second) ++indeg[b];
  }
  std::queue<NodeId> ready;
  for (const NodeId& n : nodes_) {
    if (indeg[n] == 0) ready.push(n);
  }
  std::vector<NodeId> order;
  while (!ready.empty()) {
    NodeId n = ready.front();
    ready.pop();
    order.push_back(n);
    for (const NodeId& m : succ[n]) {
      if (--indeg[m] == 0) ready.push(m);
    }
  }
  if (order.size() != nodes_.size()) throw Error("compute graph contains a cycle");
  return order;
}

ComputeGraph build_graph(const ModelConfig& config) { return ComputeGraph(config); }

std::size_t closed_form_edge_count(int layers, int heads) {
  const long L = layers, H = heads;
  long total = L * (3 * H + 1) + 1;
  for (long l = 0; l < L; ++l) {
    const long later = (L - 1 - l) * (3 * H + 1);
    total += H * (1 + later + 1) + (later + 1);
  }
  return static_cast<std::size_t>(total);
}

namespace {

std::string format_score(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

}  // namespace

std::string to_dot(const ComputeGraph& graph, const DotOverlay& overlay) {
  const std::size_t ne = graph.edge_count();
  std::vector<bool> in_circuit(ne, false);
  std::set<NodeId> highlighted;
  if (overlay.circuit_edges) {
    for (std::size_t idx : *overlay.circuit_edges) {
      if (idx >= ne) {
        throw ConfigError("edge " + std::to_string(idx) + " does not belong to " + graph.fingerprint());
      }
      in_circuit[idx] = true;
      highlighted.insert(graph.src_node(graph.edges()[idx]));
      highlighted.insert(graph.dst_node(graph.edges()[idx]));
    }
  }
  if (overlay.scores && overlay.scores->size() != ne) {
    throw ConfigError("score vector of length " + std::to_string(overlay.scores->size()) + " does not match " +
                      graph.fingerprint());
  }

  std::ostringstream os;
  os << "digraph circuit {\n";
  os << "  rankdir=BT;\n";
  os << "  node [shape=box, fontname=\"Helvetica\"];\n";
  for (const NodeId& n : graph.nodes()) {
    const std::string name = to_string(n);
    os << "  \"" << name << "\" [label=\"" << name << "\"";
    if (highlighted.count(n)) {
      os << ", style=filled, fillcolor=\"lightblue\"";
    } else {
      os << ", color=\"gray60\"";
    }
    os << "];\n";
  }
  for (const Edge& e : graph.edges()) {
    const ReaderPort& port = graph.dst_port(e);
    std::string label = to_string(port.kind);
    if (overlay.scores) label += " " + format_score(std::abs((*overlay.scores)[e.index]));
    os << "  \"" << to_string(graph.src_node(e)) << "\" -> \"" << to_string(port.node()) << "\" [label=\"" << label
       << "\"";
    if (in_circuit[e.index]) {
      os << ", color=\"blue\", penwidth=2";
    } else {
      os << ", color=\"gray80\"";
    }
    os << "];\n";
  }
  os << "}\n";
  return os.str();
}

std::string graph_summary_csv(const ComputeGraph& graph) {
  const int L = graph.config().layers;
  std::map<int, std::pair<std::size_t, std::size_t>> per_layer;  // layer -> (nodes, edges)
  auto layer_of = [L](NodeId n) {
    if (n.kind == NodeKind::Embedding) return -1;
    if (n.kind == NodeKind::Logits) return L;
    return n.layer;
  };
  for (const NodeId& n : graph.nodes()) ++per_layer[layer_of(n)].first;
  for (const Edge& e : graph.edges()) ++per_layer[layer_of(graph.src_node(e))].second;
  std::ostringstream os;
  os << "layer,nodes,edges\n";
  for (const auto& [layer, counts] : per_layer) os << layer << ',' << counts.first << ',' << counts.second << '\n';
  return os.str();
}

}  // namespace circuitedit
