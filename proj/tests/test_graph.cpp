#include <gtest/gtest.h>

#include <map>
#include <set>

#include "circuitedit/errors.hpp"
#include "circuitedit/graph.hpp"
#include "dot_validator.hpp"

using namespace circuitedit;

namespace {

ModelConfig shape(int layers, int heads) {
  ModelConfig c;
  c.layers = layers;
  c.heads = heads;
  c.d_model = 4 * heads;
  return c;
}

// Counts (writer, port) pairs from the computation schedule alone:
// embedding runs at step 0, layer l heads at 2l+1, MLP l at 2l+2. A head's
// Q/K/V read before step 2l+1; MLP-in reads before 2l+2; logits read last.
std::size_t brute_edges(int L, int H) {
  std::vector<int> writer_steps{0};
  for (int l = 0; l < L; ++l) {
    for (int h = 0; h < H; ++h) writer_steps.push_back(2 * l + 1);
    writer_steps.push_back(2 * l + 2);
  }
  std::vector<int> port_steps;
  for (int l = 0; l < L; ++l) {
    for (int h = 0; h < H; ++h) {
      for (int qkv = 0; qkv < 3; ++qkv) port_steps.push_back(2 * l + 1);
    }
    port_steps.push_back(2 * l + 2);
  }
  port_steps.push_back(2 * L + 1);
  std::size_t n = 0;
  for (int w : writer_steps) {
    for (int p : port_steps) n += w < p ? 1 : 0;
  }
  return n;
}

// |E| = [L(3H+1)+1] + sum_l [H(1 + (L-1-l)(3H+1) + 1) + ((L-1-l)(3H+1) + 1)]
std::size_t formula(int L, int H) {
  long total = static_cast<long>(L) * (3 * H + 1) + 1;
  for (int l = 0; l < L; ++l) {
    const long later = static_cast<long>(L - 1 - l) * (3 * H + 1);
    total += H * (1 + later + 1) + (later + 1);
  }
  return static_cast<std::size_t>(total);
}

}  // namespace

TEST(Graph, EdgeCountsAgreeForAllSmallShapes) {
  for (int L = 1; L <= 4; ++L) {
    for (int H = 1; H <= 4; ++H) {
      const ComputeGraph g(shape(L, H));
      EXPECT_EQ(g.edge_count(), brute_edges(L, H)) << L << "x" << H;
      EXPECT_EQ(formula(L, H), brute_edges(L, H)) << L << "x" << H;
      EXPECT_EQ(closed_form_edge_count(L, H), brute_edges(L, H)) << L << "x" << H;
    }
  }
}

TEST(Graph, SingleLayerSingleHeadHasEightEdges) {
  const ComputeGraph g(shape(1, 1));
  ASSERT_EQ(g.edge_count(), 8u);
  std::vector<std::string> got;
  for (const Edge& e : g.edges()) got.push_back(to_string(g.src_node(e)) + "->" + to_string(g.dst_port(e)));
  // hand enumeration
  const std::vector<std::string> expected{
      to_string(NodeId::embedding()) + "->" + to_string(ReaderPort{PortKind::Query, 0, 0}),
      to_string(NodeId::embedding()) + "->" + to_string(ReaderPort{PortKind::Key, 0, 0}),
      to_string(NodeId::embedding()) + "->" + to_string(ReaderPort{PortKind::Value, 0, 0}),
      to_string(NodeId::embedding()) + "->" + to_string(ReaderPort{PortKind::MlpIn, 0, -1}),
      to_string(NodeId::embedding()) + "->" + to_string(ReaderPort{PortKind::LogitsIn, -1, -1}),
      to_string(NodeId::attn_head(0, 0)) + "->" + to_string(ReaderPort{PortKind::MlpIn, 0, -1}),
      to_string(NodeId::attn_head(0, 0)) + "->" + to_string(ReaderPort{PortKind::LogitsIn, -1, -1}),
      to_string(NodeId::mlp(0)) + "->" + to_string(ReaderPort{PortKind::LogitsIn, -1, -1}),
  };
  EXPECT_EQ(got, expected);
}

TEST(Graph, TwoByTwoBreakdownBySource) {
  const ComputeGraph g(shape(2, 2));
  ASSERT_EQ(g.edge_count(), 46u);
  std::map<std::string, std::size_t> by_group;
  for (const Edge& e : g.edges()) {
    const NodeId s = g.src_node(e);
    std::string key = s.kind == NodeKind::Embedding ? "embed"
                      : s.kind == NodeKind::Mlp     ? "mlp" + std::to_string(s.layer)
                                                    : "heads" + std::to_string(s.layer);
    ++by_group[key];
  }
  EXPECT_EQ(by_group["embed"], 15u);
  EXPECT_EQ(by_group["heads0"], 18u);
  EXPECT_EQ(by_group["mlp0"], 8u);
  EXPECT_EQ(by_group["heads1"], 4u);
  EXPECT_EQ(by_group["mlp1"], 1u);
  EXPECT_EQ(g.fingerprint(), "graph/L2H2/46");
}

TEST(Graph, IndicesAreDenseLexicographicAndStable) {
  const ComputeGraph a(shape(3, 2)), b(shape(3, 2));
  for (std::size_t i = 0; i < a.edge_count(); ++i) {
    EXPECT_EQ(a.edges()[i].index, i);
    EXPECT_EQ(a.edges()[i].src, b.edges()[i].src);
    EXPECT_EQ(a.edges()[i].dst, b.edges()[i].dst);
    if (i > 0) {
      const Edge& p = a.edges()[i - 1];
      const Edge& q = a.edges()[i];
      EXPECT_TRUE(p.src < q.src || (p.src == q.src && p.dst < q.dst));
    }
    EXPECT_EQ(a.find_edge(a.src_node(a.edges()[i]), a.dst_port(a.edges()[i])), i);
  }
  EXPECT_FALSE(a.find_edge(NodeId::mlp(2), ReaderPort{PortKind::Query, 0, 0}).has_value());
}

TEST(Graph, TopologicalOrderRespectsEveryEdge) {
  for (int L = 1; L <= 4; ++L) {
    const ComputeGraph g(shape(L, 3));
    const auto order = g.topological_order();
    ASSERT_EQ(order.size(), g.nodes().size());
    std::map<NodeId, std::size_t> at;
    for (std::size_t i = 0; i < order.size(); ++i) at[order[i]] = i;
    for (const Edge& e : g.edges()) {
      EXPECT_LT(at.at(g.src_node(e)), at.at(g.dst_node(e)));
      EXPECT_LT(writer_stage(g.src_node(e)), port_stage(g.dst_port(e)));
      // heads of one layer never feed each other
      if (g.src_node(e).kind == NodeKind::AttnHead && g.dst_node(e).kind == NodeKind::AttnHead) {
        EXPECT_LT(g.src_node(e).layer, g.dst_node(e).layer);
      }
    }
  }
}

TEST(Dot, ParsesAndHasOneStatementPerNode) {
  const ComputeGraph g(shape(2, 2));
  const auto r = dotcheck::validate(to_dot(g));
  ASSERT_TRUE(r.ok) << r.error;
  EXPECT_EQ(r.nodes.size(), g.nodes().size());
  EXPECT_EQ(r.edges.size(), g.edge_count());
  EXPECT_TRUE(r.filled.empty());
}

TEST(Dot, ValidatorRejectsBrokenText) {
  EXPECT_FALSE(dotcheck::validate("digraph { \"a\" -> ; }").ok);
  EXPECT_FALSE(dotcheck::validate("digraph g { \"a\" [label=\"x\"];").ok);
  EXPECT_FALSE(dotcheck::validate("graph g { }").ok);
  EXPECT_TRUE(dotcheck::validate("digraph g { a -> b -> c; }").ok);
}

TEST(Dot, OverlayHighlightsAndLabels) {
  const ComputeGraph g(shape(2, 2));
  DotOverlay overlay;
  overlay.circuit_edges = std::vector<std::size_t>{0, 45};
  overlay.scores = std::vector<double>(g.edge_count(), -0.5);
  const std::string dot = to_dot(g, overlay);
  const auto r = dotcheck::validate(dot);
  ASSERT_TRUE(r.ok) << r.error;
  std::set<std::string> expected;
  for (std::size_t e : *overlay.circuit_edges) {
    expected.insert(to_string(g.src_node(g.edges()[e])));
    expected.insert(to_string(g.dst_node(g.edges()[e])));
  }
  EXPECT_EQ(r.filled, expected);
  EXPECT_NE(dot.find("0.5\""), std::string::npos);
  EXPECT_EQ(dot.find("-0.5"), std::string::npos);
  EXPECT_EQ(dot, to_dot(g, overlay));
}

TEST(Dot, ForeignReferencesAreRejected) {
  const ComputeGraph g(shape(1, 1));
  DotOverlay bad_edge;
  bad_edge.circuit_edges = std::vector<std::size_t>{8};
  EXPECT_THROW(to_dot(g, bad_edge), ConfigError);
  DotOverlay bad_scores;
  bad_scores.scores = std::vector<double>(46, 0.0);
  EXPECT_THROW(to_dot(g, bad_scores), ConfigError);
}

TEST(Summary, CountsPerLayerAddUp) {
  const ComputeGraph g(shape(2, 2));
  const std::string csv = graph_summary_csv(g);
  EXPECT_EQ(csv, "layer,nodes,edges\n-1,1,15\n0,3,26\n1,3,5\n2,1,0\n");
}
