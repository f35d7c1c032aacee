#include "circuitedit/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "circuitedit/errors.hpp"

namespace circuitedit {

InterpolationSchedule::InterpolationSchedule(int m) : m_(m) {
  if (m < 1) throw ConfigError("interpolation needs m >= 1, got " + std::to_string(m));
}

double InterpolationSchedule::gamma(int k) const {
  if (k < 1 || k > m_) throw ConfigError("interpolation step " + std::to_string(k) + " outside 1.." + std::to_string(m_));
  return k == m_ ? 1.0 : static_cast<double>(k) / static_cast<double>(m_);
}

std::vector<double> InterpolationSchedule::gammas() const {
  std::vector<double> g;
  for (int k = 1; k <= m_; ++k) g.push_back(gamma(k));
  return g;
}

std::string to_string(AttributionMethod m) {
  switch (m) {
    case AttributionMethod::Eap: return "eap";
    case AttributionMethod::EapIg: return "eap-ig";
    case AttributionMethod::ActivationPatch: return "activation-patch";
  }
  return "?";
}

AttributionMethod attribution_method_from_string(const std::string& s) {
  if (s == "eap") return AttributionMethod::Eap;
  if (s == "eap-ig") return AttributionMethod::EapIg;
  if (s == "activation-patch") return AttributionMethod::ActivationPatch;
  throw ConfigError("unknown attribution method '" + s + "'");
}

std::string AttributionResult::identity() const {
  std::string id = to_string(method);
  if (schedule) id += "/m=" + std::to_string(schedule->steps());
  return id + "/" + to_string(metric) + "/" + pair_label;
}

namespace {

void check_pair(const Parameters& params, const ComputeGraph& graph, const PromptPair& pair) {
  if (!(graph.config() == params.config)) throw ConfigError("graph was built for a different model config");
  if (pair.clean.size() != pair.corrupt.size()) {
    throw ConfigError("prompt pair is not token-aligned (" + std::to_string(pair.clean.size()) + " vs " +
                      std::to_string(pair.corrupt.size()) + " tokens)");
  }
  if (pair.answer_position >= pair.clean.size()) throw ConfigError("answer position outside the prompt");
}

Var metric_loss(const ForwardTrace& tr, const PromptPair& pair, LossMetric metric) {
  if (metric == LossMetric::Nll) return loss_nll(tr, pair.clean_answer, pair.answer_position);
  return logit_diff(tr, pair.clean_answer, pair.corrupt_answer, pair.answer_position);
}

struct ResidualRun {
  std::vector<Tensor> writers;
  std::vector<Tensor> port_grads;  // empty unless requested
  double loss = 0.0;
};

ResidualRun run_from_residual(const Parameters& params, const PromptPair& pair, const Tensor& residual,
                              LossMetric metric, bool want_grads, std::span<const PortDelta> patches = {}) {
  ResidualRun out;
  Tape tape;
  ParamVars vars = bind_parameters(tape, params, false);
  Var x = tape.leaf(residual, want_grads);
  ForwardTrace tr = trace_forward_from_residual(tape, params.config, vars, x, pair.clean, patches);
  Var loss = metric_loss(tr, pair, metric);
  out.loss = loss.value().item();
  if (!std::isfinite(out.loss)) throw NumericError("attribution loss is not finite");
  out.writers.reserve(tr.writer_out.size());
  for (Var w : tr.writer_out) out.writers.push_back(w.value());
  if (want_grads) {
    tape.backward(loss);
    out.port_grads.reserve(tr.port_in.size());
    for (Var p : tr.port_in) out.port_grads.push_back(tape.grad(p));
  }
  return out;
}

AttributionResult score_edges(const ComputeGraph& graph, const std::vector<Tensor>& clean_writers,
                              const std::vector<Tensor>& corrupt_writers, const std::vector<Tensor>& port_grads) {
  AttributionResult r;
  r.graph_fingerprint = graph.fingerprint();
  r.scores.resize(graph.edge_count());
  r.position_scores.resize(graph.edge_count());
  for (const Edge& e : graph.edges()) {
    const Tensor& wc = clean_writers[e.src];
    const Tensor& wx = corrupt_writers[e.src];
    const Tensor& g = port_grads[e.dst];
    const std::size_t n = wc.rows(), d = wc.cols();
    std::vector<double> per_pos(n, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += (wc.at(i, j) - wx.at(i, j)) * g.at(i, j);
      per_pos[i] = s;
      total += s;
    }
    r.scores[e.index] = total;
    r.position_scores[e.index] = std::move(per_pos);
  }
  return r;
}

}  // namespace

AttributionResult eap_scores(const Parameters& params, const ComputeGraph& graph, const PromptPair& pair,
                             LossMetric metric) {
  check_pair(params, graph, pair);
  const ResidualRun corrupt = run_from_residual(params, pair, embed_tokens(params, pair.corrupt), metric, false);
  const ResidualRun clean = run_from_residual(params, pair, embed_tokens(params, pair.clean), metric, true);
  AttributionResult r = score_edges(graph, clean.writers, corrupt.writers, clean.port_grads);
  r.method = AttributionMethod::Eap;
  r.pair_label = pair.label;
  r.metric = metric;
  return r;
}

AttributionResult eap_ig_scores(const Parameters& params, const ComputeGraph& graph, const PromptPair& pair,
                                const InterpolationSchedule& schedule, LossMetric metric) {
  check_pair(params, graph, pair);
  const Tensor x_clean = embed_tokens(params, pair.clean);
  const Tensor x_corrupt = embed_tokens(params, pair.corrupt);
  const ResidualRun corrupt = run_from_residual(params, pair, x_corrupt, metric, false);

  std::vector<Tensor> clean_writers;
  std::vector<Tensor> grad_sum;
  for (int k = 1; k <= schedule.steps(); ++k) {
    const double g = schedule.gamma(k);
    Tensor x = x_clean;
    if (g != 1.0) {
      for (std::size_t i = 0; i < x.numel(); ++i) x[i] = x_corrupt[i] + g * (x_clean[i] - x_corrupt[i]);
    }
    ResidualRun run = run_from_residual(params, pair, x, metric, true);
    if (g == 1.0) clean_writers = std::move(run.writers);
    if (grad_sum.empty()) {
      for (const Tensor& t : run.port_grads) grad_sum.push_back(Tensor::zeros(t.shape()));
    }
    for (std::size_t p = 0; p < grad_sum.size(); ++p) kernels::add_inplace(grad_sum[p], run.port_grads[p]);
  }
  const double inv_m = 1.0 / static_cast<double>(schedule.steps());
  for (Tensor& t : grad_sum) t = kernels::scale(t, inv_m);

  AttributionResult r = score_edges(graph, clean_writers, corrupt.writers, grad_sum);
  r.method = AttributionMethod::EapIg;
  r.schedule = schedule;
  r.pair_label = pair.label;
  r.metric = metric;
  return r;
}

AttributionResult activation_patch_oracle(const Parameters& params, const ComputeGraph& graph,
                                          const PromptPair& pair, LossMetric metric) {
  check_pair(params, graph, pair);
  const Tensor x_clean = embed_tokens(params, pair.clean);
  const ResidualRun corrupt = run_from_residual(params, pair, embed_tokens(params, pair.corrupt), metric, false);
  const ResidualRun clean = run_from_residual(params, pair, x_clean, metric, false);

  AttributionResult r;
  r.method = AttributionMethod::ActivationPatch;
  r.pair_label = pair.label;
  r.metric = metric;
  r.graph_fingerprint = graph.fingerprint();
  r.scores.resize(graph.edge_count());
  for (const Edge& e : graph.edges()) {
    const Tensor& wc = clean.writers[e.src];
    Tensor delta = corrupt.writers[e.src];
    for (std::size_t i = 0; i < delta.numel(); ++i) delta[i] -= wc[i];
    const PortDelta patch[] = {{e.dst, std::move(delta)}};
    const ResidualRun patched = run_from_residual(params, pair, x_clean, metric, false, patch);
    r.scores[e.index] = patched.loss - clean.loss;
  }
  return r;
}

bool Circuit::contains(std::size_t edge) const { return std::binary_search(edges.begin(), edges.end(), edge); }

std::set<NodeId> induced_modules(const ComputeGraph& graph, const std::vector<std::size_t>& edges) {
  std::set<NodeId> out;
  for (std::size_t idx : edges) {
    if (idx >= graph.edge_count()) {
      throw ConfigError("edge " + std::to_string(idx) + " does not belong to " + graph.fingerprint());
    }
    const Edge& e = graph.edges()[idx];
    out.insert(graph.src_node(e));
    out.insert(graph.dst_node(e));
  }
  return out;
}

Circuit circuit_from_edges(const ComputeGraph& graph, std::vector<std::size_t> edges, const AttributionResult* result) {
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  if (result && result->scores.size() != graph.edge_count()) {
    throw ConfigError("attribution result does not match " + graph.fingerprint());
  }
  Circuit c;
  c.modules = induced_modules(graph, edges);
  for (std::size_t idx : edges) c.edge_scores.push_back(result ? result->scores[idx] : 0.0);
  c.edges = std::move(edges);
  c.k = c.edges.size();
  c.source = result ? result->identity() : "explicit";
  c.graph_fingerprint = graph.fingerprint();
  return c;
}

namespace {

std::vector<std::size_t> magnitude_order(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(scores[a]) > std::abs(scores[b]); });
  return order;
}

}  // namespace

Circuit prune_top_k(const AttributionResult& result, const ComputeGraph& graph, std::size_t k) {
  if (k < 1) throw ConfigError("top-K pruning needs K >= 1");
  if (result.graph_fingerprint != graph.fingerprint() || result.scores.size() != graph.edge_count()) {
    throw ConfigError("attribution result does not belong to " + graph.fingerprint());
  }
  for (double s : result.scores) {
    if (!std::isfinite(s)) throw NumericError("non-finite attribution score");
  }
  auto order = magnitude_order(result.scores);
  order.resize(std::min(k, order.size()));
  Circuit c = circuit_from_edges(graph, order, &result);
  c.k = k;
  return c;
}

std::size_t k_for_fraction(const ComputeGraph& graph, double fraction) {
  if (!(fraction > 0.0)) throw ConfigError("edge fraction must be positive");
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(graph.edge_count())));
  return std::max<std::size_t>(1, k);
}

std::string Heatmap::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "layer";
  for (int h = 0; h < heads; ++h) os << ",head" << h;
  os << ",mlp\n";
  for (int l = 0; l < layers; ++l) {
    os << l;
    for (double v : cells[static_cast<std::size_t>(l)]) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

Heatmap aggregate_heatmap(const std::vector<AttributionResult>& results, const ComputeGraph& graph) {
  if (results.empty()) throw ConfigError("heatmap needs at least one attribution result");
  const int L = graph.config().layers, H = graph.config().heads;
  Heatmap hm;
  hm.layers = L;
  hm.heads = H;
  hm.cells.assign(static_cast<std::size_t>(L), std::vector<double>(static_cast<std::size_t>(H) + 1, 0.0));
  auto add = [&](NodeId n, double v) {
    if (n.kind == NodeKind::AttnHead) hm.cells[static_cast<std::size_t>(n.layer)][static_cast<std::size_t>(n.head)] += v;
    if (n.kind == NodeKind::Mlp) hm.cells[static_cast<std::size_t>(n.layer)][static_cast<std::size_t>(H)] += v;
  };
  for (const auto& r : results) {
    if (r.graph_fingerprint != graph.fingerprint() || r.scores.size() != graph.edge_count()) {
      throw ConfigError("heatmap mixes results from different graphs");
    }
  }
  for (const auto& r : results) {
    for (const Edge& e : graph.edges()) {
      const double v = std::abs(r.scores[e.index]);
      add(graph.src_node(e), v);
      add(graph.dst_node(e), v);
    }
  }
  const double inv = 1.0 / static_cast<double>(results.size());
  for (auto& row : hm.cells) {
    for (double& v : row) v *= inv;
  }
  return hm;
}

std::string CircuitDiff::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "layer,new_nodes,abs_phi\n";
  for (const auto& l : layers) os << l.layer << ',' << l.new_nodes << ',' << l.abs_phi << '\n';
  return os.str();
}

CircuitDiff circuit_diff(const Circuit& multi, const Circuit& single, const ComputeGraph& graph) {
  if (multi.graph_fingerprint != graph.fingerprint() || single.graph_fingerprint != graph.fingerprint()) {
    throw ConfigError("circuit diff needs two circuits over " + graph.fingerprint());
  }
  const int L = graph.config().layers;
  auto layer_of = [L](NodeId n) {
    if (n.kind == NodeKind::Embedding) return -1;
    if (n.kind == NodeKind::Logits) return L;
    return n.layer;
  };
  CircuitDiff d;
  for (int l = -1; l <= L; ++l) d.layers.push_back({l, 0, 0.0});
  for (const NodeId& n : multi.modules) {
    if (single.modules.count(n)) continue;
    d.new_nodes.push_back(n);
    LayerDiff& row = d.layers[static_cast<std::size_t>(layer_of(n) + 1)];
    ++row.new_nodes;
    for (std::size_t i = 0; i < multi.edges.size(); ++i) {
      const Edge& e = graph.edges()[multi.edges[i]];
      if (graph.src_node(e) == n || graph.dst_node(e) == n) row.abs_phi += std::abs(multi.edge_scores[i]);
    }
  }
  return d;
}

nlohmann::json circuit_to_json(const Circuit& c, const ComputeGraph& graph) {
  if (c.graph_fingerprint != graph.fingerprint()) throw ConfigError("circuit does not belong to " + graph.fingerprint());
  nlohmann::json j;
  j["schema"] = "circuit/1";
  j["graph"] = c.graph_fingerprint;
  j["k"] = c.k;
  j["source"] = c.source;
  j["edges"] = c.edges;
  j["scores"] = c.edge_scores;
  nlohmann::json mods = nlohmann::json::array();
  for (const NodeId& n : c.modules) mods.push_back(to_string(n));
  j["modules"] = mods;
  nlohmann::json named = nlohmann::json::array();
  for (std::size_t idx : c.edges) {
    const Edge& e = graph.edges()[idx];
    named.push_back(to_string(graph.src_node(e)) + "->" + to_string(graph.dst_port(e)));
  }
  j["edge_names"] = named;
  return j;
}

Circuit circuit_from_json(const nlohmann::json& j, const ComputeGraph& graph) {
  if (j.value("schema", "") != "circuit/1") throw IoError("not a circuit/1 document");
  try {
    if (j.at("graph").get<std::string>() != graph.fingerprint()) {
      throw ConfigError("circuit was built for " + j.at("graph").get<std::string>() + ", not " + graph.fingerprint());
    }
    Circuit c;
    c.edges = j.at("edges").get<std::vector<std::size_t>>();
    c.edge_scores = j.at("scores").get<std::vector<double>>();
    if (c.edges.size() != c.edge_scores.size()) throw IoError("circuit edges and scores differ in length");
    if (!std::is_sorted(c.edges.begin(), c.edges.end())) throw IoError("circuit edges are not in ascending order");
    c.modules = induced_modules(graph, c.edges);
    c.k = j.at("k").get<std::size_t>();
    c.source = j.at("source").get<std::string>();
    c.graph_fingerprint = graph.fingerprint();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed circuit/1 document: ") + e.what());
  }
}

nlohmann::json attribution_to_json(const AttributionResult& r) {
  nlohmann::json j;
  j["method"] = to_string(r.method);
  if (r.schedule) j["m"] = r.schedule->steps();
  j["metric"] = to_string(r.metric);
  j["pair"] = r.pair_label;
  j["graph"] = r.graph_fingerprint;
  j["scores"] = r.scores;
  return j;
}

std::string to_dot(const ComputeGraph& graph, const Circuit& circuit, const AttributionResult* scores) {
  if (circuit.graph_fingerprint != graph.fingerprint()) {
    throw ConfigError("circuit does not belong to " + graph.fingerprint());
  }
  DotOverlay overlay;
  overlay.circuit_edges = circuit.edges;
  if (scores) overlay.scores = scores->scores;
  return to_dot(graph, overlay);
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw ConfigError("spearman needs two equal-length samples of size >= 2");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

std::size_t top_k_overlap(const std::vector<double>& a, const std::vector<double>& b, std::size_t k) {
  if (a.size() != b.size()) throw ConfigError("top-k overlap needs equal-length score vectors");
  auto oa = magnitude_order(a), ob = magnitude_order(b);
  k = std::min(k, a.size());
  std::set<std::size_t> sa(oa.begin(), oa.begin() + static_cast<std::ptrdiff_t>(k));
  std::size_t n = 0;
  for (std::size_t i = 0; i < k; ++i) n += sa.count(ob[i]);
  return n;
}

}  // namespace circuitedit
