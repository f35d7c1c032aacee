#include "circuitedit/pipeline.hpp"

#include <algorithm>
#include <map>
#include <sstream>

#include "circuitedit/errors.hpp"
#include "circuitedit/io.hpp"

namespace circuitedit {

namespace fs = std::filesystem;

namespace {

template <typename T>
void take(const nlohmann::json& obj, const char* key, T& target, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    target = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config field " + where + "." + key + " has the wrong type");
  }
}

void reject_unknown(const nlohmann::json& obj, std::initializer_list<const char*> known, const std::string& where) {
  if (!obj.is_object()) throw ConfigError("config section '" + where + "' must be an object");
  for (const auto& [key, value] : obj.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError("unknown config field " + where + "." + key);
    }
  }
}

std::string take_string(const nlohmann::json& obj, const char* key, const std::string& current,
                        const std::string& where) {
  std::string s = current;
  take(obj, key, s, where);
  return s;
}

}  // namespace

void RunConfig::validate() const {
  ModelConfig m = model;
  m.vocab = std::max(m.vocab, 1);
  m.validate();
  if (train.steps < 0) throw ConfigError("train steps must be >= 0");
  if (!(train.learning_rate > 0.0)) throw ConfigError("train learning rate must be positive");
  if (ig_steps < 1) throw ConfigError("interpolation steps must be >= 1");
  edit.validate();
  if (strategy != "all") plan_strategy_from_string(strategy);
  if (k_fractions.empty()) throw ConfigError("sweep needs at least one K fraction");
  for (double f : k_fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("K fractions must lie in (0, 1]");
  }
  if (sweep_seeds.empty()) throw ConfigError("sweep needs at least one seed");
}

nlohmann::json RunConfig::to_json(bool include_paths) const {
  nlohmann::json j;
  j["model"] = {{"layers", model.layers},     {"heads", model.heads},
                {"d_model", model.d_model},   {"d_ff", model.d_ff},
                {"max_seq_len", model.max_seq_len}, {"seed", model.seed},
                {"variant", to_string(model.variant)}};
  j["world"] = {{"seed", world.seed},
                {"entities_per_type", world.entities_per_type},
                {"types", world.types},
                {"relations", world.relations}};
  j["train"] = {{"steps", train.steps}, {"learning_rate", train.learning_rate}, {"clip_norm", train.clip_norm}};
  j["attribution"] = {{"m", ig_steps}, {"metric", to_string(metric)}, {"discovery_mode", to_string(discovery_mode)}};
  j["k"] = k;
  j["edit"] = {{"alpha", edit.alpha},
               {"rank", edit.rank},
               {"learning_rate", edit.learning_rate},
               {"steps", edit.steps},
               {"clip_norm", edit.clip_norm},
               {"stop_nll", edit.stop_nll},
               {"mode", to_string(edit.mode)},
               {"metric", to_string(edit.metric)},
               {"coarse", edit.coarse}};
  j["strategy"] = strategy;
  j["seed"] = seed;
  j["sweep"] = {{"k_fractions", k_fractions}, {"seeds", sweep_seeds}};
  if (include_paths) {
    j["paths"] = {{"out", out_dir.string()},
                  {"checkpoint", checkpoint.string()},
                  {"circuit", circuit.string()},
                  {"adapters", adapters.string()},
                  {"circuit_multi", circuit_multi.string()},
                  {"circuit_single", circuit_single.string()}};
  }
  return j;
}

void RunConfig::merge_json(const nlohmann::json& j) {
  reject_unknown(j, {"model", "world", "train", "attribution", "k", "edit", "strategy", "seed", "sweep", "paths"},
                 "config");
  if (j.contains("model")) {
    const auto& m = j["model"];
    reject_unknown(m, {"layers", "heads", "d_model", "d_ff", "max_seq_len", "seed", "variant"}, "model");
    take(m, "layers", model.layers, "model");
    take(m, "heads", model.heads, "model");
    take(m, "d_model", model.d_model, "model");
    take(m, "d_ff", model.d_ff, "model");
    take(m, "max_seq_len", model.max_seq_len, "model");
    take(m, "seed", model.seed, "model");
    model.variant = model_variant_from_string(take_string(m, "variant", to_string(model.variant), "model"));
  }
  if (j.contains("world")) {
    const auto& w = j["world"];
    reject_unknown(w, {"seed", "entities_per_type", "types", "relations"}, "world");
    take(w, "seed", world.seed, "world");
    take(w, "entities_per_type", world.entities_per_type, "world");
    take(w, "types", world.types, "world");
    take(w, "relations", world.relations, "world");
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    reject_unknown(t, {"steps", "learning_rate", "clip_norm"}, "train");
    take(t, "steps", train.steps, "train");
    take(t, "learning_rate", train.learning_rate, "train");
    take(t, "clip_norm", train.clip_norm, "train");
  }
  if (j.contains("attribution")) {
    const auto& a = j["attribution"];
    reject_unknown(a, {"m", "metric", "discovery_mode"}, "attribution");
    take(a, "m", ig_steps, "attribution");
    metric = loss_metric_from_string(take_string(a, "metric", to_string(metric), "attribution"));
    discovery_mode =
        prompt_mode_from_string(take_string(a, "discovery_mode", to_string(discovery_mode), "attribution"));
  }
  take(j, "k", k, "config");
  if (j.contains("edit")) {
    const auto& e = j["edit"];
    reject_unknown(e, {"alpha", "rank", "learning_rate", "steps", "clip_norm", "stop_nll", "mode", "metric", "coarse"},
                   "edit");
    take(e, "alpha", edit.alpha, "edit");
    take(e, "rank", edit.rank, "edit");
    take(e, "learning_rate", edit.learning_rate, "edit");
    take(e, "steps", edit.steps, "edit");
    take(e, "clip_norm", edit.clip_norm, "edit");
    take(e, "stop_nll", edit.stop_nll, "edit");
    edit.mode = edit_mode_from_string(take_string(e, "mode", to_string(edit.mode), "edit"));
    edit.metric = loss_metric_from_string(take_string(e, "metric", to_string(edit.metric), "edit"));
    take(e, "coarse", edit.coarse, "edit");
  }
  take(j, "strategy", strategy, "config");
  take(j, "seed", seed, "config");
  if (j.contains("sweep")) {
    const auto& s = j["sweep"];
    reject_unknown(s, {"k_fractions", "seeds"}, "sweep");
    take(s, "k_fractions", k_fractions, "sweep");
    take(s, "seeds", sweep_seeds, "sweep");
  }
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    reject_unknown(p, {"out", "checkpoint", "circuit", "adapters", "circuit_multi", "circuit_single"}, "paths");
    auto path = [&](const char* key, fs::path& target) {
      std::string s = target.string();
      take(p, key, s, "paths");
      target = s;
    };
    path("out", out_dir);
    path("checkpoint", checkpoint);
    path("circuit", circuit);
    path("adapters", adapters);
    path("circuit_multi", circuit_multi);
    path("circuit_single", circuit_single);
  }
}

std::string RunConfig::fingerprint() const { return hex64(fnv1a(to_json(false).dump())); }

fs::path RunConfig::checkpoint_path() const { return checkpoint.empty() ? out_dir / "model.ckpt" : checkpoint; }
fs::path RunConfig::circuit_path() const { return circuit.empty() ? out_dir / "circuit.json" : circuit; }

namespace {

FactGraph make_world(const RunConfig& cfg) {
  cfg.validate();
  return generate_world(cfg.world);
}

ModelConfig derive_model(const RunConfig& cfg, const Vocabulary& vocab) {
  ModelConfig m = cfg.model;
  m.vocab = static_cast<int>(vocab.size());
  m.validate();
  // subject, "is", answer
  const int longest = static_cast<int>(subject_position(FactGraph::kMaxHops)) + 3;
  if (m.max_seq_len < longest) {
    throw ConfigError("max_seq_len " + std::to_string(m.max_seq_len) + " is shorter than the " +
                      std::to_string(longest) + "-token 4-hop sentence");
  }
  return m;
}

nlohmann::json stamped(nlohmann::json j, const std::string& schema, const RunContext& ctx) {
  j["schema"] = schema;
  j["run_fingerprint"] = ctx.fingerprint;
  return j;
}

Parameters load_model(const RunContext& ctx) {
  LoadedCheckpoint ck = load_checkpoint(ctx.config.checkpoint_path());
  if (!(ck.params.config == ctx.model)) {
    throw ConfigError("checkpoint " + ctx.config.checkpoint_path().string() +
                      " was trained for a different model or world configuration");
  }
  return std::move(ck.params);
}

}  // namespace

RunContext::RunContext(const RunConfig& cfg)
    : config(cfg),
      world(make_world(cfg)),
      vocab(Vocabulary::for_world(world)),
      model(derive_model(cfg, vocab)),
      graph(model),
      fingerprint(cfg.fingerprint()) {}

std::size_t RunContext::k() const { return config.k > 0 ? config.k : k_for_fraction(graph, 0.10); }

EditRequest RunContext::edit_request(std::uint64_t seed) const { return sample_edit(world, seed); }

PromptPair RunContext::discovery_pair(std::uint64_t seed) const {
  const EditRequest edit = edit_request(seed);
  return make_prompt_pair(world, vocab, discovery_chain(world, edit), config.discovery_mode, seed);
}

std::string csv_preamble(const std::string& schema, const std::string& fingerprint) {
  return "# schema=" + schema + " run=" + fingerprint + "\n";
}

TrainOutput cmd_train(const RunConfig& cfg) {
  RunContext ctx(cfg);
  TrainOutput out;
  const auto corpus = training_corpus(ctx.world, ctx.vocab);
  LmTrainResult trained = train_lm(init_params(ctx.model), corpus, cfg.train);
  out.params = std::move(trained.params);
  out.accuracy = next_token_accuracy(out.params, corpus);
  const double single = next_token_accuracy(out.params, render_corpus(ctx.world, ctx.vocab));

  const fs::path ckpt = cfg.checkpoint_path();
  save_checkpoint(ckpt, out.params, {{"run_fingerprint", ctx.fingerprint}, {"run_config", cfg.to_json(false)}});
  out.files.push_back(ckpt);

  nlohmann::json report;
  report["steps"] = cfg.train.steps;
  report["final_loss"] = trained.loss_curve.empty() ? nlohmann::json() : nlohmann::json(trained.loss_curve.back());
  report["training_accuracy"] = out.accuracy;
  report["single_hop_accuracy"] = single;
  report["sequences"] = corpus.size();
  report["loss_curve"] = trained.loss_curve;
  write_json(cfg.out_dir / "train_report.json", stamped(report, "train-report/1", ctx));
  out.files.push_back(cfg.out_dir / "train_report.json");

  nlohmann::json world = world_to_json(ctx.world);
  world["run_fingerprint"] = ctx.fingerprint;
  write_json(cfg.out_dir / "world.json", world);
  out.files.push_back(cfg.out_dir / "world.json");
  if (out.accuracy < 0.95) {
    out.warnings.push_back("training accuracy " + std::to_string(out.accuracy) + " is below 0.95");
  }
  return out;
}

DiscoverOutput discover(const RunContext& ctx, const Parameters& params, std::uint64_t seed, std::size_t k) {
  DiscoverOutput out;
  const PromptPair pair = ctx.discovery_pair(seed);
  out.attribution =
      eap_ig_scores(params, ctx.graph, pair, InterpolationSchedule(ctx.config.ig_steps), ctx.config.metric);
  if (k > ctx.graph.edge_count()) {
    out.warnings.push_back("K=" + std::to_string(k) + " exceeds the " + std::to_string(ctx.graph.edge_count()) +
                           " edges of the graph; the circuit is the full edge set");
  }
  out.circuit = prune_top_k(out.attribution, ctx.graph, k);
  return out;
}

DiscoverOutput cmd_discover(const RunConfig& cfg) {
  RunContext ctx(cfg);
  const Parameters params = load_model(ctx);
  DiscoverOutput out = discover(ctx, params, cfg.seed, ctx.k());

  nlohmann::json doc = circuit_to_json(out.circuit, ctx.graph);
  doc["run_fingerprint"] = ctx.fingerprint;
  doc["seed"] = cfg.seed;
  doc["edit"] = edit_to_json(ctx.edit_request(cfg.seed));
  doc["attribution"] = attribution_to_json(out.attribution);
  const fs::path circuit_file = cfg.circuit_path();
  write_json(circuit_file, doc);
  out.files.push_back(circuit_file);

  const Heatmap hm = aggregate_heatmap({out.attribution}, ctx.graph);
  write_file_atomic(cfg.out_dir / "heatmap.csv", csv_preamble("heatmap/1", ctx.fingerprint) + hm.to_csv());
  out.files.push_back(cfg.out_dir / "heatmap.csv");

  write_file_atomic(cfg.out_dir / "circuit.dot", "// schema=dot/1 run=" + ctx.fingerprint + "\n" +
                                                     to_dot(ctx.graph, out.circuit, &out.attribution));
  out.files.push_back(cfg.out_dir / "circuit.dot");
  return out;
}

EditRun run_edit(const RunContext& ctx, const Parameters& params, const Circuit& reference, PlanStrategy strategy,
                 std::uint64_t seed) {
  EditRun run;
  run.strategy = to_string(strategy);
  const bool coarse = ctx.config.edit.coarse;
  switch (strategy) {
    case PlanStrategy::Circuit: run.plan = plan_from_edges(ctx.graph, reference.edges, strategy, coarse); break;
    case PlanStrategy::FullGraph: run.plan = full_graph_plan(ctx.model); break;
    case PlanStrategy::OnlyMlps: run.plan = only_mlps_plan(ctx.model); break;
    case PlanStrategy::RandomEdges:
      run.plan = random_edges_plan(ctx.graph, reference.edges.size(), seed, coarse);
      break;
  }
  const EditRequest edit = ctx.edit_request(seed);
  const EvalSets sets = make_eval_sets(ctx.world, ctx.vocab, edit);
  if (run.plan.empty()) {
    run.result.adapters.alpha = ctx.config.edit.alpha;
    run.result.adapters.rank = ctx.config.edit.rank;
    run.report = evaluate(params, params, sets);
    run.report.empty_plan = true;
    return run;
  }
  run.result = train_edit(params, run.plan, ctx.config.edit, edit_samples(sets, ctx.config.edit.mode), seed);
  run.report = evaluate(params, merge(params, run.result.adapters), sets);
  return run;
}

namespace {

Circuit reference_circuit(const RunContext& ctx, const Parameters& params, std::vector<std::string>& warnings) {
  const fs::path path = ctx.config.circuit_path();
  if (!fs::exists(path)) {
    warnings.push_back("no circuit file at " + path.string() + "; discovering the circuit in memory");
    DiscoverOutput d = discover(ctx, params, ctx.config.seed, ctx.k());
    for (auto& w : d.warnings) warnings.push_back(std::move(w));
    return d.circuit;
  }
  const nlohmann::json doc = read_json(path);
  if (doc.contains("seed") && doc["seed"] != ctx.config.seed) {
    throw ConfigError("circuit " + path.string() + " was discovered for seed " + doc["seed"].dump() +
                      ", not for seed " + std::to_string(ctx.config.seed));
  }
  return circuit_from_json(doc, ctx.graph);
}

nlohmann::json edit_run_json(const EditRun& run) {
  nlohmann::json j;
  j["strategy"] = run.strategy;
  j["plan"] = plan_to_json(run.plan);
  j["steps_run"] = run.result.steps_run;
  j["final_nll"] = run.result.nll_curve.empty() ? nlohmann::json() : nlohmann::json(run.result.nll_curve.back());
  j["loss_curve"] = run.result.loss_curve;
  j["report"] = report_to_json(run.report);
  return j;
}

}  // namespace

EditOutput cmd_edit(const RunConfig& cfg) {
  RunContext ctx(cfg);
  const Parameters params = load_model(ctx);
  EditOutput out;
  std::vector<PlanStrategy> strategies;
  if (cfg.strategy == "all") {
    strategies = {PlanStrategy::Circuit, PlanStrategy::FullGraph, PlanStrategy::OnlyMlps, PlanStrategy::RandomEdges};
  } else {
    strategies = {plan_strategy_from_string(cfg.strategy)};
  }
  const bool needs_reference = std::any_of(strategies.begin(), strategies.end(), [](PlanStrategy s) {
    return s == PlanStrategy::Circuit || s == PlanStrategy::RandomEdges;
  });
  Circuit reference;
  if (needs_reference) reference = reference_circuit(ctx, params, out.warnings);
  if (cfg.strategy == "circuit") plan_from_circuit(ctx.graph, reference, cfg.edit.coarse);

  std::vector<std::pair<std::string, EvalReport>> table;
  for (PlanStrategy s : strategies) {
    EditRun run = run_edit(ctx, params, reference, s, cfg.seed);
    if (run.report.empty_plan) out.warnings.push_back(run.strategy + " plan targets no matrix; evaluated unedited");
    const fs::path adapters = cfg.out_dir / ("adapters_" + run.strategy + ".ckpt");
    save_adapters(adapters, ctx.model, run.result.adapters, run.plan,
                  {{"run_fingerprint", ctx.fingerprint}, {"seed", cfg.seed}});
    out.files.push_back(adapters);
    const fs::path report = cfg.out_dir / ("edit_report_" + run.strategy + ".json");
    write_json(report, stamped(edit_run_json(run), "edit-report/1", ctx));
    out.files.push_back(report);
    table.emplace_back(run.strategy, run.report);
    out.runs.push_back(std::move(run));
  }
  const fs::path csv = cfg.out_dir / "strategies.csv";
  write_file_atomic(csv, csv_preamble("strategies/1", ctx.fingerprint) + compare_strategies(table).to_csv());
  out.files.push_back(csv);
  return out;
}

EvalOutput cmd_eval(const RunConfig& cfg) {
  RunContext ctx(cfg);
  const Parameters params = load_model(ctx);
  const EvalSets sets = make_eval_sets(ctx.world, ctx.vocab, ctx.edit_request(cfg.seed));
  EvalOutput out;
  nlohmann::json doc;
  if (cfg.adapters.empty()) {
    out.report = evaluate(params, params, sets);
    doc["adapters"] = nullptr;
  } else {
    LoadedAdapters ad = load_adapters(cfg.adapters);
    if (!(ad.model == ctx.model)) throw ConfigError("adapters were trained for a different model");
    out.report = evaluate(params, merge(params, ad.adapters), sets);
    doc["adapters"] = cfg.adapters.filename().string();
    doc["plan"] = plan_to_json(ad.plan);
  }
  doc["seed"] = cfg.seed;
  doc["report"] = report_to_json(out.report);
  write_json(cfg.out_dir / "eval_report.json", stamped(doc, "eval-report/1", ctx));
  out.files.push_back(cfg.out_dir / "eval_report.json");
  return out;
}

bool sweep_plateau(const std::vector<SweepRow>& rows) {
  if (rows.empty()) throw ConfigError("empty sweep");
  std::map<std::size_t, std::pair<double, std::size_t>> by_k;
  for (const auto& r : rows) {
    by_k[r.k].first += r.report.multi_hop;
    ++by_k[r.k].second;
  }
  const auto lo = by_k.begin()->second, hi = by_k.rbegin()->second;
  return hi.first / static_cast<double>(hi.second) >= lo.first / static_cast<double>(lo.second);
}

SweepOutput cmd_sweep(const RunConfig& cfg) {
  RunContext ctx(cfg);
  const Parameters params = load_model(ctx);
  SweepOutput out;
  for (std::uint64_t seed : cfg.sweep_seeds) {
    const DiscoverOutput d = discover(ctx, params, seed, 1);
    for (double f : cfg.k_fractions) {
      const std::size_t k = k_for_fraction(ctx.graph, f);
      const Circuit c = prune_top_k(d.attribution, ctx.graph, k);
      EditRun run = run_edit(ctx, params, c, PlanStrategy::Circuit, seed);
      if (run.report.empty_plan) {
        out.warnings.push_back("K=" + std::to_string(k) + " seed " + std::to_string(seed) +
                               ": circuit targets no matrix; evaluated unedited");
      }
      out.rows.push_back({f, k, seed, run.report});
    }
  }
  std::stable_sort(out.rows.begin(), out.rows.end(), [](const SweepRow& a, const SweepRow& b) {
    return a.k != b.k ? a.k < b.k : a.seed < b.seed;
  });
  out.plateau = sweep_plateau(out.rows);

  std::ostringstream csv;
  csv.precision(17);
  csv << csv_preamble("sweep/1", ctx.fingerprint) << "k_fraction,k,seed," << report_csv_header() << '\n';
  for (const auto& r : out.rows) csv << r.fraction << ',' << r.k << ',' << r.seed << ',' << report_csv_row(r.report) << '\n';
  write_file_atomic(cfg.out_dir / "sweep.csv", csv.str());
  out.files.push_back(cfg.out_dir / "sweep.csv");

  std::map<std::size_t, std::vector<EvalReport>> by_k;
  for (const auto& r : out.rows) by_k[r.k].push_back(r.report);
  nlohmann::json mean = nlohmann::json::array();
  for (const auto& [k, reports] : by_k) mean.push_back({{"k", k}, {"report", report_to_json(mean_report(reports))}});
  nlohmann::json summary;
  summary["mean_by_k"] = mean;
  summary["m_acc_at_max_k_ge_min_k"] = out.plateau;
  write_json(cfg.out_dir / "sweep_summary.json", stamped(summary, "sweep-summary/1", ctx));
  out.files.push_back(cfg.out_dir / "sweep_summary.json");
  return out;
}

DiffOutput cmd_diff(const RunConfig& cfg) {
  if (cfg.circuit_multi.empty() || cfg.circuit_single.empty()) {
    throw ConfigError("diff needs both a multi-hop and a single-hop circuit file");
  }
  RunContext ctx(cfg);
  const Circuit multi = circuit_from_json(read_json(cfg.circuit_multi), ctx.graph);
  const Circuit single = circuit_from_json(read_json(cfg.circuit_single), ctx.graph);
  DiffOutput out;
  out.diff = circuit_diff(multi, single, ctx.graph);
  write_file_atomic(cfg.out_dir / "diff.csv", csv_preamble("circuit-diff/1", ctx.fingerprint) + out.diff.to_csv());
  out.files.push_back(cfg.out_dir / "diff.csv");
  return out;
}

CommandOutput cmd_export_dot(const RunConfig& cfg) {
  RunContext ctx(cfg);
  CommandOutput out;
  std::string dot;
  if (cfg.circuit.empty()) {
    dot = to_dot(ctx.graph);
  } else {
    const nlohmann::json doc = read_json(cfg.circuit);
    const Circuit c = circuit_from_json(doc, ctx.graph);
    DotOverlay overlay;
    overlay.circuit_edges = c.edges;
    if (doc.contains("attribution")) overlay.scores = doc["attribution"].at("scores").get<std::vector<double>>();
    dot = to_dot(ctx.graph, overlay);
  }
  write_file_atomic(cfg.out_dir / "graph.dot", "// schema=dot/1 run=" + ctx.fingerprint + "\n" + dot);
  out.files.push_back(cfg.out_dir / "graph.dot");
  write_file_atomic(cfg.out_dir / "graph_summary.csv",
                    csv_preamble("graph-summary/1", ctx.fingerprint) + graph_summary_csv(ctx.graph));
  out.files.push_back(cfg.out_dir / "graph_summary.csv");
  return out;
}

}  // namespace circuitedit
