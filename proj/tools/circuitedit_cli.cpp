// circuitedit: train / discover / edit / eval / sweep / diff / export-dot.
//
// Every subcommand accepts the same run flags. --config names a JSON file in
// the RunConfig layout; flags given on the command line override it.

#include <CLI11.hpp>

#include <filesystem>
#include <functional>
#include <memory>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "circuitedit/errors.hpp"
#include "circuitedit/io.hpp"
#include "circuitedit/pipeline.hpp"

using namespace circuitedit;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

// Flag values land here; an override is applied only if its option was given.
struct Flags {
  RunConfig v;
  std::string config_file;
  std::string variant, metric, discovery_mode, edit_mode, edit_metric;
  std::string out_dir, checkpoint, circuit, adapters, circuit_multi, circuit_single;
  std::vector<std::pair<CLI::Option*, std::function<void(RunConfig&)>>> overrides;

  template <typename T>
  void add(CLI::App* app, const std::string& name, T& slot, std::function<void(RunConfig&)> apply,
           const std::string& help) {
    overrides.emplace_back(app->add_option(name, slot, help), std::move(apply));
  }
};

void add_run_flags(CLI::App* app, Flags& f) {
  app->add_option("--config", f.config_file, "JSON run configuration")->check(CLI::ExistingFile);

  f.add(app, "--layers", f.v.model.layers, [&f](RunConfig& c) { c.model.layers = f.v.model.layers; }, "transformer layers");
  f.add(app, "--heads", f.v.model.heads, [&f](RunConfig& c) { c.model.heads = f.v.model.heads; }, "heads per layer");
  f.add(app, "--d-model", f.v.model.d_model, [&f](RunConfig& c) { c.model.d_model = f.v.model.d_model; }, "residual width");
  f.add(app, "--d-ff", f.v.model.d_ff, [&f](RunConfig& c) { c.model.d_ff = f.v.model.d_ff; }, "MLP hidden width");
  f.add(app, "--max-seq-len", f.v.model.max_seq_len,
        [&f](RunConfig& c) { c.model.max_seq_len = f.v.model.max_seq_len; }, "context length");
  f.add(app, "--model-seed", f.v.model.seed, [&f](RunConfig& c) { c.model.seed = f.v.model.seed; }, "weight init seed");
  f.add(app, "--variant", f.variant,
        [&f](RunConfig& c) { c.model.variant = model_variant_from_string(f.variant); }, "standard | linear");

  f.add(app, "--world-seed", f.v.world.seed, [&f](RunConfig& c) { c.world.seed = f.v.world.seed; }, "fact world seed");
  f.add(app, "--entities-per-type", f.v.world.entities_per_type,
        [&f](RunConfig& c) { c.world.entities_per_type = f.v.world.entities_per_type; }, "entities of each type");
  f.add(app, "--types", f.v.world.types, [&f](RunConfig& c) { c.world.types = f.v.world.types; }, "entity types");
  f.add(app, "--relations", f.v.world.relations, [&f](RunConfig& c) { c.world.relations = f.v.world.relations; },
        "relations");

  f.add(app, "--train-steps", f.v.train.steps, [&f](RunConfig& c) { c.train.steps = f.v.train.steps; },
        "language-model training steps");
  f.add(app, "--train-lr", f.v.train.learning_rate,
        [&f](RunConfig& c) { c.train.learning_rate = f.v.train.learning_rate; }, "training learning rate");
  f.add(app, "--train-clip", f.v.train.clip_norm, [&f](RunConfig& c) { c.train.clip_norm = f.v.train.clip_norm; },
        "training gradient-norm clip");

  f.add(app, "-m,--ig-steps", f.v.ig_steps, [&f](RunConfig& c) { c.ig_steps = f.v.ig_steps; },
        "integrated-gradient steps");
  f.add(app, "--metric", f.metric, [&f](RunConfig& c) { c.metric = loss_metric_from_string(f.metric); },
        "attribution metric: nll | logit-diff");
  f.add(app, "--discovery-mode", f.discovery_mode,
        [&f](RunConfig& c) { c.discovery_mode = prompt_mode_from_string(f.discovery_mode); },
        "discovery prompts: multi-hop | single-hop");
  f.add(app, "-k,--k", f.v.k, [&f](RunConfig& c) { c.k = f.v.k; }, "edges kept (0 = 10% of the graph)");

  f.add(app, "--alpha", f.v.edit.alpha, [&f](RunConfig& c) { c.edit.alpha = f.v.edit.alpha; }, "adapter alpha");
  f.add(app, "--rank", f.v.edit.rank, [&f](RunConfig& c) { c.edit.rank = f.v.edit.rank; }, "adapter rank");
  f.add(app, "--edit-lr", f.v.edit.learning_rate,
        [&f](RunConfig& c) { c.edit.learning_rate = f.v.edit.learning_rate; }, "edit learning rate");
  f.add(app, "--edit-steps", f.v.edit.steps, [&f](RunConfig& c) { c.edit.steps = f.v.edit.steps; }, "edit step budget");
  f.add(app, "--edit-clip", f.v.edit.clip_norm, [&f](RunConfig& c) { c.edit.clip_norm = f.v.edit.clip_norm; },
        "edit gradient-norm clip");
  f.add(app, "--stop-nll", f.v.edit.stop_nll, [&f](RunConfig& c) { c.edit.stop_nll = f.v.edit.stop_nll; },
        "stop editing below this mean NLL");
  f.add(app, "--edit-mode", f.edit_mode, [&f](RunConfig& c) { c.edit.mode = edit_mode_from_string(f.edit_mode); },
        "single-hop | augmented");
  f.add(app, "--edit-metric", f.edit_metric,
        [&f](RunConfig& c) { c.edit.metric = loss_metric_from_string(f.edit_metric); }, "nll | logit-diff");
  f.overrides.emplace_back(app->add_flag("--coarse", f.v.edit.coarse, "adapt all of Q/K/V for touched heads"),
                           [&f](RunConfig& c) { c.edit.coarse = f.v.edit.coarse; });
  f.add(app, "--strategy", f.v.strategy, [&f](RunConfig& c) { c.strategy = f.v.strategy; },
        "circuit | full-graph | only-mlps | random-edges | all");
  f.add(app, "--seed", f.v.seed, [&f](RunConfig& c) { c.seed = f.v.seed; }, "edit / corruption seed");
  f.add(app, "--k-fractions", f.v.k_fractions, [&f](RunConfig& c) { c.k_fractions = f.v.k_fractions; },
        "sweep K fractions");
  f.add(app, "--sweep-seeds", f.v.sweep_seeds, [&f](RunConfig& c) { c.sweep_seeds = f.v.sweep_seeds; },
        "sweep edit seeds");

  f.add(app, "-o,--out", f.out_dir, [&f](RunConfig& c) { c.out_dir = f.out_dir; }, "output directory");
  f.add(app, "--checkpoint", f.checkpoint, [&f](RunConfig& c) { c.checkpoint = f.checkpoint; },
        "model checkpoint (default <out>/model.ckpt)");
  f.add(app, "--circuit", f.circuit, [&f](RunConfig& c) { c.circuit = f.circuit; },
        "circuit JSON (default <out>/circuit.json)");
  f.add(app, "--adapters", f.adapters, [&f](RunConfig& c) { c.adapters = f.adapters; }, "adapters to evaluate");
  f.add(app, "--multi", f.circuit_multi, [&f](RunConfig& c) { c.circuit_multi = f.circuit_multi; },
        "multi-hop circuit for diff");
  f.add(app, "--single", f.circuit_single, [&f](RunConfig& c) { c.circuit_single = f.circuit_single; },
        "single-hop circuit for diff");
}

RunConfig resolve(const Flags& f) {
  RunConfig cfg;
  if (!f.config_file.empty()) {
    nlohmann::json doc;
    try {
      doc = read_json(f.config_file);
    } catch (const IoError& e) {
      throw ConfigError(e.what());
    }
    cfg.merge_json(doc);
  }
  for (const auto& [opt, apply] : f.overrides) {
    if (opt->count() > 0) apply(cfg);
  }
  cfg.validate();
  return cfg;
}

void print_common(const CommandOutput& out) {
  for (const auto& w : out.warnings) std::cerr << "warning: " << w << '\n';
  for (const auto& p : out.files) std::cout << "wrote " << p.string() << '\n';
}

void print_report(const std::string& name, const EvalReport& r) {
  std::cout << name << ": S-Acc " << r.single_hop << "  M-Acc " << r.multi_hop << "  locality delta "
            << r.locality_delta << (r.empty_plan ? "  (empty plan)" : "") << '\n';
}

int run(const std::string& command, const RunConfig& cfg) {
  if (command == "train") {
    const auto out = cmd_train(cfg);
    print_common(out);
    std::cout << "training accuracy " << out.accuracy << '\n';
  } else if (command == "discover") {
    const auto out = cmd_discover(cfg);
    print_common(out);
    std::cout << "kept " << out.circuit.edges.size() << " edges, " << out.circuit.modules.size() << " modules\n";
  } else if (command == "edit") {
    const auto out = cmd_edit(cfg);
    print_common(out);
    for (const auto& r : out.runs) print_report(r.strategy, r.report);
  } else if (command == "eval") {
    const auto out = cmd_eval(cfg);
    print_common(out);
    print_report(cfg.adapters.empty() ? "unedited" : "edited", out.report);
  } else if (command == "sweep") {
    const auto out = cmd_sweep(cfg);
    print_common(out);
    std::cout << "plateau " << (out.plateau ? "yes" : "no") << '\n';
  } else if (command == "diff") {
    const auto out = cmd_diff(cfg);
    print_common(out);
    std::cout << out.diff.new_nodes.size() << " nodes only in the multi-hop circuit\n";
  } else {
    print_common(cmd_export_dot(cfg));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Circuit discovery and circuit-targeted editing on a toy fact world"};
  app.require_subcommand(1);

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"train", "train the toy transformer on the fact world"},
      {"discover", "score edges with EAP-IG and keep the top K"},
      {"edit", "apply a counterfactual edit with low-rank adapters"},
      {"eval", "evaluate the unedited or an edited model"},
      {"sweep", "edit with circuits of several sizes"},
      {"diff", "nodes of the multi-hop circuit absent from the single-hop one"},
      {"export-dot", "write the computational graph in DOT"},
  };
  std::vector<std::unique_ptr<Flags>> flags;
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    flags.push_back(std::make_unique<Flags>());
    add_run_flags(sub, *flags.back());
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  for (std::size_t i = 0; i < commands.size(); ++i) {
    if (!app.got_subcommand(commands[i].first)) continue;
    try {
      return run(commands[i].first, resolve(*flags[i]));
    } catch (const ConfigError& e) {
      std::cerr << "config error: " << e.what() << '\n';
      return kExitConfig;
    } catch (const NumericError& e) {
      std::cerr << "numeric failure: " << e.what() << '\n';
      return kExitNumeric;
    } catch (const IoError& e) {
      std::cerr << "i/o error: " << e.what() << '\n';
      return kExitIo;
    } catch (const std::filesystem::filesystem_error& e) {
      std::cerr << "i/o error: " << e.what() << '\n';
      return kExitIo;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return 1;
    }
  }
  return kExitConfig;
}
