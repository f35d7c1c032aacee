#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "circuitedit/attribution.hpp"
#include "circuitedit/editor.hpp"
#include "circuitedit/eval.hpp"
#include "circuitedit/fact_world.hpp"
#include "circuitedit/model.hpp"

namespace circuitedit {

// Everything a run depends on. Paths are excluded from the fingerprint so the
// same experiment written to two directories produces identical files.
struct RunConfig {
  ModelConfig model;  // vocab is derived from the world
  WorldConfig world;
  LmTrainConfig train{1200, 0.5, 1.0};
  int ig_steps = 5;
  LossMetric metric = LossMetric::Nll;
  PromptMode discovery_mode = PromptMode::MultiHop;
  std::size_t k = 0;  // 0 selects 10% of the edge count
  EditConfig edit;
  std::string strategy = "circuit";  // a PlanStrategy name or "all"
  std::uint64_t seed = 0;            // picks the edit, the corruption and the adapter init
  std::vector<double> k_fractions{0.01, 0.05, 0.10, 0.25, 0.50};
  std::vector<std::uint64_t> sweep_seeds{0, 1, 2, 3, 4};

  std::filesystem::path out_dir = "out";
  std::filesystem::path checkpoint;  // default <out>/model.ckpt
  std::filesystem::path circuit;     // default <out>/circuit.json
  std::filesystem::path adapters;    // eval: optional edited model
  std::filesystem::path circuit_multi;
  std::filesystem::path circuit_single;

  void validate() const;
  nlohmann::json to_json(bool include_paths = true) const;
  // Keys absent from j keep their current value; unknown keys are rejected.
  void merge_json(const nlohmann::json& j);
  std::string fingerprint() const;

  std::filesystem::path checkpoint_path() const;
  std::filesystem::path circuit_path() const;
};

// World, vocabulary and graph shared by every command.
struct RunContext {
  RunConfig config;
  FactGraph world;
  Vocabulary vocab;
  ModelConfig model;
  ComputeGraph graph;
  std::string fingerprint;

  explicit RunContext(const RunConfig& cfg);
  std::size_t k() const;
  EditRequest edit_request(std::uint64_t seed) const;
  PromptPair discovery_pair(std::uint64_t seed) const;
};

struct CommandOutput {
  std::vector<std::filesystem::path> files;
  std::vector<std::string> warnings;
};

struct TrainOutput : CommandOutput {
  Parameters params;
  double accuracy = 0.0;
};
TrainOutput cmd_train(const RunConfig& cfg);

struct DiscoverOutput : CommandOutput {
  AttributionResult attribution;
  Circuit circuit;
};
// In-memory discovery for one edit seed; no files.
DiscoverOutput discover(const RunContext& ctx, const Parameters& params, std::uint64_t seed, std::size_t k);
DiscoverOutput cmd_discover(const RunConfig& cfg);

struct EditRun {
  std::string strategy;
  EditPlan plan;
  EditResult result;  // empty when the plan targets nothing
  EvalReport report;
};
// Builds the plan for strategy, trains (unless the plan is empty) and evaluates.
EditRun run_edit(const RunContext& ctx, const Parameters& params, const Circuit& reference, PlanStrategy strategy,
                 std::uint64_t seed);

struct EditOutput : CommandOutput {
  std::vector<EditRun> runs;
};
EditOutput cmd_edit(const RunConfig& cfg);

struct EvalOutput : CommandOutput {
  EvalReport report;
};
EvalOutput cmd_eval(const RunConfig& cfg);

struct SweepRow {
  double fraction = 0.0;
  std::size_t k = 0;
  std::uint64_t seed = 0;
  EvalReport report;
};
struct SweepOutput : CommandOutput {
  std::vector<SweepRow> rows;  // sorted by (k, seed)
  bool plateau = false;        // mean M-Acc at the largest K >= at the smallest K
};
SweepOutput cmd_sweep(const RunConfig& cfg);
bool sweep_plateau(const std::vector<SweepRow>& rows);

struct DiffOutput : CommandOutput {
  CircuitDiff diff;
};
DiffOutput cmd_diff(const RunConfig& cfg);

CommandOutput cmd_export_dot(const RunConfig& cfg);

// "# schema=<schema> run=<fingerprint>" header line for CSV outputs.
std::string csv_preamble(const std::string& schema, const std::string& fingerprint);

}  // namespace circuitedit
