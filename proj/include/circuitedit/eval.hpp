#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "circuitedit/fact_world.hpp"
#include "circuitedit/model.hpp"

namespace circuitedit {

using Predictor = std::function<int(std::span<const int>)>;
Predictor predictor_for(const Parameters& params);

struct EvalReport {
  double single_hop = 0.0;
  double multi_hop = 0.0;
  std::map<int, double> multi_hop_per_hop;
  std::size_t single_hop_count = 0;
  std::map<int, std::size_t> multi_hop_counts;
  std::size_t locality_count = 0;
  double locality_pre = 0.0;   // ground-truth accuracy of the unedited model
  double locality_post = 0.0;  // ground-truth accuracy of the edited model
  double locality_delta = 0.0; // pre - post
  double locality_agreement = 0.0;  // fraction of post answers equal to pre answers
  double reasoning_gap = 0.0;  // single_hop - multi_hop
  bool empty_plan = false;     // the edit had nothing to train; the unedited model was evaluated

  std::size_t multi_hop_count() const;
};

// pre answers the locality set as the unedited model; post is the model under test.
EvalReport evaluate(const Predictor& pre, const Predictor& post, const EvalSets& sets);
EvalReport evaluate(const Parameters& pre, const Parameters& post, const EvalSets& sets);

// Question-weighted M-Acc from per-hop accuracies and counts.
double weighted_multi_hop(const std::map<int, double>& per_hop, const std::map<int, std::size_t>& counts);

// Per-field mean over seeds; hop counts are summed and per-hop accuracies re-weighted.
EvalReport mean_report(const std::vector<EvalReport>& reports);

nlohmann::json report_to_json(const EvalReport& r);
EvalReport report_from_json(const nlohmann::json& j);
std::string report_csv_header();
std::string report_csv_row(const EvalReport& r);

struct StrategyTable {
  std::vector<std::pair<std::string, EvalReport>> rows;  // input order
  std::vector<std::string> ordering;                     // by M-Acc descending, ties keep input order
  // sign(M-Acc[i] - M-Acc[j]) in {-1, 0, 1}
  std::vector<std::vector<int>> signs;
  std::string to_csv() const;
};
StrategyTable compare_strategies(const std::vector<std::pair<std::string, EvalReport>>& reports);

}  // namespace circuitedit
