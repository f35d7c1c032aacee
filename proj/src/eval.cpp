#include "circuitedit/eval.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "circuitedit/errors.hpp"

namespace circuitedit {

Predictor predictor_for(const Parameters& params) {
  return [&params](std::span<const int> prompt) { return predict_token(params, prompt); };
}

std::size_t EvalReport::multi_hop_count() const {
  std::size_t n = 0;
  for (const auto& [hops, c] : multi_hop_counts) n += c;
  return n;
}

double weighted_multi_hop(const std::map<int, double>& per_hop, const std::map<int, std::size_t>& counts) {
  double num = 0.0;
  std::size_t den = 0;
  for (const auto& [hops, acc] : per_hop) {
    const auto it = counts.find(hops);
    if (it == counts.end()) throw ConfigError("no question count for " + std::to_string(hops) + "-hop accuracy");
    num += acc * static_cast<double>(it->second);
    den += it->second;
  }
  if (den == 0) throw ConfigError("multi-hop accuracy over zero questions");
  return num / static_cast<double>(den);
}

namespace {

double accuracy(const Predictor& model, const std::vector<EvalPrompt>& set) {
  std::size_t correct = 0;
  for (const auto& p : set) correct += model(p.prompt) == p.answer ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

}  // namespace

EvalReport evaluate(const Predictor& pre, const Predictor& post, const EvalSets& sets) {
  if (sets.single_hop.empty()) throw ConfigError("single-hop evaluation set is empty");
  if (sets.multi_hop_total() == 0) throw ConfigError("multi-hop evaluation set is empty");
  if (sets.locality.empty()) throw ConfigError("locality set is empty");

  EvalReport r;
  r.single_hop = accuracy(post, sets.single_hop);
  r.single_hop_count = sets.single_hop.size();
  for (const auto& [hops, set] : sets.multi_hop) {
    if (set.empty()) continue;
    r.multi_hop_per_hop[hops] = accuracy(post, set);
    r.multi_hop_counts[hops] = set.size();
  }
  r.multi_hop = weighted_multi_hop(r.multi_hop_per_hop, r.multi_hop_counts);

  std::size_t pre_ok = 0, post_ok = 0, agree = 0;
  for (const auto& p : sets.locality) {
    const int a = pre(p.prompt);
    const int b = post(p.prompt);
    pre_ok += a == p.answer ? 1 : 0;
    post_ok += b == p.answer ? 1 : 0;
    agree += a == b ? 1 : 0;
  }
  const double n = static_cast<double>(sets.locality.size());
  r.locality_count = sets.locality.size();
  r.locality_pre = static_cast<double>(pre_ok) / n;
  r.locality_post = static_cast<double>(post_ok) / n;
  r.locality_delta = r.locality_pre - r.locality_post;
  r.locality_agreement = static_cast<double>(agree) / n;
  r.reasoning_gap = r.single_hop - r.multi_hop;
  return r;
}

EvalReport evaluate(const Parameters& pre, const Parameters& post, const EvalSets& sets) {
  return evaluate(predictor_for(pre), predictor_for(post), sets);
}

EvalReport mean_report(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw ConfigError("mean of zero reports");
  const double inv = 1.0 / static_cast<double>(reports.size());
  EvalReport m;
  std::map<int, double> hop_sum;
  for (const auto& r : reports) {
    m.single_hop += r.single_hop * inv;
    m.multi_hop += r.multi_hop * inv;
    m.locality_pre += r.locality_pre * inv;
    m.locality_post += r.locality_post * inv;
    m.locality_delta += r.locality_delta * inv;
    m.locality_agreement += r.locality_agreement * inv;
    m.reasoning_gap += r.reasoning_gap * inv;
    m.single_hop_count += r.single_hop_count;
    m.locality_count += r.locality_count;
    m.empty_plan = m.empty_plan || r.empty_plan;
    for (const auto& [hops, c] : r.multi_hop_counts) {
      m.multi_hop_counts[hops] += c;
      hop_sum[hops] += r.multi_hop_per_hop.at(hops) * static_cast<double>(c);
    }
  }
  for (const auto& [hops, s] : hop_sum) m.multi_hop_per_hop[hops] = s / static_cast<double>(m.multi_hop_counts[hops]);
  return m;
}

nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json per_hop = nlohmann::json::object(), counts = nlohmann::json::object();
  for (const auto& [h, a] : r.multi_hop_per_hop) per_hop[std::to_string(h)] = a;
  for (const auto& [h, c] : r.multi_hop_counts) counts[std::to_string(h)] = c;
  return {{"single_hop_accuracy", r.single_hop},
          {"multi_hop_accuracy", r.multi_hop},
          {"multi_hop_accuracy_per_hop", per_hop},
          {"single_hop_count", r.single_hop_count},
          {"multi_hop_counts", counts},
          {"locality_count", r.locality_count},
          {"locality_pre_accuracy", r.locality_pre},
          {"locality_post_accuracy", r.locality_post},
          {"locality_delta", r.locality_delta},
          {"locality_agreement", r.locality_agreement},
          {"reasoning_gap", r.reasoning_gap},
          {"empty_plan", r.empty_plan}};
}

EvalReport report_from_json(const nlohmann::json& j) {
  try {
    EvalReport r;
    r.single_hop = j.at("single_hop_accuracy");
    r.multi_hop = j.at("multi_hop_accuracy");
    for (const auto& [h, a] : j.at("multi_hop_accuracy_per_hop").items()) r.multi_hop_per_hop[std::stoi(h)] = a;
    r.single_hop_count = j.at("single_hop_count");
    for (const auto& [h, c] : j.at("multi_hop_counts").items()) r.multi_hop_counts[std::stoi(h)] = c;
    r.locality_count = j.at("locality_count");
    r.locality_pre = j.at("locality_pre_accuracy");
    r.locality_post = j.at("locality_post_accuracy");
    r.locality_delta = j.at("locality_delta");
    r.locality_agreement = j.at("locality_agreement");
    r.reasoning_gap = j.at("reasoning_gap");
    r.empty_plan = j.at("empty_plan");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed eval report: ") + e.what());
  }
}

std::string report_csv_header() {
  return "s_acc,m_acc,m_acc_2,m_acc_3,m_acc_4,n_single,n_multi,n_locality,locality_pre,locality_post,"
         "locality_delta,locality_agreement,reasoning_gap,empty_plan";
}

std::string report_csv_row(const EvalReport& r) {
  std::ostringstream os;
  os.precision(17);
  auto hop = [&](int h) {
    auto it = r.multi_hop_per_hop.find(h);
    if (it == r.multi_hop_per_hop.end()) return std::string();
    std::ostringstream s;
    s.precision(17);
    s << it->second;
    return s.str();
  };
  os << r.single_hop << ',' << r.multi_hop << ',' << hop(2) << ',' << hop(3) << ',' << hop(4) << ','
     << r.single_hop_count << ',' << r.multi_hop_count() << ',' << r.locality_count << ',' << r.locality_pre << ','
     << r.locality_post << ',' << r.locality_delta << ',' << r.locality_agreement << ',' << r.reasoning_gap << ','
     << (r.empty_plan ? 1 : 0);
  return os.str();
}

StrategyTable compare_strategies(const std::vector<std::pair<std::string, EvalReport>>& reports) {
  StrategyTable t;
  t.rows = reports;
  std::vector<std::size_t> order(reports.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return reports[a].second.multi_hop > reports[b].second.multi_hop;
  });
  for (std::size_t i : order) t.ordering.push_back(reports[i].first);
  t.signs.assign(reports.size(), std::vector<int>(reports.size(), 0));
  for (std::size_t i = 0; i < reports.size(); ++i) {
    for (std::size_t j = 0; j < reports.size(); ++j) {
      const double d = reports[i].second.multi_hop - reports[j].second.multi_hop;
      t.signs[i][j] = d > 0 ? 1 : (d < 0 ? -1 : 0);
    }
  }
  return t;
}

std::string StrategyTable::to_csv() const {
  std::ostringstream os;
  os << "strategy,rank," << report_csv_header();
  for (const auto& [name, r] : rows) os << ",vs_" << name;
  os << '\n';
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto rank = std::find(ordering.begin(), ordering.end(), rows[i].first) - ordering.begin() + 1;
    os << rows[i].first << ',' << rank << ',' << report_csv_row(rows[i].second);
    for (int s : signs[i]) os << ',' << s;
    os << '\n';
  }
  return os.str();
}

}  // namespace circuitedit
