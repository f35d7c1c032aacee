#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "circuitedit/model.hpp"

namespace circuitedit {

struct WorldConfig {
  std::uint64_t seed = 0;
  int entities_per_type = 8;
  int types = 4;
  int relations = 3;

  bool operator==(const WorldConfig&) const = default;
};

struct Entity {
  std::string name;
  int type = 0;
  bool operator==(const Entity&) const = default;
};

struct RelationSignature {
  int domain = 0;
  int range = 0;
  bool operator==(const RelationSignature&) const = default;
};

struct Relation {
  std::string name;
  std::vector<RelationSignature> signatures;
  bool operator==(const Relation&) const = default;
};

struct Triple {
  int subject = 0;
  int relation = 0;
  int object = 0;
  bool operator==(const Triple&) const = default;
};

// A path of 2..4 triples; consecutive triples share the bridging entity.
struct Chain {
  std::vector<int> triples;  // indices into FactGraph::triples
  int start = 0;
  int answer = 0;
  std::size_t hops() const { return triples.size(); }
  bool operator==(const Chain&) const = default;
};

// Synthetic knowledge world with functional relations. Types form a ring
// T0 -> T1 -> ... -> T(n-1) -> T0; ring edge i is served by relation
// i mod n_relations and each relation is a random bijection on its edge.
class FactGraph {
 public:
  static constexpr int kMinHops = 2;
  static constexpr int kMaxHops = 4;

  WorldConfig config;
  std::vector<std::string> types;
  std::vector<Entity> entities;
  std::vector<Relation> relations;
  std::vector<Triple> triples;
  std::vector<Chain> chains;

  std::optional<int> find_triple(int subject, int relation) const;
  std::optional<int> lookup(int subject, int relation) const;
  // Follows relations from start; nullopt if a hop is undefined.
  std::optional<int> follow(int start, const std::vector<int>& relation_path) const;
  std::vector<int> relation_path(const Chain& c) const;
  std::vector<int> entity_path(const Chain& c) const;  // start, bridges..., answer
  std::size_t chain_count(std::size_t hops) const;

  // Re-derives chains from the triples (all paths of kMinHops..kMaxHops).
  void rebuild_chains();
  void check_invariants() const;

  bool operator==(const FactGraph&) const = default;
};

FactGraph generate_world(const WorldConfig& config);

// One token per filler word, relation and entity.
class Vocabulary {
 public:
  static constexpr const char* kThe = "the";
  static constexpr const char* kOf = "of";
  static constexpr const char* kIs = "is";

  Vocabulary() = default;
  // Throws ConfigError on duplicate symbols.
  explicit Vocabulary(std::vector<std::string> tokens);
  static Vocabulary for_world(const FactGraph& world);

  int id(const std::string& token) const;
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::string render(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
};

// "the <r> of <s> is <o>" per triple, in triple order.
std::vector<TokenSequence> render_corpus(const FactGraph& world, const Vocabulary& vocab);
// Single-hop sentences followed by every chain rendered with its answer.
std::vector<TokenSequence> training_corpus(const FactGraph& world, const Vocabulary& vocab);

// "the r_k of ... the r_1 of <s> is"; a single relation gives the one-hop form.
std::vector<int> render_prompt(const Vocabulary& vocab, const FactGraph& world, int subject,
                               const std::vector<int>& relation_path);
// Index of the subject token inside a rendered prompt.
std::size_t subject_position(std::size_t hops);

enum class PromptMode { SingleHop, MultiHop };
std::string to_string(PromptMode m);
PromptMode prompt_mode_from_string(const std::string& s);

struct PromptPair {
  std::vector<int> clean;
  std::vector<int> corrupt;
  int clean_answer = 0;
  int corrupt_answer = 0;
  std::size_t answer_position = 0;
  std::vector<std::size_t> subject_positions;
  std::string label;  // human-readable identity, e.g. the clean prompt text
};

// Corrupts the subject with a uniformly drawn same-type entity that supports
// the same relation path.
PromptPair make_prompt_pair(const FactGraph& world, const Vocabulary& vocab, const Chain& chain, PromptMode mode,
                            std::uint64_t seed);

struct EditRequest {
  int triple = 0;
  int subject = 0;
  int relation = 0;
  int old_object = 0;
  int new_object = 0;
};

// Picks a triple and a same-type replacement object, deterministic in seed.
EditRequest sample_edit(const FactGraph& world, std::uint64_t seed);
EditRequest reverse_edit(const EditRequest& edit);

FactGraph apply_counterfactual(const FactGraph& world, const EditRequest& edit);

// Indices (into world.chains) of chains that use the edited triple.
std::vector<std::size_t> affected_chains(const FactGraph& world, const EditRequest& edit);

struct EvalPrompt {
  std::vector<int> prompt;
  int answer = 0;
  int hops = 1;
  int previous = -1;  // answer in the unedited world
};

struct EvalSets {
  std::vector<EvalPrompt> single_hop;                 // the edited fact
  std::map<int, std::vector<EvalPrompt>> multi_hop;   // hop count -> prompts whose answer the edit changed
  std::vector<EvalPrompt> locality;                   // prompts sharing no entity with affected chains
  std::vector<EvalPrompt> multi_hop_training;         // affected chains for augmented editing
  std::map<int, std::size_t> affected_per_hop;        // before the changed-answer filter

  std::size_t multi_hop_total() const;
};

constexpr std::size_t kMinLocalityPrompts = 50;

EvalSets make_eval_sets(const FactGraph& world, const Vocabulary& vocab, const EditRequest& edit);

// Chain used for circuit discovery: the 2-hop chain that starts with the
// edited triple.
const Chain& discovery_chain(const FactGraph& world, const EditRequest& edit);

// "fact-world/1" documents.
nlohmann::json world_to_json(const FactGraph& world);
FactGraph world_from_json(const nlohmann::json& j);
nlohmann::json edit_to_json(const EditRequest& e);
EditRequest edit_from_json(const nlohmann::json& j);
nlohmann::json eval_sets_to_json(const EvalSets& sets, const Vocabulary& vocab);

}  // namespace circuitedit
