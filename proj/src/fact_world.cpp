#include "circuitedit/fact_world.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "circuitedit/errors.hpp"
#include "circuitedit/random.hpp"

namespace circuitedit {

namespace {

const char* const kTypeNames[] = {"game", "company", "person", "city", "language", "band", "river", "team"};
const char* const kRelationNames[] = {"creator", "leader", "home", "rival", "partner", "mentor"};

std::string type_name(int i) {
  if (i < static_cast<int>(std::size(kTypeNames))) return kTypeNames[i];
  return "type" + std::to_string(i);
}

std::string relation_name(int i) {
  if (i < static_cast<int>(std::size(kRelationNames))) return kRelationNames[i];
  return "rel" + std::to_string(i);
}

}  // namespace

std::optional<int> FactGraph::find_triple(int subject, int relation) const {
  for (std::size_t i = 0; i < triples.size(); ++i) {
    if (triples[i].subject == subject && triples[i].relation == relation) return static_cast<int>(i);
  }
  return std::nullopt;
}

std::optional<int> FactGraph::lookup(int subject, int relation) const {
  auto t = find_triple(subject, relation);
  if (!t) return std::nullopt;
  return triples[static_cast<std::size_t>(*t)].object;
}

std::optional<int> FactGraph::follow(int start, const std::vector<int>& relation_path) const {
  int cur = start;
  for (int r : relation_path) {
    auto next = lookup(cur, r);
    if (!next) return std::nullopt;
    cur = *next;
  }
  return cur;
}

std::vector<int> FactGraph::relation_path(const Chain& c) const {
  std::vector<int> out;
  for (int t : c.triples) out.push_back(triples[static_cast<std::size_t>(t)].relation);
  return out;
}

std::vector<int> FactGraph::entity_path(const Chain& c) const {
  std::vector<int> out{c.start};
  for (int t : c.triples) out.push_back(triples[static_cast<std::size_t>(t)].object);
  return out;
}

std::size_t FactGraph::chain_count(std::size_t hops) const {
  return static_cast<std::size_t>(
      std::count_if(chains.begin(), chains.end(), [hops](const Chain& c) { return c.hops() == hops; }));
}

void FactGraph::rebuild_chains() {
  std::vector<std::vector<int>> outgoing(entities.size());
  for (std::size_t i = 0; i < triples.size(); ++i) {
    outgoing[static_cast<std::size_t>(triples[i].subject)].push_back(static_cast<int>(i));
  }
  chains.clear();
  for (int hops = kMinHops; hops <= kMaxHops; ++hops) {
    for (std::size_t start = 0; start < entities.size(); ++start) {
      std::vector<int> path;
      auto walk = [&](auto&& self, int entity) -> void {
        if (static_cast<int>(path.size()) == hops) {
          Chain c;
          c.triples = path;
          c.start = static_cast<int>(start);
          c.answer = entity;
          chains.push_back(std::move(c));
          return;
        }
        for (int t : outgoing[static_cast<std::size_t>(entity)]) {
          path.push_back(t);
          self(self, triples[static_cast<std::size_t>(t)].object);
          path.pop_back();
        }
      };
      walk(walk, static_cast<int>(start));
    }
  }
}

void FactGraph::check_invariants() const {
  std::set<std::pair<int, int>> seen;
  for (const Triple& t : triples) {
    if (!seen.insert({t.subject, t.relation}).second) {
      throw Error("relation " + relations[static_cast<std::size_t>(t.relation)].name + " is not functional for " +
                  entities[static_cast<std::size_t>(t.subject)].name);
    }
  }
  for (const Chain& c : chains) {
    int cur = c.start;
    for (int ti : c.triples) {
      const Triple& t = triples[static_cast<std::size_t>(ti)];
      if (t.subject != cur) throw Error("chain triples do not share their bridging entity");
      cur = t.object;
    }
    if (cur != c.answer) throw Error("chain answer does not match its final triple");
  }
}

FactGraph generate_world(const WorldConfig& config) {
  if (config.entities_per_type < 2 || config.types < 2 || config.relations < 1) {
    throw ConfigError("world needs >= 2 entities per type, >= 2 types and >= 1 relation");
  }
  if (config.relations > config.types) {
    throw ConfigError("more relations (" + std::to_string(config.relations) + ") than type-ring edges (" +
                      std::to_string(config.types) + ")");
  }
  FactGraph w;
  w.config = config;
  const int n = config.entities_per_type;
  for (int t = 0; t < config.types; ++t) {
    w.types.push_back(type_name(t));
    for (int i = 0; i < n; ++i) w.entities.push_back({type_name(t) + std::to_string(i), t});
  }
  for (int r = 0; r < config.relations; ++r) w.relations.push_back({relation_name(r), {}});

  std::mt19937_64 rng(config.seed);
  for (int edge = 0; edge < config.types; ++edge) {
    const int domain = edge;
    const int range = (edge + 1) % config.types;
    const int rel = edge % config.relations;
    w.relations[static_cast<std::size_t>(rel)].signatures.push_back({domain, range});
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    shuffle(perm, rng);
    for (int i = 0; i < n; ++i) {
      w.triples.push_back({domain * n + i, rel, range * n + perm[static_cast<std::size_t>(i)]});
    }
  }
  w.rebuild_chains();
  w.check_invariants();
  return w;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw ConfigError("vocabulary collision on token '" + tokens_[i] + "'");
    }
  }
}

Vocabulary Vocabulary::for_world(const FactGraph& world) {
  std::vector<std::string> t{kThe, kOf, kIs};
  for (const auto& r : world.relations) t.push_back(r.name);
  for (const auto& e : world.entities) t.push_back(e.name);
  return Vocabulary(std::move(t));
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) throw ConfigError("token '" + token + "' is not in the vocabulary");
  return it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ConfigError("token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::string Vocabulary::render(const std::vector<int>& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

std::vector<int> render_prompt(const Vocabulary& vocab, const FactGraph& world, int subject,
                               const std::vector<int>& relation_path) {
  if (relation_path.empty()) throw ConfigError("prompt needs at least one relation");
  std::vector<int> out;
  const int the = vocab.id(Vocabulary::kThe), of = vocab.id(Vocabulary::kOf);
  for (auto it = relation_path.rbegin(); it != relation_path.rend(); ++it) {
    out.push_back(the);
    out.push_back(vocab.id(world.relations[static_cast<std::size_t>(*it)].name));
    out.push_back(of);
  }
  out.push_back(vocab.id(world.entities[static_cast<std::size_t>(subject)].name));
  out.push_back(vocab.id(Vocabulary::kIs));
  return out;
}

std::size_t subject_position(std::size_t hops) { return 3 * hops; }

std::vector<TokenSequence> render_corpus(const FactGraph& world, const Vocabulary& vocab) {
  // Reject vocabularies that map two world symbols onto one token.
  std::set<int> ids;
  for (const auto& r : world.relations) ids.insert(vocab.id(r.name));
  for (const auto& e : world.entities) ids.insert(vocab.id(e.name));
  if (ids.size() != world.relations.size() + world.entities.size()) {
    throw ConfigError("vocabulary collision between world symbols");
  }
  std::vector<TokenSequence> out;
  for (const Triple& t : world.triples) {
    TokenSequence s = render_prompt(vocab, world, t.subject, {t.relation});
    s.push_back(vocab.id(world.entities[static_cast<std::size_t>(t.object)].name));
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<TokenSequence> training_corpus(const FactGraph& world, const Vocabulary& vocab) {
  std::vector<TokenSequence> out = render_corpus(world, vocab);
  for (const Chain& c : world.chains) {
    TokenSequence s = render_prompt(vocab, world, c.start, world.relation_path(c));
    s.push_back(vocab.id(world.entities[static_cast<std::size_t>(c.answer)].name));
    out.push_back(std::move(s));
  }
  return out;
}

std::string to_string(PromptMode m) { return m == PromptMode::SingleHop ? "single-hop" : "multi-hop"; }

PromptMode prompt_mode_from_string(const std::string& s) {
  if (s == "single-hop") return PromptMode::SingleHop;
  if (s == "multi-hop") return PromptMode::MultiHop;
  throw ConfigError("unknown prompt mode '" + s + "'");
}

PromptPair make_prompt_pair(const FactGraph& world, const Vocabulary& vocab, const Chain& chain, PromptMode mode,
                            std::uint64_t seed) {
  if (chain.triples.empty()) throw ConfigError("prompt pair needs a non-empty chain");
  int subject = chain.start;
  std::vector<int> rels = world.relation_path(chain);
  if (mode == PromptMode::SingleHop) {
    const Triple& last = world.triples[static_cast<std::size_t>(chain.triples.back())];
    subject = last.subject;
    rels = {last.relation};
  }
  const auto clean_answer = world.follow(subject, rels);
  if (!clean_answer) throw ConfigError("chain is not present in the world");

  const int type = world.entities[static_cast<std::size_t>(subject)].type;
  std::vector<int> alternatives;
  for (std::size_t e = 0; e < world.entities.size(); ++e) {
    if (static_cast<int>(e) != subject && world.entities[e].type == type && world.follow(static_cast<int>(e), rels)) {
      alternatives.push_back(static_cast<int>(e));
    }
  }
  if (alternatives.empty()) throw ConfigError("no same-type alternative subject for corruption");
  std::mt19937_64 rng(seed);
  const int alt = alternatives[uniform_index(rng, alternatives.size())];

  PromptPair p;
  p.clean = render_prompt(vocab, world, subject, rels);
  p.corrupt = render_prompt(vocab, world, alt, rels);
  p.clean_answer = vocab.id(world.entities[static_cast<std::size_t>(*clean_answer)].name);
  p.corrupt_answer = vocab.id(world.entities[static_cast<std::size_t>(*world.follow(alt, rels))].name);
  p.answer_position = p.clean.size() - 1;
  p.subject_positions = {subject_position(rels.size())};
  p.label = vocab.render(p.clean) + " | " + vocab.render(p.corrupt);
  return p;
}

EditRequest sample_edit(const FactGraph& world, std::uint64_t seed) {
  if (world.triples.empty()) throw ConfigError("world has no triples to edit");
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const std::size_t ti = uniform_index(rng, world.triples.size());
  const Triple& t = world.triples[ti];
  const int type = world.entities[static_cast<std::size_t>(t.object)].type;
  std::vector<int> candidates;
  for (std::size_t e = 0; e < world.entities.size(); ++e) {
    if (world.entities[e].type == type && static_cast<int>(e) != t.object) candidates.push_back(static_cast<int>(e));
  }
  if (candidates.empty()) throw ConfigError("no same-type replacement object");
  EditRequest r;
  r.triple = static_cast<int>(ti);
  r.subject = t.subject;
  r.relation = t.relation;
  r.old_object = t.object;
  r.new_object = candidates[uniform_index(rng, candidates.size())];
  return r;
}

EditRequest reverse_edit(const EditRequest& edit) {
  EditRequest r = edit;
  std::swap(r.old_object, r.new_object);
  return r;
}

FactGraph apply_counterfactual(const FactGraph& world, const EditRequest& edit) {
  if (edit.triple < 0 || static_cast<std::size_t>(edit.triple) >= world.triples.size()) {
    throw ConfigError("edit targets a triple that is not in the world");
  }
  const Triple& t = world.triples[static_cast<std::size_t>(edit.triple)];
  if (t.subject != edit.subject || t.relation != edit.relation || t.object != edit.old_object) {
    throw ConfigError("edit target triple is not present in the world");
  }
  if (edit.new_object == edit.old_object) throw ConfigError("counterfactual object equals the current object");
  if (edit.new_object < 0 || static_cast<std::size_t>(edit.new_object) >= world.entities.size() ||
      world.entities[static_cast<std::size_t>(edit.new_object)].type !=
          world.entities[static_cast<std::size_t>(edit.old_object)].type) {
    throw ConfigError("counterfactual object must exist and share the old object's type");
  }
  FactGraph out = world;
  out.triples[static_cast<std::size_t>(edit.triple)].object = edit.new_object;
  out.rebuild_chains();
  out.check_invariants();
  return out;
}

std::vector<std::size_t> affected_chains(const FactGraph& world, const EditRequest& edit) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < world.chains.size(); ++i) {
    const auto& ts = world.chains[i].triples;
    if (std::find(ts.begin(), ts.end(), edit.triple) != ts.end()) out.push_back(i);
  }
  return out;
}

std::size_t EvalSets::multi_hop_total() const {
  std::size_t n = 0;
  for (const auto& [hops, set] : multi_hop) n += set.size();
  return n;
}

const Chain& discovery_chain(const FactGraph& world, const EditRequest& edit) {
  for (const Chain& c : world.chains) {
    if (c.hops() == 2 && c.triples.front() == edit.triple) return c;
  }
  for (std::size_t i : affected_chains(world, edit)) {
    if (world.chains[i].hops() == 2) return world.chains[i];
  }
  throw ConfigError("no 2-hop chain passes through the edited triple");
}

EvalSets make_eval_sets(const FactGraph& world, const Vocabulary& vocab, const EditRequest& edit) {
  const FactGraph edited = apply_counterfactual(world, edit);
  auto entity_token = [&](int e) { return vocab.id(world.entities[static_cast<std::size_t>(e)].name); };

  EvalSets sets;
  sets.single_hop.push_back({render_prompt(vocab, world, edit.subject, {edit.relation}),
                             entity_token(edit.new_object), 1, entity_token(edit.old_object)});

  std::set<int> touched{edit.subject, edit.old_object, edit.new_object};
  for (std::size_t ci : affected_chains(world, edit)) {
    const Chain& c = world.chains[ci];
    const std::vector<int> rels = world.relation_path(c);
    const int hops = static_cast<int>(c.hops());
    for (int e : world.entity_path(c)) touched.insert(e);
    int cur = c.start;
    for (int r : rels) {
      cur = *edited.lookup(cur, r);
      touched.insert(cur);
    }
    const int new_answer = cur;
    EvalPrompt p{render_prompt(vocab, world, c.start, rels), entity_token(new_answer), hops, entity_token(c.answer)};
    ++sets.affected_per_hop[hops];
    sets.multi_hop_training.push_back(p);
    if (new_answer != c.answer) sets.multi_hop[hops].push_back(p);
  }

  for (const Triple& t : world.triples) {
    if (!touched.count(t.subject) && !touched.count(t.object)) {
      const int answer = entity_token(t.object);
      sets.locality.push_back({render_prompt(vocab, world, t.subject, {t.relation}), answer, 1, answer});
    }
  }
  for (const Chain& c : world.chains) {
    const auto path = world.entity_path(c);
    if (std::none_of(path.begin(), path.end(), [&](int e) { return touched.count(e) > 0; })) {
      const int answer = entity_token(c.answer);
      sets.locality.push_back(
          {render_prompt(vocab, world, c.start, world.relation_path(c)), answer, static_cast<int>(c.hops()), answer});
    }
  }
  if (sets.locality.size() < kMinLocalityPrompts) {
    throw ConfigError("only " + std::to_string(sets.locality.size()) + " locality prompts share no entity with the " +
                      "edited chains; need " + std::to_string(kMinLocalityPrompts));
  }
  return sets;
}

nlohmann::json world_to_json(const FactGraph& world) {
  using nlohmann::json;
  json j;
  j["schema"] = "fact-world/1";
  j["config"] = {{"seed", world.config.seed},
                 {"entities_per_type", world.config.entities_per_type},
                 {"types", world.config.types},
                 {"relations", world.config.relations}};
  j["types"] = world.types;
  json ents = json::array();
  for (const auto& e : world.entities) ents.push_back({{"name", e.name}, {"type", e.type}});
  j["entities"] = ents;
  json rels = json::array();
  for (const auto& r : world.relations) {
    json sigs = json::array();
    for (const auto& s : r.signatures) sigs.push_back({s.domain, s.range});
    rels.push_back({{"name", r.name}, {"signatures", sigs}});
  }
  j["relations"] = rels;
  json trs = json::array();
  for (const auto& t : world.triples) trs.push_back({t.subject, t.relation, t.object});
  j["triples"] = trs;
  json chs = json::array();
  for (const auto& c : world.chains) chs.push_back({{"start", c.start}, {"triples", c.triples}, {"answer", c.answer}});
  j["chains"] = chs;
  return j;
}

FactGraph world_from_json(const nlohmann::json& j) {
  if (j.value("schema", "") != "fact-world/1") throw IoError("not a fact-world/1 document");
  try {
    FactGraph w;
    const auto& c = j.at("config");
    w.config.seed = c.at("seed").get<std::uint64_t>();
    w.config.entities_per_type = c.at("entities_per_type").get<int>();
    w.config.types = c.at("types").get<int>();
    w.config.relations = c.at("relations").get<int>();
    w.types = j.at("types").get<std::vector<std::string>>();
    for (const auto& e : j.at("entities")) w.entities.push_back({e.at("name"), e.at("type")});
    for (const auto& r : j.at("relations")) {
      Relation rel{r.at("name"), {}};
      for (const auto& s : r.at("signatures")) rel.signatures.push_back({s.at(0), s.at(1)});
      w.relations.push_back(std::move(rel));
    }
    for (const auto& t : j.at("triples")) w.triples.push_back({t.at(0), t.at(1), t.at(2)});
    for (const auto& ch : j.at("chains")) {
      w.chains.push_back({ch.at("triples").get<std::vector<int>>(), ch.at("start").get<int>(), ch.at("answer").get<int>()});
    }
    w.check_invariants();
    return w;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed fact-world/1 document: ") + e.what());
  }
}

nlohmann::json edit_to_json(const EditRequest& e) {
  return {{"triple", e.triple},
          {"subject", e.subject},
          {"relation", e.relation},
          {"old_object", e.old_object},
          {"new_object", e.new_object}};
}

EditRequest edit_from_json(const nlohmann::json& j) {
  return {j.at("triple"), j.at("subject"), j.at("relation"), j.at("old_object"), j.at("new_object")};
}

nlohmann::json eval_sets_to_json(const EvalSets& sets, const Vocabulary& vocab) {
  using nlohmann::json;
  auto dump = [&](const std::vector<EvalPrompt>& ps) {
    json arr = json::array();
    for (const auto& p : ps) {
      arr.push_back({{"prompt", vocab.render(p.prompt)}, {"tokens", p.prompt}, {"answer", vocab.token(p.answer)},
                     {"answer_id", p.answer}, {"hops", p.hops}, {"previous_id", p.previous}});
    }
    return arr;
  };
  json j;
  j["schema"] = "fact-world/1";
  j["kind"] = "eval-sets";
  j["single_hop"] = dump(sets.single_hop);
  json mh = json::object();
  for (const auto& [hops, ps] : sets.multi_hop) mh[std::to_string(hops)] = dump(ps);
  j["multi_hop"] = mh;
  j["locality"] = dump(sets.locality);
  j["multi_hop_training"] = dump(sets.multi_hop_training);
  json counts = json::object();
  for (const auto& [hops, n] : sets.affected_per_hop) counts[std::to_string(hops)] = n;
  j["affected_per_hop"] = counts;
  return j;
}

}  // namespace circuitedit
