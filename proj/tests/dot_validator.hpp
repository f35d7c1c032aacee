#pragma once

// Recursive-descent check of the DOT subset a digraph exporter can emit:
//   graph     : 'digraph' ID? '{' stmt* '}'
//   stmt      : (attr_stmt | edge_or_node | ID '=' ID) ';'?
//   attr_stmt : ('graph' | 'node' | 'edge') attr_list
//   edge_or_node : ID ('->' ID)* attr_list?
//   attr_list : '[' (ID '=' ID (','|';')?)* ']'
// Line comments (// and #) are skipped. Collects node and edge statements.

#include <cctype>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace dotcheck {

struct Token {
  enum Kind { Id, Sym, End } kind;
  std::string text;
};

struct Result {
  bool ok = false;
  std::string error;
  std::vector<std::string> nodes;  // node statements, in order
  std::vector<std::pair<std::string, std::string>> edges;
  std::set<std::string> filled;  // nodes whose attributes include style=filled
};

inline std::vector<Token> lex(const std::string& s, std::string& error) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const char c = s[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
    } else if ((c == '/' && i + 1 < s.size() && s[i + 1] == '/') || c == '#') {
      while (i < s.size() && s[i] != '\n') ++i;
    } else if (c == '"') {
      std::string text;
      ++i;
      while (i < s.size() && s[i] != '"') {
        if (s[i] == '\\' && i + 1 < s.size()) ++i;
        text += s[i++];
      }
      if (i >= s.size()) {
        error = "unterminated string";
        return {};
      }
      ++i;
      out.push_back({Token::Id, text});
    } else if (std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '-') {
      if (c == '-' && i + 1 < s.size() && s[i + 1] == '>') {
        out.push_back({Token::Sym, "->"});
        i += 2;
        continue;
      }
      std::string text;
      while (i < s.size() && (std::isalnum(static_cast<unsigned char>(s[i])) || s[i] == '_' || s[i] == '.' ||
                              (s[i] == '-' && !(i + 1 < s.size() && s[i + 1] == '>')))) {
        text += s[i++];
      }
      out.push_back({Token::Id, text});
    } else if (std::string("{}[]=;,").find(c) != std::string::npos) {
      out.push_back({Token::Sym, std::string(1, c)});
      ++i;
    } else {
      error = std::string("unexpected character '") + c + "'";
      return {};
    }
  }
  out.push_back({Token::End, ""});
  return out;
}

class Parser {
 public:
  explicit Parser(std::vector<Token> toks) : t_(std::move(toks)) {}

  Result run() {
    Result r;
    try {
      expect_id("digraph");
      if (peek().kind == Token::Id) next();
      expect_sym("{");
      while (!(peek().kind == Token::Sym && peek().text == "}")) {
        if (peek().kind == Token::End) throw std::string("missing closing brace");
        stmt(r);
      }
      next();
      if (peek().kind != Token::End) throw std::string("trailing tokens after graph");
      r.ok = true;
    } catch (const std::string& e) {
      r.error = e;
    }
    return r;
  }

 private:
  const Token& peek() const { return t_[pos_]; }
  Token next() { return t_[pos_ < t_.size() - 1 ? pos_++ : pos_]; }
  void expect_sym(const std::string& s) {
    Token t = next();
    if (t.kind != Token::Sym || t.text != s) throw "expected '" + s + "', got '" + t.text + "'";
  }
  void expect_id(const std::string& s) {
    Token t = next();
    if (t.kind != Token::Id || t.text != s) throw "expected '" + s + "', got '" + t.text + "'";
  }
  std::string id() {
    Token t = next();
    if (t.kind != Token::Id) throw "expected an identifier, got '" + t.text + "'";
    return t.text;
  }
  bool at_sym(const std::string& s) const { return peek().kind == Token::Sym && peek().text == s; }

  std::vector<std::pair<std::string, std::string>> attr_list() {
    std::vector<std::pair<std::string, std::string>> attrs;
    expect_sym("[");
    while (!at_sym("]")) {
      std::string k = id();
      expect_sym("=");
      attrs.emplace_back(k, id());
      if (at_sym(",") || at_sym(";")) next();
    }
    next();
    return attrs;
  }

  void stmt(Result& r) {
    std::string first = id();
    if (first == "graph" || first == "node" || first == "edge") {
      attr_list();
    } else if (at_sym("=")) {
      next();
      id();
    } else {
      std::vector<std::string> chain{first};
      while (at_sym("->")) {
        next();
        chain.push_back(id());
      }
      std::vector<std::pair<std::string, std::string>> attrs;
      if (at_sym("[")) attrs = attr_list();
      if (chain.size() == 1) {
        r.nodes.push_back(first);
        for (const auto& [k, v] : attrs) {
          if (k == "style" && v == "filled") r.filled.insert(first);
        }
      } else {
        for (std::size_t i = 0; i + 1 < chain.size(); ++i) r.edges.emplace_back(chain[i], chain[i + 1]);
      }
    }
    if (at_sym(";")) next();
  }

  std::vector<Token> t_;
  std::size_t pos_ = 0;
};

inline Result validate(const std::string& dot) {
  std::string error;
  auto toks = lex(dot, error);
  if (!error.empty()) return {false, error, {}, {}, {}};
  return Parser(std::move(toks)).run();
}

}  // namespace dotcheck
