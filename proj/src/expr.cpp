#include "expr.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>

namespace insitu::expr {

struct Expression::Node {
  enum Kind { Literal, Symbol, Add, Sub, Mul, Div, Neg } kind;
  double literal = 0.0;
  std::string symbol;
  std::shared_ptr<const Node> lhs, rhs;
};

namespace {

using NodePtr = std::shared_ptr<const Expression::Node>;
using Node = Expression::Node;

class Parser {
 public:
  explicit Parser(const std::string& text) : text_(text) {}

  NodePtr parse() {
    NodePtr n = parse_sum();
    skip_ws();
    if (pos_ != text_.size()) fail("unexpected trailing input");
    return n;
  }

 private:
  NodePtr parse_sum() {
    NodePtr lhs = parse_product();
    for (;;) {
      skip_ws();
      if (accept('+'))
        lhs = binary(Node::Add, lhs, parse_product());
      else if (accept('-'))
        lhs = binary(Node::Sub, lhs, parse_product());
      else
        return lhs;
    }
  }

  NodePtr parse_product() {
    NodePtr lhs = parse_unary();
    for (;;) {
      skip_ws();
      if (accept('*'))
        lhs = binary(Node::Mul, lhs, parse_unary());
      else if (accept('/'))
        lhs = binary(Node::Div, lhs, parse_unary());
      else
        return lhs;
    }
  }

  NodePtr parse_unary() {
    skip_ws();
    if (accept('-')) {
      auto n = std::make_shared<Node>();
      n->kind = Node::Neg;
      n->lhs = parse_unary();
      return n;
    }
    return parse_atom();
  }

  NodePtr parse_atom() {
    skip_ws();
    if (accept('(')) {
      NodePtr inner = parse_sum();
      skip_ws();
      if (!accept(')')) fail("expected ')'");
      return inner;
    }
    if (pos_ < text_.size() && (std::isdigit(unsigned(text_[pos_])) || text_[pos_] == '.')) {
      const char* start = text_.c_str() + pos_;
      char* end = nullptr;
      double v = std::strtod(start, &end);
      if (end == start) fail("bad numeric literal");
      pos_ += std::size_t(end - start);
      auto n = std::make_shared<Node>();
      n->kind = Node::Literal;
      n->literal = v;
      return n;
    }
    if (pos_ < text_.size() && (std::isalpha(unsigned(text_[pos_])) || text_[pos_] == '_')) {
      std::size_t start = pos_;
      while (pos_ < text_.size() &&
             (std::isalnum(unsigned(text_[pos_])) || text_[pos_] == '_' ||
              (text_[pos_] == ':' && pos_ + 1 < text_.size() && text_[pos_ + 1] == ':'))) {
        pos_ += text_[pos_] == ':' ? 2 : 1;
      }
      auto n = std::make_shared<Node>();
      n->kind = Node::Symbol;
      n->symbol = text_.substr(start, pos_ - start);
      return n;
    }
    fail("expected value");
    return nullptr;
  }

  NodePtr binary(Node::Kind k, NodePtr l, NodePtr r) {
    auto n = std::make_shared<Node>();
    n->kind = k;
    n->lhs = std::move(l);
    n->rhs = std::move(r);
    return n;
  }

  bool accept(char c) {
    if (pos_ < text_.size() && text_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }
  void skip_ws() {
    while (pos_ < text_.size() && std::isspace(unsigned(text_[pos_]))) ++pos_;
  }
  [[noreturn]] void fail(const std::string& what) {
    throw ExprError("expression parse error at offset " + std::to_string(pos_) + " in \"" +
                    text_ + "\": " + what);
  }

  const std::string& text_;
  std::size_t pos_ = 0;
};

void collect_symbols(const NodePtr& n, std::vector<std::string>& out) {
  if (!n) return;
  if (n->kind == Node::Symbol) out.push_back(n->symbol);
  collect_symbols(n->lhs, out);
  collect_symbols(n->rhs, out);
}

double eval_node(const Node& n, const std::map<std::string, double>& bindings) {
  switch (n.kind) {
    case Node::Literal:
      return n.literal;
    case Node::Symbol: {
      auto it = bindings.find(n.symbol);
      if (it == bindings.end()) throw ExprError("unbound symbol: " + n.symbol);
      return it->second;
    }
    case Node::Neg:
      return -eval_node(*n.lhs, bindings);
    case Node::Add:
      return eval_node(*n.lhs, bindings) + eval_node(*n.rhs, bindings);
    case Node::Sub:
      return eval_node(*n.lhs, bindings) - eval_node(*n.rhs, bindings);
    case Node::Mul:
      return eval_node(*n.lhs, bindings) * eval_node(*n.rhs, bindings);
    case Node::Div: {
      double denom = eval_node(*n.rhs, bindings);
      if (denom == 0.0) throw ExprError("division by zero");
      return eval_node(*n.lhs, bindings) / denom;
    }
  }
  throw ExprError("corrupt expression node");
}

}  // namespace

Expression Expression::parse(const std::string& text) {
  Expression e;
  e.root_ = Parser(text).parse();
  e.text_ = text;
  collect_symbols(e.root_, e.symbols_);
  std::sort(e.symbols_.begin(), e.symbols_.end());
  e.symbols_.erase(std::unique(e.symbols_.begin(), e.symbols_.end()), e.symbols_.end());
  return e;
}

double Expression::eval(const std::map<std::string, double>& bindings) const {
  return eval_node(*root_, bindings);
}

}  // namespace insitu::expr
