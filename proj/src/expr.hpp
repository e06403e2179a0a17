#ifndef INSITU_EXPR_HPP
#define INSITU_EXPR_HPP

#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace insitu::expr {

struct ExprError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Scalar expression over +, -, *, /, unary minus, parentheses, numeric
// literals and named symbols. Standard precedence, left associative.
class Expression {
 public:
  struct Node;

  static Expression parse(const std::string& text);

  double eval(const std::map<std::string, double>& bindings) const;

  // Symbols referenced by the expression, sorted and deduplicated.
  const std::vector<std::string>& symbols() const { return symbols_; }

  const std::string& text() const { return text_; }

 private:
  std::shared_ptr<const Node> root_;
  std::vector<std::string> symbols_;
  std::string text_;
};

inline std::vector<std::string> extract_symbols(const std::string& text) {
  return Expression::parse(text).symbols();
}

inline double evaluate(const std::string& text, const std::map<std::string, double>& bindings) {
  return Expression::parse(text).eval(bindings);
}

}  // namespace insitu::expr

#endif
