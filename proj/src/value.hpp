#ifndef INSITU_VALUE_HPP
#define INSITU_VALUE_HPP

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace insitu {

enum class DataType : std::uint8_t { Double = 1, Integer = 2, String = 3 };

inline const char* data_type_name(DataType t) {
  switch (t) {
    case DataType::Double: return "double";
    case DataType::Integer: return "integer";
    case DataType::String: return "string";
  }
  return "unknown";
}

inline DataType data_type_from_name(const std::string& s) {
  if (s == "double") return DataType::Double;
  if (s == "integer") return DataType::Integer;
  if (s == "string") return DataType::String;
  throw std::invalid_argument("unknown data type: " + s);
}

// A typed field payload: scalar or array of doubles/integers, or a string.
// An empty shape means scalar (element count 1 for numeric types).
struct Value {
  DataType type = DataType::Double;
  std::vector<double> dbl;
  std::vector<std::int64_t> i64;
  std::string str;
  std::vector<std::size_t> shape;

  static Value scalar(double v) {
    Value out;
    out.type = DataType::Double;
    out.dbl = {v};
    return out;
  }
  static Value scalar_int(std::int64_t v) {
    Value out;
    out.type = DataType::Integer;
    out.i64 = {v};
    return out;
  }
  static Value array(std::vector<double> v, std::vector<std::size_t> shp = {}) {
    Value out;
    out.type = DataType::Double;
    out.dbl = std::move(v);
    if (shp.empty()) shp = {out.dbl.size()};
    out.shape = std::move(shp);
    return out;
  }

  bool is_scalar() const { return shape.empty(); }

  std::size_t element_count() const {
    if (type == DataType::String) return str.size();
    if (shape.empty()) return 1;
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }

  double as_scalar() const {
    if (type == DataType::Double && dbl.size() == 1) return dbl[0];
    if (type == DataType::Integer && i64.size() == 1) return double(i64[0]);
    throw std::runtime_error("value is not a scalar");
  }

  bool operator==(const Value&) const = default;
};

}  // namespace insitu

#endif
