#ifndef INSITU_SDC_HPP
#define INSITU_SDC_HPP

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "value.hpp"

namespace insitu::sdc {

struct SdcError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// SDC container: "SDC1" magic, u64 header length, canonical minified JSON
// header with sorted keys, zero padding to 8 bytes, then contiguous
// little-endian payloads. Offsets are 64-bit throughout and relative to
// the payload section.
inline constexpr char kMagic[4] = {'S', 'D', 'C', '1'};

struct Variable {
  std::string name;
  DataType type = DataType::Double;
  std::vector<std::string> dims;  // empty => scalar variable
  nlohmann::json attrs = nlohmann::json::object();
  std::uint64_t offset = 0;  // bytes into payload section, 8-aligned
  std::uint64_t length = 0;  // bytes
};

class FileImage {
 public:
  void define_dim(const std::string& name, std::uint64_t size);
  // A dimension with an explicit coordinate value at each point; stored
  // as a double variable of the same name.
  void define_dim_coords(const std::string& name, const std::vector<double>& coords);
  void define_var(const std::string& name, DataType type, std::vector<std::string> dims,
                  nlohmann::json attrs = nlohmann::json::object());
  void set_attr(const std::string& key, nlohmann::json value);

  // Locks the schema and allocates the payload section.
  void end_define();
  bool defined() const { return defined_; }

  std::uint64_t dim_size(const std::string& name) const;
  bool has_dim(const std::string& name) const { return dims_.count(name) > 0; }
  bool has_var(const std::string& name) const;
  const Variable& var(const std::string& name) const;
  std::vector<std::string> var_names() const;
  const nlohmann::json& attrs() const { return attrs_; }

  std::uint64_t element_count(const Variable& v) const;

  std::span<double> doubles(const std::string& name);
  std::span<const double> doubles(const std::string& name) const;
  std::span<std::int64_t> integers(const std::string& name);
  std::span<const std::int64_t> integers(const std::string& name) const;
  std::span<std::uint8_t> raw(const std::string& name);
  std::span<const std::uint8_t> raw(const std::string& name) const;

  // Places a row-major hyperslab at global offsets within the variable.
  void write_region(const std::string& name, std::span<const long> start,
                    std::span<const long> extent, std::span<const double> data);

  std::vector<std::uint8_t> serialize() const;
  static FileImage parse(std::span<const std::uint8_t> bytes);

  void save(const std::string& path) const;
  static FileImage load(const std::string& path);

  bool operator==(const FileImage& other) const {
    return serialize() == other.serialize();
  }

 private:
  std::map<std::string, std::uint64_t> dims_;
  std::map<std::string, Variable> vars_;
  std::vector<std::string> var_order_;
  nlohmann::json attrs_ = nlohmann::json::object();
  std::map<std::string, std::vector<double>> pending_coords_;
  std::vector<std::uint8_t> payload_;
  bool defined_ = false;
};

// In-process stand-in for a parallel file handle: every server declares
// its dims/vars, the schemas are checked for agreement, then servers write
// disjoint pieces. The caller gates the phase transitions (definition
// happens once all ranks contributed; finish once all ranks are done).
class CollectiveFile {
 public:
  explicit CollectiveFile(int nranks) : nranks_(nranks) {}

  void declare_dim(int rank, const std::string& name, std::uint64_t size);
  void declare_dim_coords(int rank, const std::string& name, const std::vector<double>& coords);
  void declare_var(int rank, const std::string& name, DataType type,
                   std::vector<std::string> dims, nlohmann::json attrs = nlohmann::json::object());
  void set_attr(const std::string& key, nlohmann::json value);

  void end_define();

  void write_region(int rank, const std::string& name, std::span<const long> start,
                    std::span<const long> extent, std::span<const double> data);
  void write_scalar_series(int rank, const std::string& name, std::span<const double> data);
  void dummy_write(int rank);

  long write_count(int rank) const;

  FileImage finish();

 private:
  mutable std::mutex mu_;
  int nranks_;
  FileImage image_;
  std::map<int, long> write_counts_;
};

}  // namespace insitu::sdc

#endif
