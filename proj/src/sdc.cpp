#include "sdc.hpp"

#include <cstring>
#include <fstream>

namespace insitu::sdc {

namespace {

std::uint64_t align8(std::uint64_t n) { return (n + 7) & ~std::uint64_t(7); }

std::uint64_t type_width(DataType t) {
  switch (t) {
    case DataType::Double: return 8;
    case DataType::Integer: return 8;
    case DataType::String: return 1;
  }
  return 1;
}

const char* type_tag(DataType t) { return data_type_name(t); }

}  // namespace

void FileImage::define_dim(const std::string& name, std::uint64_t size) {
  if (defined_) throw SdcError("define_dim after end_define");
  auto it = dims_.find(name);
  if (it != dims_.end()) {
    if (it->second != size)
      throw SdcError("dimension \"" + name + "\" redefined with different size");
    return;
  }
  dims_[name] = size;
}

void FileImage::define_dim_coords(const std::string& name, const std::vector<double>& coords) {
  define_dim(name, coords.size());
  if (!has_var(name)) {
    define_var(name, DataType::Double, {name});
    pending_coords_[name] = coords;
  } else if (pending_coords_.at(name) != coords) {
    throw SdcError("coordinate values for \"" + name + "\" disagree");
  }
}

void FileImage::define_var(const std::string& name, DataType type,
                           std::vector<std::string> dims, nlohmann::json attrs) {
  if (defined_) throw SdcError("define_var after end_define");
  if (has_var(name)) throw SdcError("variable \"" + name + "\" already defined");
  for (const auto& d : dims)
    if (!dims_.count(d)) throw SdcError("variable \"" + name + "\" uses unknown dim \"" + d + "\"");
  Variable v;
  v.name = name;
  v.type = type;
  v.dims = std::move(dims);
  v.attrs = std::move(attrs);
  vars_[name] = std::move(v);
  var_order_.push_back(name);
}

void FileImage::set_attr(const std::string& key, nlohmann::json value) {
  attrs_[key] = std::move(value);
}

std::uint64_t FileImage::element_count(const Variable& v) const {
  std::uint64_t n = 1;
  for (const auto& d : v.dims) n *= dim_size(d);
  return n;
}

void FileImage::end_define() {
  if (defined_) throw SdcError("end_define called twice");
  std::uint64_t cursor = 0;
  // Offsets assigned in sorted name order so the layout is canonical.
  for (auto& [name, v] : vars_) {
    v.length = element_count(v) * type_width(v.type);
    v.offset = cursor;
    cursor = align8(cursor + v.length);
  }
  payload_.assign(cursor, 0);
  defined_ = true;
  for (const auto& [name, coords] : pending_coords_) {
    auto span = doubles(name);
    std::copy(coords.begin(), coords.end(), span.begin());
  }
  pending_coords_.clear();
}

std::uint64_t FileImage::dim_size(const std::string& name) const {
  auto it = dims_.find(name);
  if (it == dims_.end()) throw SdcError("unknown dimension \"" + name + "\"");
  return it->second;
}

bool FileImage::has_var(const std::string& name) const { return vars_.count(name) > 0; }

const Variable& FileImage::var(const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw SdcError("unknown variable \"" + name + "\"");
  return it->second;
}

std::vector<std::string> FileImage::var_names() const {
  std::vector<std::string> out;
  for (const auto& [name, v] : vars_) out.push_back(name);
  return out;
}

std::span<double> FileImage::doubles(const std::string& name) {
  const Variable& v = var(name);
  if (!defined_) throw SdcError("payload access before end_define");
  if (v.type != DataType::Double) throw SdcError("variable \"" + name + "\" is not double");
  return {reinterpret_cast<double*>(payload_.data() + v.offset), v.length / 8};
}

std::span<const double> FileImage::doubles(const std::string& name) const {
  return const_cast<FileImage*>(this)->doubles(name);
}

std::span<std::int64_t> FileImage::integers(const std::string& name) {
  const Variable& v = var(name);
  if (!defined_) throw SdcError("payload access before end_define");
  if (v.type != DataType::Integer) throw SdcError("variable \"" + name + "\" is not integer");
  return {reinterpret_cast<std::int64_t*>(payload_.data() + v.offset), v.length / 8};
}

std::span<const std::int64_t> FileImage::integers(const std::string& name) const {
  return const_cast<FileImage*>(this)->integers(name);
}

std::span<std::uint8_t> FileImage::raw(const std::string& name) {
  const Variable& v = var(name);
  if (!defined_) throw SdcError("payload access before end_define");
  return {payload_.data() + v.offset, v.length};
}

std::span<const std::uint8_t> FileImage::raw(const std::string& name) const {
  auto s = const_cast<FileImage*>(this)->raw(name);
  return {s.data(), s.size()};
}

void FileImage::write_region(const std::string& name, std::span<const long> start,
                             std::span<const long> extent, std::span<const double> data) {
  const Variable& v = var(name);
  if (start.size() != v.dims.size() || extent.size() != v.dims.size())
    throw SdcError("region rank mismatch for \"" + name + "\"");
  std::size_t count = 1;
  for (long e : extent) count *= std::size_t(e);
  if (data.size() != count) throw SdcError("region data size mismatch for \"" + name + "\"");
  const std::size_t ndim = v.dims.size();
  std::vector<std::uint64_t> shape(ndim);
  for (std::size_t d = 0; d < ndim; ++d) {
    shape[d] = dim_size(v.dims[d]);
    if (start[d] < 0 || std::uint64_t(start[d] + extent[d]) > shape[d])
      throw SdcError("region out of bounds for \"" + name + "\"");
  }
  std::vector<std::uint64_t> stride(ndim, 1);
  for (std::size_t d = ndim - 1; d > 0; --d) stride[d - 1] = stride[d] * shape[d];

  auto dst = doubles(name);
  const long row_len = extent[ndim - 1];
  const long rows = long(count) / std::max(row_len, 1L);
  std::vector<long> idx(ndim, 0);
  for (long r = 0; r < rows; ++r) {
    std::uint64_t offset = 0;
    for (std::size_t d = 0; d < ndim; ++d)
      offset += std::uint64_t(start[d] + idx[d]) * stride[d];
    std::copy_n(data.begin() + r * row_len, row_len, dst.begin() + long(offset));
    for (std::size_t d = ndim - 1; d-- > 0;) {
      if (++idx[d] < extent[d]) break;
      idx[d] = 0;
    }
  }
}

std::vector<std::uint8_t> FileImage::serialize() const {
  if (!defined_) throw SdcError("serialize before end_define");
  nlohmann::json header;
  nlohmann::json jdims = nlohmann::json::object();
  for (const auto& [name, size] : dims_) jdims[name] = size;
  nlohmann::json jvars = nlohmann::json::object();
  for (const auto& [name, v] : vars_) {
    nlohmann::json jv;
    jv["type"] = type_tag(v.type);
    jv["dims"] = v.dims;
    jv["attrs"] = v.attrs;
    jv["offset"] = v.offset;
    jv["length"] = v.length;
    jvars[name] = jv;
  }
  header["dims"] = jdims;
  header["vars"] = jvars;
  header["attrs"] = attrs_;
  std::string text = header.dump();  // minified; object keys are sorted

  std::vector<std::uint8_t> out;
  out.reserve(16 + text.size() + payload_.size() + 8);
  out.insert(out.end(), kMagic, kMagic + 4);
  std::uint64_t hlen = text.size();
  for (int i = 0; i < 8; ++i) out.push_back(std::uint8_t(hlen >> (8 * i)));
  out.insert(out.end(), text.begin(), text.end());
  while (out.size() % 8 != 0) out.push_back(0);
  out.insert(out.end(), payload_.begin(), payload_.end());
  return out;
}

FileImage FileImage::parse(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw SdcError("not an SDC file");
  std::uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i) hlen |= std::uint64_t(bytes[4 + std::size_t(i)]) << (8 * i);
  if (12 + hlen > bytes.size()) throw SdcError("truncated SDC header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + long(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw SdcError(std::string("corrupt SDC header: ") + e.what());
  }
  std::size_t payload_start = align8(12 + hlen);
  if (payload_start > bytes.size()) throw SdcError("truncated SDC file");

  FileImage img;
  for (const auto& [name, size] : header.at("dims").items())
    img.dims_[name] = size.get<std::uint64_t>();
  std::uint64_t expected_end = 0;
  for (const auto& [name, jv] : header.at("vars").items()) {
    Variable v;
    v.name = name;
    v.type = data_type_from_name(jv.at("type").get<std::string>());
    v.dims = jv.at("dims").get<std::vector<std::string>>();
    v.attrs = jv.at("attrs");
    v.offset = jv.at("offset").get<std::uint64_t>();
    v.length = jv.at("length").get<std::uint64_t>();
    for (const auto& d : v.dims)
      if (!img.dims_.count(d)) throw SdcError("variable \"" + name + "\" uses unknown dim");
    if (v.length != img.element_count(v) * type_width(v.type))
      throw SdcError("variable \"" + name + "\" length does not match its shape");
    expected_end = std::max(expected_end, align8(v.offset + v.length));
    img.vars_[name] = v;
    img.var_order_.push_back(name);
  }
  // Offsets must not overlap.
  std::vector<const Variable*> sorted;
  for (const auto& [n, v] : img.vars_) sorted.push_back(&v);
  std::sort(sorted.begin(), sorted.end(),
            [](const Variable* a, const Variable* b) { return a->offset < b->offset; });
  std::uint64_t cursor = 0;
  for (const Variable* v : sorted) {
    if (v->offset < cursor) throw SdcError("overlapping variable payloads");
    cursor = v->offset + v->length;
  }
  img.attrs_ = header.at("attrs");
  if (payload_start + expected_end > bytes.size()) throw SdcError("truncated SDC payload");
  img.payload_.assign(bytes.begin() + long(payload_start),
                      bytes.begin() + long(payload_start + expected_end));
  img.defined_ = true;
  return img;
}

void FileImage::save(const std::string& path) const {
  auto bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw SdcError("cannot open \"" + path + "\" for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), long(bytes.size()));
  if (!out) throw SdcError("short write to \"" + path + "\"");
}

FileImage FileImage::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SdcError("cannot open \"" + path + "\"");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return parse(bytes);
}

// ---- CollectiveFile ----

void CollectiveFile::declare_dim(int rank, const std::string& name, std::uint64_t size) {
  std::lock_guard lock(mu_);
  (void)rank;
  if (image_.has_dim(name) && image_.dim_size(name) != size)
    throw SdcError("ranks disagree on size of dimension \"" + name + "\"");
  image_.define_dim(name, size);
}

void CollectiveFile::declare_dim_coords(int rank, const std::string& name,
                                        const std::vector<double>& coords) {
  std::lock_guard lock(mu_);
  (void)rank;
  if (image_.has_dim(name) && image_.dim_size(name) != coords.size())
    throw SdcError("ranks disagree on size of dimension \"" + name + "\"");
  image_.define_dim_coords(name, coords);
}

void CollectiveFile::declare_var(int rank, const std::string& name, DataType type,
                                 std::vector<std::string> dims, nlohmann::json attrs) {
  std::lock_guard lock(mu_);
  (void)rank;
  if (image_.has_var(name)) {
    const Variable& v = image_.var(name);
    if (v.type != type || v.dims != dims)
      throw SdcError("ranks disagree on variable \"" + name + "\"");
    return;
  }
  image_.define_var(name, type, std::move(dims), std::move(attrs));
}

void CollectiveFile::set_attr(const std::string& key, nlohmann::json value) {
  std::lock_guard lock(mu_);
  if (!image_.attrs().contains(key)) image_.set_attr(key, std::move(value));
}

void CollectiveFile::end_define() {
  std::lock_guard lock(mu_);
  if (!image_.defined()) image_.end_define();
}

void CollectiveFile::write_region(int rank, const std::string& name,
                                  std::span<const long> start, std::span<const long> extent,
                                  std::span<const double> data) {
  std::lock_guard lock(mu_);
  image_.write_region(name, start, extent, data);
  ++write_counts_[rank];
}

void CollectiveFile::write_scalar_series(int rank, const std::string& name,
                                         std::span<const double> data) {
  std::lock_guard lock(mu_);
  auto dst = image_.doubles(name);
  if (dst.size() != data.size()) throw SdcError("series length mismatch for \"" + name + "\"");
  std::copy(data.begin(), data.end(), dst.begin());
  ++write_counts_[rank];
}

void CollectiveFile::dummy_write(int rank) {
  std::lock_guard lock(mu_);
  ++write_counts_[rank];
}

long CollectiveFile::write_count(int rank) const {
  std::lock_guard lock(mu_);
  auto it = write_counts_.find(rank);
  return it == write_counts_.end() ? 0 : it->second;
}

FileImage CollectiveFile::finish() {
  std::lock_guard lock(mu_);
  return std::move(image_);
}

}  // namespace insitu::sdc
