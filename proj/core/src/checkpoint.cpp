#include "jdnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <type_traits>

namespace jdnet {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'J', 'D', 'N', '1'};

class Writer {
 public:
  template <typename U>
  void put(U value) {
    static_assert(std::is_trivially_copyable_v<U>);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    bytes.insert(bytes.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  void put_record(const ArrayRecord& r) {
    if (r.name.size() > std::numeric_limits<std::uint16_t>::max())
      throw CheckpointError("record name too long: " + r.name.substr(0, 32) + "...");
    if (r.dims.size() > std::numeric_limits<std::uint8_t>::max())
      throw CheckpointError("record " + r.name + " has too many dimensions");
    std::size_t count = 1;
    for (auto d : r.dims) count *= d;
    if (count != r.values.size()) throw CheckpointError("record " + r.name + " dims do not match its values");
    put(static_cast<std::uint16_t>(r.name.size()));
    put_bytes(r.name.data(), r.name.size());
    put(static_cast<std::uint8_t>(r.dims.size()));
    for (auto d : r.dims) put(d);
    put_bytes(r.values.data(), r.values.size() * sizeof(float));
  }

  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const char* what) {
    U value;
    std::memcpy(&value, take(sizeof(U), what), sizeof(U));
    return value;
  }
  const std::uint8_t* take(std::size_t n, const std::string& what) {
    if (bytes_.size() - offset_ < n) fail("truncated while reading " + what);
    const std::uint8_t* p = bytes_.data() + offset_;
    offset_ += n;
    return p;
  }
  ArrayRecord get_record() {
    const std::size_t start = offset_;
    ArrayRecord r;
    const auto len = get<std::uint16_t>("record name length");
    const auto* name = take(len, "record name");
    r.name.assign(reinterpret_cast<const char*>(name), len);
    const auto rank = get<std::uint8_t>("record rank");
    std::size_t count = 1;
    for (int i = 0; i < rank; ++i) {
      r.dims.push_back(get<std::uint32_t>("record dims"));
      count *= r.dims.back();
      if (count > bytes_.size()) {
        offset_ = start;
        fail("record " + r.name + " claims more values than the file holds");
      }
    }
    const auto* values = take(count * sizeof(float), "values of " + r.name);
    r.values.resize(count);
    std::memcpy(r.values.data(), values, count * sizeof(float));
    return r;
  }
  [[noreturn]] void fail(const std::string& message) const {
    throw CheckpointError("corrupt checkpoint at byte offset " + std::to_string(offset_) + ": " + message);
  }
  [[nodiscard]] std::size_t offset() const { return offset_; }
  [[nodiscard]] bool at_end() const { return offset_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t offset_ = 0;
};

const ArrayRecord* find(const std::vector<ArrayRecord>& records, const std::string& name) {
  for (const auto& r : records)
    if (r.name == name) return &r;
  return nullptr;
}

}  // namespace

const ArrayRecord* Checkpoint::find_parameter(const std::string& name) const { return find(parameters, name); }
const ArrayRecord* Checkpoint::find_optimizer(const std::string& name) const { return find(optimizer, name); }

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint) {
  Writer w;
  w.put_bytes(kMagic, sizeof(kMagic));
  w.put(checkpoint.version);
  w.put(static_cast<std::uint32_t>(checkpoint.parameters.size()));
  for (const auto& r : checkpoint.parameters) w.put_record(r);
  w.put(static_cast<std::uint32_t>(checkpoint.optimizer.size()));
  for (const auto& r : checkpoint.optimizer) w.put_record(r);
  w.put(checkpoint.epoch);
  w.put(checkpoint.seed);
  w.put(static_cast<std::uint32_t>(checkpoint.config_json.size()));
  w.put_bytes(checkpoint.config_json.data(), checkpoint.config_json.size());
  return std::move(w.bytes);
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  Checkpoint c;
  if (std::memcmp(r.take(sizeof(kMagic), "magic"), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a JDN1 checkpoint (bad magic at byte offset 0)");
  }
  c.version = r.get<std::uint32_t>("version");
  if (c.version != Checkpoint::kVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(c.version) + " (expected " +
                          std::to_string(Checkpoint::kVersion) + ")");
  const auto params = r.get<std::uint32_t>("parameter count");
  for (std::uint32_t i = 0; i < params; ++i) c.parameters.push_back(r.get_record());
  const auto adam = r.get<std::uint32_t>("optimizer record count");
  for (std::uint32_t i = 0; i < adam; ++i) c.optimizer.push_back(r.get_record());
  c.epoch = r.get<std::uint32_t>("epoch");
  c.seed = r.get<std::uint64_t>("seed");
  const auto len = r.get<std::uint32_t>("config length");
  const auto* json = r.take(len, "config");
  c.config_json.assign(reinterpret_cast<const char*>(json), len);
  if (!r.at_end()) r.fail("unexpected trailing bytes");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const auto bytes = encode_checkpoint(checkpoint);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out.flush()) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace jdnet
