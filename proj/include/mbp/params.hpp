#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "mbp/common.hpp"
#include "mbp/tensor.hpp"

static_assert(std::endian::native == std::endian::little,
              "tensor containers are little-endian; big-endian hosts are unsupported");

namespace mbp {

// Named learnable tensors plus matching gradient buffers. Iteration follows
// insertion order everywhere, which keeps initialization and optimizer updates
// reproducible.
template <typename T>
class ParameterStore {
 public:
  Tensor<T>& add(const std::string& name, Shape shape) {
    if (values_.count(name)) throw ContractError("ParameterStore: duplicate parameter " + name);
    order_.push_back(name);
    grads_.emplace(name, Tensor<T>(shape));
    return values_.emplace(name, Tensor<T>(shape)).first->second;
  }

  bool has(const std::string& name) const { return values_.count(name) != 0; }

  Tensor<T>& at(const std::string& name) {
    auto it = values_.find(name);
    if (it == values_.end()) throw ContractError("ParameterStore: unknown parameter " + name);
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw ContractError("ParameterStore: unknown parameter " + name);
    return it->second;
  }

  Tensor<T>& grad(const std::string& name) {
    auto it = grads_.find(name);
    if (it == grads_.end()) throw ContractError("ParameterStore: unknown parameter " + name);
    return it->second;
  }

  void zero_grads() {
    for (auto& [name, g] : grads_) g.set_zero();
  }

  const std::vector<std::string>& names() const { return order_; }
  size_t size() const { return order_.size(); }

  int64_t total_parameters() const {
    int64_t n = 0;
    for (const auto& name : order_) n += values_.at(name).numel();
    return n;
  }

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Tensor<T>> values_;
  std::unordered_map<std::string, Tensor<T>> grads_;
};

// ---- single-file tensor container ----
//
// layout: "MBPT" | u64 header_bytes | header JSON (UTF-8) | raw payload
// header: {"format_version":1, "meta":{...}, "tensors":[
//           {"section":..,"name":..,"shape":[..],"dtype":"f32","offset":..}]}
// Payload floats are little-endian IEEE-754 binary32 in tensor order; offsets
// are element counts from payload start. float stores round-trip bit-exactly.

namespace container {

constexpr char kMagic[4] = {'M', 'B', 'P', 'T'};
constexpr int kFormatVersion = 1;

template <typename T>
struct Entry {
  std::string section;
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
inline void save(const std::string& path, const nlohmann::json& meta,
                 const std::vector<std::tuple<std::string, std::string, const Tensor<T>*>>& tensors) {
  nlohmann::json header;
  header["format_version"] = kFormatVersion;
  header["meta"] = meta;
  nlohmann::json table = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [section, name, t] : tensors) {
    nlohmann::json rec;
    rec["section"] = section;
    rec["name"] = name;
    rec["dtype"] = "f32";
    nlohmann::json shape = nlohmann::json::array();
    for (int i = 0; i < t->shape().rank; ++i) shape.push_back(t->shape()[i]);
    rec["shape"] = shape;
    rec["offset"] = offset;
    offset += static_cast<uint64_t>(t->numel());
    table.push_back(std::move(rec));
  }
  header["tensors"] = std::move(table);
  const std::string hs = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(kMagic, 4);
  const uint64_t hlen = hs.size();
  os.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  std::vector<float> buf;
  for (const auto& [section, name, t] : tensors) {
    buf.resize(static_cast<size_t>(t->numel()));
    for (int64_t i = 0; i < t->numel(); ++i) buf[static_cast<size_t>(i)] = static_cast<float>((*t)[i]);
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!os) throw IoError("short write to " + path);
}

template <typename T>
struct Loaded {
  nlohmann::json meta;
  std::vector<Entry<T>> entries;

  const Tensor<T>* find(const std::string& section, const std::string& name) const {
    for (const auto& e : entries)
      if (e.section == section && e.name == name) return &e.tensor;
    return nullptr;
  }
};

template <typename T>
inline Loaded<T> load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError(path + ": not a tensor container (bad magic)");
  uint64_t hlen = 0;
  is.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!is || hlen > (1ull << 30)) throw IoError(path + ": corrupt header length");
  std::string hs(hlen, '\0');
  is.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw IoError(path + ": truncated header");
  nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
  if (header.is_discarded()) throw IoError(path + ": header is not valid JSON");
  if (header.value("format_version", -1) != kFormatVersion)
    throw IoError(path + ": unsupported format version");

  Loaded<T> out;
  out.meta = header.value("meta", nlohmann::json::object());
  std::vector<float> buf;
  for (const auto& rec : header.at("tensors")) {
    Entry<T> e;
    e.section = rec.at("section").get<std::string>();
    e.name = rec.at("name").get<std::string>();
    Shape shape;
    shape.rank = static_cast<int>(rec.at("shape").size());
    if (shape.rank > 4) throw IoError(path + ": tensor rank > 4");
    for (int i = 0; i < shape.rank; ++i) shape[i] = rec.at("shape")[i].get<int>();
    e.tensor = Tensor<T>(shape);
    buf.resize(static_cast<size_t>(shape.numel()));
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!is) throw IoError(path + ": truncated tensor data for " + e.name);
    for (int64_t i = 0; i < e.tensor.numel(); ++i) e.tensor[i] = static_cast<T>(buf[static_cast<size_t>(i)]);
    out.entries.push_back(std::move(e));
  }
  return out;
}

}  // namespace container

template <typename T>
inline void save_parameters(const std::string& path, const ParameterStore<T>& store,
                            const nlohmann::json& meta) {
  std::vector<std::tuple<std::string, std::string, const Tensor<T>*>> tensors;
  tensors.reserve(store.size());
  for (const auto& name : store.names()) tensors.emplace_back("params", name, &store.at(name));
  container::save(path, meta, tensors);
}

// Loads the "params" section into a fresh store; returns the container meta.
template <typename T>
inline nlohmann::json load_parameters(const std::string& path, ParameterStore<T>& store) {
  auto loaded = container::load<T>(path);
  for (auto& e : loaded.entries) {
    if (e.section != "params") continue;
    store.add(e.name, e.tensor.shape()) = e.tensor;
  }
  return loaded.meta;
}

}  // namespace mbp
