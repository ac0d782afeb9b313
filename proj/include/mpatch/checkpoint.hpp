#pragma once

// Named-tensor checkpoints, the ".mpc" container format, and weight
// interpolation between two compatible checkpoints.
//
// Container layout (all integers little-endian):
//
//   bytes 0..3   magic "MPC1" (the trailing digit is the format version)
//   bytes 4..11  u64 header length L
//   bytes 12..   L bytes of UTF-8 JSON:
//                  {"meta":{...},
//                   "tensors":[{"dtype":"f32","name":..,"nbytes":..,
//                               "offset":..,"shape":[..]}, ...]}
//   data region  tensors packed back to back in header order, row-major f32;
//                offsets are relative to the start of the data region.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mpatch/tensor.hpp"

namespace mpatch {

inline constexpr char kMagic[4] = {'M', 'P', 'C', '1'};

namespace stage {
inline constexpr const char* kZeroshot = "zeroshot";
inline constexpr const char* kFinetuned = "finetuned";
inline constexpr const char* kPatched = "patched";
inline constexpr const char* kAligned = "aligned";
}  // namespace stage

class Checkpoint {
 public:
  using Entry = std::pair<std::string, Tensor>;

  void add(const std::string& name, Tensor tensor) {
    if (index_.count(name)) {
      throw Error(ErrorKind::InvalidArgument,
                  "duplicate tensor name '" + name + "'");
    }
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(tensor));
  }

  // Replaces an existing tensor, keeping its position; shapes must agree.
  void set(const std::string& name, Tensor tensor) {
    Tensor& slot = mutable_tensor(name);
    if (slot.shape() != tensor.shape()) {
      throw Error(ErrorKind::ShapeMismatch,
                  "tensor '" + name + "' has shape " + shape_str(slot.shape()) +
                      ", replacement has " + shape_str(tensor.shape()));
    }
    slot = std::move(tensor);
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const Tensor& tensor(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw Error(ErrorKind::InvalidArgument,
                  "checkpoint has no tensor '" + name + "'");
    }
    return entries_[it->second].second;
  }

  Tensor& mutable_tensor(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw Error(ErrorKind::InvalidArgument,
                  "checkpoint has no tensor '" + name + "'");
    }
    return entries_[it->second].second;
  }

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.size();
    return n;
  }

  std::map<std::string, std::string>& meta() noexcept { return meta_; }
  const std::map<std::string, std::string>& meta() const noexcept {
    return meta_;
  }
  std::string meta_or(const std::string& key, const std::string& fallback) const {
    auto it = meta_.find(key);
    return it == meta_.end() ? fallback : it->second;
  }

  friend bool bit_equal(const Checkpoint& a, const Checkpoint& b) {
    if (a.meta_ != b.meta_ || a.entries_.size() != b.entries_.size()) {
      return false;
    }
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      if (a.entries_[i].first != b.entries_[i].first ||
          !bit_equal(a.entries_[i].second, b.entries_[i].second)) {
        return false;
      }
    }
    return true;
  }

  // Same names and bytes, meta ignored.
  friend bool tensors_bit_equal(const Checkpoint& a, const Checkpoint& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      if (a.entries_[i].first != b.entries_[i].first ||
          !bit_equal(a.entries_[i].second, b.entries_[i].second)) {
        return false;
      }
    }
    return true;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, std::string> meta_;
};

// ---- serialization ---------------------------------------------------------

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline void put_f32_le(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline float get_f32_le(const unsigned char* p) {
  const std::uint32_t bits = std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
                             (std::uint32_t(p[2]) << 16) |
                             (std::uint32_t(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

inline std::string serialize(const Checkpoint& ckpt) {
  nlohmann::json header;
  header["meta"] = nlohmann::json::object();
  for (const auto& [k, v] : ckpt.meta()) header["meta"][k] = v;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.entries()) {
    const std::uint64_t nbytes = t.size() * 4;
    header["tensors"].push_back({{"name", name},
                                 {"shape", t.shape()},
                                 {"dtype", "f32"},
                                 {"offset", offset},
                                 {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string json = header.dump();
  std::string out;
  out.reserve(12 + json.size() + offset);
  out.append(kMagic, 4);
  detail::put_u64_le(out, json.size());
  out += json;
  for (const auto& [name, t] : ckpt.entries()) {
    for (float f : t.data()) detail::put_f32_le(out, f);
  }
  return out;
}

inline Checkpoint deserialize(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 4 || std::memcmp(p, kMagic, 3) != 0) {
    throw Error(ErrorKind::BadMagic, "not an .mpc container (bad magic bytes)");
  }
  if (p[3] != static_cast<unsigned char>(kMagic[3])) {
    throw Error(ErrorKind::VersionMismatch,
                std::string("unsupported .mpc format version '") +
                    static_cast<char>(p[3]) + "'");
  }
  if (bytes.size() < 12) {
    throw Error(ErrorKind::Truncated, "file ends inside the header length");
  }
  const std::uint64_t header_len = detail::get_u64_le(p + 4);
  if (header_len > bytes.size() - 12) {
    throw Error(ErrorKind::Truncated, "file ends inside the JSON header");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12,
                                   bytes.begin() + 12 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::MalformedHeader, std::string("bad JSON header: ") + e.what());
  }
  const std::uint64_t data_start = 12 + header_len;
  const std::uint64_t data_len = bytes.size() - data_start;

  Checkpoint ckpt;
  struct Extent {
    std::uint64_t offset, nbytes;
    std::string name;
  };
  std::vector<Extent> extents;
  try {
    for (const auto& [k, v] : header.at("meta").items()) {
      ckpt.meta()[k] = v.get<std::string>();
    }
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
      if (entry.at("dtype").get<std::string>() != "f32") {
        throw Error(ErrorKind::MalformedHeader,
                    "tensor '" + name + "' has unsupported dtype");
      }
      if (shape.empty() || nbytes != numel(shape) * 4) {
        throw Error(ErrorKind::MalformedHeader,
                    "tensor '" + name + "' byte count does not match its shape");
      }
      if (offset > data_len || nbytes > data_len - offset) {
        throw Error(ErrorKind::Truncated,
                    "tensor '" + name + "' extends past the end of the data region");
      }
      extents.push_back({offset, nbytes, name});
      std::vector<float> data(nbytes / 4);
      const unsigned char* src = p + data_start + offset;
      for (std::size_t i = 0; i < data.size(); ++i) {
        data[i] = detail::get_f32_le(src + 4 * i);
      }
      ckpt.add(name, Tensor(shape, std::move(data)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::MalformedHeader, std::string("bad JSON header: ") + e.what());
  }
  std::sort(extents.begin(), extents.end(),
            [](const Extent& a, const Extent& b) { return a.offset < b.offset; });
  for (std::size_t i = 1; i < extents.size(); ++i) {
    if (extents[i].offset < extents[i - 1].offset + extents[i - 1].nbytes) {
      throw Error(ErrorKind::OverlappingExtents,
                  "tensors '" + extents[i - 1].name + "' and '" +
                      extents[i].name + "' overlap");
    }
  }
  return ckpt;
}

inline void save(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open '" + path + "' for writing");
  const std::string bytes = serialize(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::Io, "write to '" + path + "' failed");
}

inline Checkpoint load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

// ---- compatibility and interpolation --------------------------------------

struct ShapeConflict {
  std::string name;
  Shape a, b;
};

struct CompatReport {
  std::vector<std::string> missing;  // in a, absent from b
  std::vector<std::string> extra;    // in b, absent from a
  std::vector<ShapeConflict> conflicts;

  bool ok() const { return missing.empty() && extra.empty() && conflicts.empty(); }

  std::string describe() const {
    if (ok()) return "compatible";
    std::ostringstream os;
    for (const auto& n : missing) os << "missing '" << n << "'; ";
    for (const auto& n : extra) os << "extra '" << n << "'; ";
    for (const auto& c : conflicts) {
      os << "shape conflict '" << c.name << "' " << shape_str(c.a) << " vs "
         << shape_str(c.b) << "; ";
    }
    std::string s = os.str();
    s.resize(s.size() - 2);
    return s;
  }
};

inline CompatReport compat_check(const Checkpoint& a, const Checkpoint& b) {
  CompatReport report;
  for (const auto& [name, t] : a.entries()) {
    if (!b.contains(name)) {
      report.missing.push_back(name);
    } else if (b.tensor(name).shape() != t.shape()) {
      report.conflicts.push_back({name, t.shape(), b.tensor(name).shape()});
    }
  }
  for (const auto& [name, t] : b.entries()) {
    if (!a.contains(name)) report.extra.push_back(name);
  }
  return report;
}

inline std::string format_alpha(double alpha) {
  std::ostringstream os;
  os.precision(17);
  os << alpha;
  return os.str();
}

// Elementwise (1 - alpha) * zs + alpha * ft, evaluated in double and rounded
// once. The endpoints copy their operand so they are exact to the byte.
inline Checkpoint interpolate(const Checkpoint& zs, const Checkpoint& ft,
                              double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw Error(ErrorKind::InvalidArgument,
                "alpha must lie in [0, 1], got " + format_alpha(alpha));
  }
  const CompatReport report = compat_check(zs, ft);
  if (!report.ok()) {
    throw Error(ErrorKind::Incompatible,
                "cannot interpolate incompatible checkpoints: " + report.describe());
  }
  Checkpoint out;
  for (const auto& [name, a] : zs.entries()) {
    const Tensor& b = ft.tensor(name);
    if (alpha == 0.0) {
      out.add(name, a);
      continue;
    }
    if (alpha == 1.0) {
      out.add(name, b);
      continue;
    }
    Tensor t(a.shape());
    for (std::size_t i = 0; i < t.size(); ++i) {
      t[i] = static_cast<float>((1.0 - alpha) * a[i] + alpha * static_cast<double>(b[i]));
    }
    out.add(name, std::move(t));
  }
  out.meta() = zs.meta();
  out.meta()["stage"] = stage::kPatched;
  out.meta()["alpha"] = format_alpha(alpha);
  return out;
}

}  // namespace mpatch
