#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedscape/layers.hpp"
#include "fedscape/tensor.hpp"

#include <nlohmann/json_fwd.hpp>

namespace fedscape {

struct ParamEntry {
  std::string name;
  Segment segment = Segment::kRoot;
  std::uint32_t tags = 0;
  Tensor value;
};

// Ordered, named collection of parameter tensors. Order is definition order
// and is preserved through serialization, so byte output is stable.
class ParamSet {
 public:
  ParamSet() = default;

  void add(ParamEntry e);
  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::vector<ParamEntry>& entries() { return entries_; }
  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }

  const ParamEntry* find(const std::string& name) const;
  ParamEntry* find(const std::string& name);

  // Names, segments, tags and shapes all match, in order.
  bool shape_compatible(const ParamSet& o) const;

  std::int64_t param_count() const;  // total scalar count
  std::uint64_t content_hash() const;

  static ParamSet snapshot(std::span<const ParamRef> refs);

 private:
  std::vector<ParamEntry> entries_;
};

// Copies matching entries of `src` into the tensors viewed by `dst`.
// Every entry of `src` must match a ref by name, segment, tags and shape.
void assign_params(std::span<const ParamRef> dst, const ParamSet& src);

// --- checkpoint / update wire format ------------------------------------------
// magic "FSPS", u32 json header length, JSON header
// {"schema":1,"meta":{...},"entries":[{"name","segment","tags","shape"}...]},
// then one FSTN tensor block per entry in order, then u64 FNV-1a checksum of
// all preceding bytes.
struct UpdateMeta {
  std::optional<std::int64_t> client_id;
  std::optional<std::int64_t> n_samples;
  std::optional<std::int64_t> round;
};

std::string serialize_paramset(const ParamSet& ps, const UpdateMeta& meta = {});
ParamSet deserialize_paramset(const std::string& bytes, UpdateMeta* meta = nullptr);
void save_paramset(const std::string& path, const ParamSet& ps, const UpdateMeta& meta = {});
ParamSet load_paramset(const std::string& path, UpdateMeta* meta = nullptr);

}  // namespace fedscape
