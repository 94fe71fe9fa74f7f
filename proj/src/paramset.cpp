#include "fedscape/paramset.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fedscape/rng.hpp"

namespace fedscape {

using nlohmann::json;

void ParamSet::add(ParamEntry e) {
  if (find(e.name) != nullptr) throw TensorError("duplicate parameter name: " + e.name);
  entries_.push_back(std::move(e));
}

const ParamEntry* ParamSet::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

ParamEntry* ParamSet::find(const std::string& name) {
  for (auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

bool ParamSet::shape_compatible(const ParamSet& o) const {
  if (entries_.size() != o.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = o.entries_[i];
    if (a.name != b.name || a.segment != b.segment || a.tags != b.tags ||
        a.value.shape() != b.value.shape()) {
      return false;
    }
  }
  return true;
}

std::int64_t ParamSet::param_count() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

std::uint64_t ParamSet::content_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& e : entries_) {
    h = fnv1a64(e.name.data(), e.name.size(), h);
    h = tensor_hash(e.value, h);
  }
  return h;
}

ParamSet ParamSet::snapshot(std::span<const ParamRef> refs) {
  ParamSet ps;
  for (const ParamRef& r : refs) {
    ps.add({r.name, r.segment, r.tags, *r.value});
  }
  return ps;
}

void assign_params(std::span<const ParamRef> dst, const ParamSet& src) {
  for (const ParamEntry& e : src.entries()) {
    bool found = false;
    for (const ParamRef& r : dst) {
      if (r.name != e.name) continue;
      if (r.segment != e.segment || r.tags != e.tags || !r.value->same_shape(e.value)) {
        throw TensorError("assign_params: incompatible entry " + e.name);
      }
      *r.value = e.value;
      found = true;
      break;
    }
    if (!found) throw TensorError("assign_params: no target for " + e.name);
  }
}

// --- serialization -------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'F', 'S', 'P', 'S'};

std::vector<std::string> tag_names(std::uint32_t tags) {
  std::vector<std::string> v;
  if (tags & kTagBatchNorm) v.push_back("batchnorm");
  return v;
}

std::uint32_t tags_from_names(const json& arr) {
  std::uint32_t tags = 0;
  for (const auto& t : arr) {
    if (t.get<std::string>() == "batchnorm") {
      tags |= kTagBatchNorm;
    } else {
      throw TensorError("unknown tag in header: " + t.get<std::string>());
    }
  }
  return tags;
}

}  // namespace

std::string serialize_paramset(const ParamSet& ps, const UpdateMeta& meta) {
  json header;
  header["schema"] = 1;
  if (meta.client_id || meta.n_samples || meta.round) {
    json m;
    if (meta.client_id) m["client_id"] = *meta.client_id;
    if (meta.n_samples) m["n_samples"] = *meta.n_samples;
    if (meta.round) m["round"] = *meta.round;
    header["meta"] = m;
  }
  // Entries are compact arrays [name, segment, tags, shape]; header bytes
  // count against the payload budget.
  json entries = json::array();
  for (const auto& e : ps.entries()) {
    entries.push_back(json::array(
        {e.name, segment_name(e.segment), tag_names(e.tags), e.value.shape()}));
  }
  header["entries"] = entries;
  std::string header_str = header.dump();

  std::string out;
  out.append(kMagic, 4);
  std::uint32_t len = static_cast<std::uint32_t>(header_str.size());
  out.append(reinterpret_cast<const char*>(&len), 4);
  out += header_str;
  for (const auto& e : ps.entries()) write_tensor(out, e.value);
  std::uint64_t checksum = fnv1a64(out.data(), out.size());
  out.append(reinterpret_cast<const char*>(&checksum), 8);
  return out;
}

ParamSet deserialize_paramset(const std::string& bytes, UpdateMeta* meta) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw TensorError("bad paramset magic");
  }
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  std::uint64_t computed = fnv1a64(bytes.data(), bytes.size() - 8);
  if (stored != computed) throw TensorError("paramset checksum mismatch");

  std::uint32_t len = 0;
  std::memcpy(&len, bytes.data() + 4, 4);
  if (8 + static_cast<std::size_t>(len) > bytes.size() - 8) {
    throw TensorError("truncated paramset header");
  }
  json header = json::parse(bytes.substr(8, len));
  if (meta != nullptr && header.contains("meta")) {
    const json& m = header["meta"];
    if (m.contains("client_id")) meta->client_id = m["client_id"].get<std::int64_t>();
    if (m.contains("n_samples")) meta->n_samples = m["n_samples"].get<std::int64_t>();
    if (m.contains("round")) meta->round = m["round"].get<std::int64_t>();
  }

  ParamSet ps;
  std::size_t offset = 8 + len;
  for (const auto& je : header["entries"]) {
    ParamEntry e;
    e.name = je.at(0).get<std::string>();
    e.segment = segment_from_name(je.at(1).get<std::string>());
    e.tags = tags_from_names(je.at(2));
    e.value = read_tensor(bytes, offset);
    std::vector<std::int64_t> expect = je.at(3).get<std::vector<std::int64_t>>();
    if (e.value.shape() != expect) throw TensorError("payload shape disagrees with header");
    ps.add(std::move(e));
  }
  if (offset != bytes.size() - 8) throw TensorError("trailing bytes in paramset stream");
  return ps;
}

void save_paramset(const std::string& path, const ParamSet& ps, const UpdateMeta& meta) {
  std::string buf = serialize_paramset(ps, meta);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw TensorError("cannot open for write: " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw TensorError("write failed: " + path);
}

ParamSet load_paramset(const std::string& path, UpdateMeta* meta) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw TensorError("cannot open paramset file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  std::string buf = ss.str();
  return deserialize_paramset(buf, meta);
}

}  // namespace fedscape
