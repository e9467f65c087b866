#include "docplug/store.hpp"

#include <unistd.h>

#include <cstdio>
#include <cstring>
#include <fstream>

namespace docplug {

namespace {

constexpr char kMagic[4] = {'P', 'L', 'G', 'D'};
constexpr char kIndexMagic[4] = {'P', 'L', 'G', 'I'};
constexpr uint32_t kVersion = 1;
constexpr size_t kHeaderSize = 4 + 4 + 32 + 4 + 4;
constexpr size_t kTrailerSize = 8 + 4;

void put_u32(std::string& s, uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& s, uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const std::string& s, size_t& pos) {
  if (pos + 4 > s.size()) throw CorruptionError("plugin store truncated");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(s[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

uint64_t get_u64(const std::string& s, size_t& pos) {
  if (pos + 8 > s.size()) throw CorruptionError("plugin store truncated");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(s[pos + i])) << (8 * i);
  pos += 8;
  return v;
}

std::string build_header(const Hash32& model_hash, int d, uint32_t count) {
  std::string h;
  h.append(kMagic, 4);
  put_u32(h, kVersion);
  h.append(reinterpret_cast<const char*>(model_hash.data()), 32);
  put_u32(h, static_cast<uint32_t>(d));
  put_u32(h, count);
  return h;
}

// Overwrites the whole file content with fsync before returning.
void write_store_file(const std::string& path, const std::string& content) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("cannot open store for write: " + path);
  bool ok = std::fwrite(content.data(), 1, content.size(), f) == content.size();
  ok = ok && std::fflush(f) == 0;
  if (ok) {
    int fd = fileno(f);
    ok = fd >= 0 && fsync(fd) == 0;
  }
  if (std::fclose(f) != 0) ok = false;
  if (!ok) throw IoError("store write failed: " + path);
}

}  // namespace

PluginStore PluginStore::create(const std::string& path, const Hash32& model_hash, int d) {
  if (d <= 0) throw InputError("store: d must be positive");
  PluginStore store;
  store.path_ = path;
  store.model_hash_ = model_hash;
  store.d_ = d;
  store.records_end_ = kHeaderSize;

  std::string content = build_header(model_hash, d, 0);
  put_u64(content, kHeaderSize);  // empty index located right after records
  content.append(kIndexMagic, 4);
  write_store_file(path, content);
  return store;
}

PluginStore PluginStore::open(const std::string& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const IoError&) {
    throw IoError("cannot open plugin store: " + path);
  }
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("not a plugin store (bad magic): " + path);
  }
  if (bytes.size() < kHeaderSize + kTrailerSize) throw CorruptionError("plugin store truncated");
  size_t pos = 4;
  uint32_t version = get_u32(bytes, pos);
  if (version != kVersion) {
    throw FormatError("unsupported plugin store version " + std::to_string(version));
  }
  PluginStore store;
  store.path_ = path;
  std::memcpy(store.model_hash_.data(), bytes.data() + pos, 32);
  pos += 32;
  store.d_ = static_cast<int>(get_u32(bytes, pos));
  uint32_t count = get_u32(bytes, pos);

  if (std::memcmp(bytes.data() + bytes.size() - 4, kIndexMagic, 4) != 0) {
    throw CorruptionError("plugin store trailer missing (file truncated?): " + path);
  }
  size_t tpos = bytes.size() - kTrailerSize;
  uint64_t index_offset = get_u64(bytes, tpos);
  if (index_offset < kHeaderSize || index_offset > bytes.size() - kTrailerSize) {
    throw CorruptionError("plugin store index offset out of range");
  }
  store.records_end_ = index_offset;

  pos = static_cast<size_t>(index_offset);
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t id_len = get_u32(bytes, pos);
    if (pos + id_len > bytes.size()) throw CorruptionError("plugin store index truncated");
    std::string id = bytes.substr(pos, id_len);
    pos += id_len;
    uint64_t offset = get_u64(bytes, pos);
    if (offset < kHeaderSize || offset >= index_offset) {
      throw CorruptionError("plugin store record offset out of range");
    }
    if (!store.index_.emplace(id, offset).second) {
      throw CorruptionError("plugin store index has duplicate id: " + id);
    }
  }
  if (pos != bytes.size() - kTrailerSize) {
    throw CorruptionError("plugin store index size mismatch");
  }
  return store;
}

void PluginStore::save(const DocumentPlugin& plugin) {
  if (plugin.model_hash != model_hash_) {
    throw CompatError("plugin '" + plugin.doc_id + "' does not match the store's backbone hash");
  }
  if (plugin.width() != d_) throw CompatError("plugin width does not match store d");
  if (index_.count(plugin.doc_id)) throw InputError("duplicate doc_id in store: " + plugin.doc_id);

  // current bytes up to the end of records, dropping old index + trailer
  std::string bytes = read_file(path_);
  if (bytes.size() < records_end_) throw CorruptionError("plugin store shrank on disk");
  bytes.resize(records_end_);

  uint64_t record_offset = records_end_;
  put_u32(bytes, static_cast<uint32_t>(plugin.doc_id.size()));
  bytes += plugin.doc_id;
  put_u32(bytes, static_cast<uint32_t>(plugin.length()));
  bytes += format_bytes_le_f32(plugin.raw_states.data());

  index_[plugin.doc_id] = record_offset;
  records_end_ = bytes.size();

  uint64_t index_offset = bytes.size();
  for (const auto& [id, offset] : index_) {
    put_u32(bytes, static_cast<uint32_t>(id.size()));
    bytes += id;
    put_u64(bytes, offset);
  }
  put_u64(bytes, index_offset);
  bytes.append(kIndexMagic, 4);

  // refresh count in header
  std::string header = build_header(model_hash_, d_, static_cast<uint32_t>(index_.size()));
  bytes.replace(0, header.size(), header);

  write_store_file(path_, bytes);
}

DocumentPlugin PluginStore::get(const std::string& doc_id) const {
  auto it = index_.find(doc_id);
  if (it == index_.end()) throw NotFoundError("plugin not found in store: " + doc_id);
  std::string bytes = read_file(path_);
  size_t pos = static_cast<size_t>(it->second);
  uint32_t id_len = get_u32(bytes, pos);
  if (pos + id_len > bytes.size()) throw CorruptionError("plugin record truncated");
  std::string id = bytes.substr(pos, id_len);
  pos += id_len;
  if (id != doc_id) throw CorruptionError("plugin record id mismatch at offset");
  uint32_t rows = get_u32(bytes, pos);
  size_t nbytes = static_cast<size_t>(rows) * static_cast<size_t>(d_) * 4;
  if (pos + nbytes > bytes.size()) throw CorruptionError("plugin record data truncated");

  DocumentPlugin plugin;
  plugin.doc_id = doc_id;
  plugin.model_hash = model_hash_;
  plugin.raw_states = Tensor::from_data({static_cast<int>(rows), d_},
                                        parse_bytes_le_f32(bytes.substr(pos, nbytes)));
  ++reads_;
  return plugin;
}

std::vector<std::string> PluginStore::doc_ids() const {
  std::vector<std::string> ids;
  ids.reserve(index_.size());
  for (const auto& [id, off] : index_) {
    (void)off;
    ids.push_back(id);
  }
  return ids;
}

Hash32 file_sha256(const std::string& path) {
  std::string bytes = read_file(path);
  return sha256(bytes.data(), bytes.size());
}

}  // namespace docplug
