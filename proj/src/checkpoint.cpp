#include <cstring>
#include <fstream>

#include "docplug/model.hpp"
#include "json.hpp"

namespace docplug {

namespace {

constexpr char kMagic[4] = {'D', 'P', 'C', 'K'};
constexpr uint32_t kVersion = 1;

void append_u32(std::string& s, uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_u64(std::string& s, uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t read_u32(const std::string& s, size_t& pos) {
  if (pos + 4 > s.size()) throw CorruptionError("checkpoint truncated");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(s[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

uint64_t read_u64(const std::string& s, size_t& pos) {
  if (pos + 8 > s.size()) throw CorruptionError("checkpoint truncated");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(s[pos + i])) << (8 * i);
  pos += 8;
  return v;
}

}  // namespace

struct ModelIo {
  static void save(Model& model, const Vocabulary& vocab, const std::string& path,
                   bool restamp_origin) {
    if (restamp_origin) model.restamp_origin();
    std::string blob;
    nlohmann::json params = nlohmann::json::array();
    for (const auto& p : model.params_) {
      nlohmann::json pj;
      pj["name"] = p.name();
      pj["shape"] = p.shape();
      params.push_back(pj);
      blob += format_bytes_le_f32(p.data());
    }
    Hash32 origin = model.origin_hash();

    nlohmann::json header;
    header["format"] = kVersion;
    header["config"] = nlohmann::json::parse(model.cfg_.to_json());
    header["origin_hash"] = hex(origin);
    header["params"] = params;
    header["data_sha256"] = hex(sha256(blob));
    nlohmann::json vj = nlohmann::json::array();
    for (int id = kReservedIds; id < vocab.size(); ++id) vj.push_back(vocab.token_of(id));
    header["vocab"] = vj;

    std::string header_text = header.dump();
    std::string out;
    out.append(kMagic, 4);
    append_u32(out, kVersion);
    append_u64(out, header_text.size());
    out += header_text;
    out += blob;
    write_file_atomic(path, out);
  }

  static LoadedModel load(const std::string& path) {
    std::string bytes = read_file(path);
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
      throw FormatError("not a checkpoint file: " + path);
    }
    size_t pos = 4;
    uint32_t version = read_u32(bytes, pos);
    if (version != kVersion) {
      throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    uint64_t header_len = read_u64(bytes, pos);
    if (pos + header_len > bytes.size()) throw CorruptionError("checkpoint header truncated");
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(bytes.substr(pos, header_len));
    } catch (const nlohmann::json::exception& e) {
      throw CorruptionError(std::string("checkpoint header unreadable: ") + e.what());
    }
    pos += header_len;
    std::string blob = bytes.substr(pos);
    if (hex(sha256(blob)) != header.at("data_sha256").get<std::string>()) {
      throw CorruptionError("checkpoint data checksum mismatch: " + path);
    }

    ModelConfig cfg = ModelConfig::from_json(header.at("config").dump());
    LoadedModel out;
    out.model = std::make_unique<Model>(cfg, 0);
    size_t offset = 0;
    for (const auto& pj : header.at("params")) {
      std::string name = pj.at("name").get<std::string>();
      std::vector<int> shape = pj.at("shape").get<std::vector<int>>();
      int64_t numel = 1;
      for (int dim : shape) numel *= dim;
      size_t nbytes = static_cast<size_t>(numel) * 4;
      if (offset + nbytes > blob.size()) throw CorruptionError("checkpoint blob truncated");
      Tensor p = out.model->param(name);
      if (p.shape() != shape) throw FormatError("parameter shape mismatch for " + name);
      p.apply_update(parse_bytes_le_f32(blob.substr(offset, nbytes)));
      offset += nbytes;
    }
    if (offset != blob.size()) throw CorruptionError("checkpoint blob has trailing bytes");
    out.model->set_origin(unhex32(header.at("origin_hash").get<std::string>()));

    std::string vocab_text;
    for (const auto& tok : header.at("vocab")) {
      vocab_text += tok.get<std::string>();
      vocab_text += '\n';
    }
    out.vocab = Vocabulary::deserialize(vocab_text);
    if (out.vocab.size() != cfg.vocab_size) {
      throw CorruptionError("checkpoint vocabulary size disagrees with config");
    }
    return out;
  }
};

void save_checkpoint(Model& model, const Vocabulary& vocab, const std::string& path,
                     bool restamp_origin) {
  ModelIo::save(model, vocab, path, restamp_origin);
}

LoadedModel load_checkpoint(const std::string& path) { return ModelIo::load(path); }

}  // namespace docplug
