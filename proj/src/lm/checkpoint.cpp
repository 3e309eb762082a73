#include <bit>
#include <cstring>
#include <fstream>

#include "gcnforge/error.hpp"
#include "gcnforge/lm.hpp"
#include "gcnforge/util.hpp"
#include "json.hpp"

namespace gcnforge {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written as raw little-endian doubles");

namespace {

constexpr char kMagic[8] = {'G', 'C', 'N', 'F', 'C', 'K', 'P', 'T'};
constexpr int kFormatVersion = 1;

nlohmann::json config_json(const LMConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},       {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"max_seq", c.max_seq},       {"dropout", c.dropout},
          {"init_scale", c.init_scale}};
}

LMConfig config_from(const nlohmann::json& j) {
  LMConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.max_seq = j.at("max_seq").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.init_scale = j.at("init_scale").get<double>();
  return c;
}

}  // namespace

void save_checkpoint(const LMModel& model, const std::filesystem::path& path) {
  std::string payload;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, t] : model.named_parameters()) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}});
    const auto data = t.data();
    payload.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(double));
  }
  const nlohmann::json header = {{"format_version", kFormatVersion},
                                 {"config", config_json(model.config)},
                                 {"tensors", std::move(tensors)},
                                 {"payload_bytes", payload.size()},
                                 {"checksum", sha256_hex(payload)}};
  const std::string head = header.dump();
  std::string bytes(kMagic, sizeof(kMagic));
  const std::uint64_t len = head.size();
  bytes.append(reinterpret_cast<const char*>(&len), sizeof(len));
  bytes += head;
  bytes += payload;
  write_file(path, bytes);
}

LMModel load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::string where = "checkpoint '" + path.string() + "'";
  if (bytes.size() < sizeof(kMagic) + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IoError(where + ": not a checkpoint file");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + sizeof(kMagic), sizeof(len));
  const std::size_t head_at = sizeof(kMagic) + sizeof(len);
  if (len > bytes.size() - head_at) throw ChecksumError(where + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(head_at, len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(where + ": malformed header (" + e.what() + ")");
  }
  if (header.value("format_version", 0) != kFormatVersion) {
    throw IoError(where + ": unsupported format version " + header.value("format_version", nlohmann::json()).dump());
  }
  const std::string_view payload = std::string_view(bytes).substr(head_at + len);
  if (payload.size() != header.at("payload_bytes").get<std::size_t>()) {
    throw ChecksumError(where + ": payload is " + std::to_string(payload.size()) +
                        " bytes, header declares " + header.at("payload_bytes").dump());
  }
  if (sha256_hex(payload) != header.at("checksum").get<std::string>()) {
    throw ChecksumError(where + ": checksum mismatch");
  }

  LMConfig config;
  try {
    config = config_from(header.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(where + ": bad config (" + e.what() + ")");
  }
  LMModel model = init_lm(config, 0);
  const auto params = model.named_parameters();
  const auto& table = header.at("tensors");
  if (table.size() != params.size()) {
    throw ShapeError(where + ": holds " + std::to_string(table.size()) + " tensors, config needs " +
                     std::to_string(params.size()));
  }
  std::size_t offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto t = params[i].tensor;
    const auto name = table[i].at("name").get<std::string>();
    const auto shape = table[i].at("shape").get<Shape>();
    if (name != params[i].name) {
      throw ShapeError(where + ": tensor " + std::to_string(i) + " is '" + name + "', expected '" +
                       params[i].name + "'");
    }
    if (shape != t.shape()) {
      throw ShapeError(where + ": tensor '" + name + "' has shape " + shape_str(shape) +
                       " but the config implies " + shape_str(t.shape()));
    }
    const std::size_t nbytes = t.numel() * sizeof(double);
    if (offset + nbytes > payload.size()) throw ChecksumError(where + ": payload too short");
    std::memcpy(t.data().data(), payload.data() + offset, nbytes);
    offset += nbytes;
  }
  if (offset != payload.size()) throw ShapeError(where + ": payload has trailing bytes");
  for (const auto& p : params) require_finite(p.tensor, p.name);
  return model;
}

}  // namespace gcnforge
