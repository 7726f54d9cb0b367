#include "symkfcv/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "symkfcv/io.hpp"

namespace symkfcv {

namespace {

constexpr char kMagic[8] = {'S', 'Y', 'M', 'K', 'F', 'C', 'V', '\0'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_le(std::string& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  if (pos + sizeof(T) > in.size()) throw CheckpointError("checkpoint truncated");
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bits |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  pos += sizeof(T);
  return std::bit_cast<T>(bits);
}

nlohmann::ordered_json tensor_table(const ParamLayout& layout) {
  auto table = nlohmann::ordered_json::array();
  for (const auto& t : layout.tensors) table.push_back({{"name", t.name}, {"shape", t.shape}});
  return table;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  const ModelConfig& cfg = params.config();
  nlohmann::ordered_json header;
  header["format"] = "symkfcv-checkpoint";
  header["config"] = to_json(cfg);
  header["config_hash"] = hash_hex(config_hash(cfg));
  header["vocabulary"] = Vocabulary::standard(cfg.variable_count).tokens();
  header["tensors"] = tensor_table(params.layout());
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put_le(out, kVersion);
  put_le(out, static_cast<std::uint64_t>(text.size()));
  out += text;
  out.reserve(out.size() + params.values().size() * 8);
  for (double v : params.values()) put_le(out, v);
  write_file(path, out);
}

ModelParams load_checkpoint(const std::filesystem::path& path, std::optional<std::uint64_t> expected_hash) {
  const std::string in = read_file(path);
  if (in.size() < sizeof(kMagic) || std::memcmp(in.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a checkpoint file: " + path.string());
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = get_le<std::uint32_t>(in, pos);
  if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto header_len = get_le<std::uint64_t>(in, pos);
  if (pos + header_len > in.size()) throw CheckpointError("checkpoint truncated in header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.substr(pos, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }
  pos += header_len;

  ModelConfig cfg;
  std::string stored_hash;
  try {
    cfg = model_config_from_json(header.at("config"));
    stored_hash = header.at("config_hash").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header missing field: ") + e.what());
  }
  const std::string actual_hash = hash_hex(config_hash(cfg));
  if (stored_hash != actual_hash) {
    throw CheckpointError("config hash mismatch: header says " + stored_hash + ", config hashes to " + actual_hash);
  }
  if (expected_hash && *expected_hash != config_hash(cfg)) {
    throw CheckpointError("config hash mismatch: checkpoint " + actual_hash + ", expected " +
                          hash_hex(*expected_hash));
  }
  if (header.value("vocabulary", std::vector<std::string>{}) != Vocabulary::standard(cfg.variable_count).tokens()) {
    throw CheckpointError("checkpoint vocabulary differs from this build's vocabulary");
  }
  ModelParams params(cfg);
  if (nlohmann::json(tensor_table(params.layout())) != header.value("tensors", nlohmann::json::array())) {
    throw CheckpointError("checkpoint tensor table does not match its config");
  }
  auto values = params.values();
  if (in.size() - pos != values.size() * 8) {
    throw CheckpointError("checkpoint payload has " + std::to_string(in.size() - pos) + " bytes, expected " +
                          std::to_string(values.size() * 8));
  }
  for (double& v : values) v = get_le<double>(in, pos);
  return params;
}

}  // namespace symkfcv
