#include <cstring>
#include <stdexcept>

#include "json.hpp"
#include "paintnext/fileio.hpp"
#include "paintnext/hash.hpp"
#include "paintnext/model.hpp"

namespace paintnext {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'P', 'N', 'X', 'T', 'C', 'K', 'P', 'T'};

}  // namespace

// Layout: 8-byte magic, uint64 header length, JSON header, raw little-endian doubles.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::string payload;
  json entries = json::array();
  for (const auto& [name, tensor] : ckpt.tensors) {
    const auto& [shape, values] = tensor;
    if (ag::numel(shape) != values.size()) throw std::invalid_argument("tensor " + name + ": shape/value mismatch");
    entries.push_back({{"name", name}, {"shape", shape}, {"offset", payload.size() / sizeof(double)}});
    payload.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(double));
  }
  const json header{{"version", Checkpoint::kVersion},
                    {"config", json::parse(ckpt.config.to_json())},
                    {"meta", json::parse(ckpt.meta)},
                    {"tensors", entries},
                    {"payload_sha256", sha256_hex(payload)}};
  const std::string text = header.dump();
  const std::uint64_t length = text.size();
  std::string out(kMagic, sizeof(kMagic));
  out.append(reinterpret_cast<const char*>(&length), sizeof(length));
  out += text;
  out += payload;
  write_file_atomic(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::string where = "checkpoint " + path.string() + ": ";
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error(where + "not a checkpoint file");
  }
  std::uint64_t length = 0;
  std::memcpy(&length, bytes.data() + 8, sizeof(length));
  if (length > bytes.size() - 16) throw std::runtime_error(where + "truncated header");
  const json header = json::parse(bytes.substr(16, length));
  const int version = header.at("version").get<int>();
  if (version != Checkpoint::kVersion) {
    throw std::runtime_error(where + "unsupported version " + std::to_string(version));
  }
  const std::string_view payload(bytes.data() + 16 + length, bytes.size() - 16 - length);
  if (sha256_hex(payload) != header.at("payload_sha256").get<std::string>()) {
    throw std::runtime_error(where + "payload checksum mismatch");
  }
  Checkpoint ckpt;
  ckpt.config = ModelConfig::from_json(header.at("config").dump());
  ckpt.meta = header.at("meta").dump();
  for (const auto& e : header.at("tensors")) {
    ag::Shape shape = e.at("shape").get<ag::Shape>();
    const std::size_t offset = e.at("offset").get<std::size_t>();
    const std::size_t count = ag::numel(shape);
    if ((offset + count) * sizeof(double) > payload.size()) throw std::runtime_error(where + "tensor out of range");
    std::vector<double> values(count);
    std::memcpy(values.data(), payload.data() + offset * sizeof(double), count * sizeof(double));
    ckpt.tensors[e.at("name").get<std::string>()] = {std::move(shape), std::move(values)};
  }
  return ckpt;
}

Checkpoint model_checkpoint(const InpModel& model) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  for (const auto& [name, t] : model.parameters().entries()) {
    ckpt.tensors[name] = {t.shape(), std::vector<double>(t.data().begin(), t.data().end())};
  }
  return ckpt;
}

void load_parameters(InpModel& model, const Checkpoint& ckpt) {
  if (!(ckpt.config == model.config())) {
    throw ConfigError("checkpoint config " + ckpt.config.to_json() + " is incompatible with model config " +
                      model.config().to_json());
  }
  // Validate everything before touching the model so a failed load leaves it intact.
  for (const auto& [name, t] : model.parameters().entries()) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) throw ConfigError("checkpoint lacks parameter " + name);
    if (it->second.first != t.shape()) {
      throw ConfigError("parameter " + name + " has shape " + ag::to_string(it->second.first) + ", expected " +
                        ag::to_string(t.shape()));
    }
  }
  for (auto& [name, t] : model.parameters().entries()) {
    const auto& values = ckpt.tensors.at(name).second;
    auto dst = Tensor(t).mutable_data();
    std::copy(values.begin(), values.end(), dst.begin());
  }
}

}  // namespace paintnext
