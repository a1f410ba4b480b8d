#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "glad/error.hpp"
#include "glad/models.hpp"

namespace glad {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'G', 'L', 'A', 'D', 'C', 'K', 'P', 'T'};

nlohmann::ordered_json model_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["d_in"] = c.d_in;
  j["hidden"] = c.hidden;
  j["embed"] = c.embed;
  j["temperature"] = c.temperature;
  j["activation"] = to_string(c.activation);
  j["lora_rank"] = c.lora.rank;
  j["lora_gamma"] = c.lora.gamma;
  j["lora_init_std"] = c.lora.init_std;
  return j;
}

ModelConfig model_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_in = j.at("d_in").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.embed = j.at("embed").get<std::size_t>();
  c.temperature = j.at("temperature").get<double>();
  c.activation = parse_activation(j.at("activation").get<std::string>());
  c.lora.rank = j.at("lora_rank").get<std::size_t>();
  c.lora.gamma = j.at("lora_gamma").get<double>();
  c.lora.init_std = j.at("lora_init_std").get<double>();
  return c;
}

nlohmann::ordered_json alignnet_json(const AlignNetConfig& c) {
  nlohmann::ordered_json j;
  j["hidden1"] = c.hidden1;
  j["hidden2"] = c.hidden2;
  j["activation"] = to_string(c.activation);
  j["renormalize"] = c.renormalize;
  return j;
}

AlignNetConfig alignnet_from_json(const nlohmann::json& j) {
  AlignNetConfig c;
  c.hidden1 = j.at("hidden1").get<std::size_t>();
  c.hidden2 = j.at("hidden2").get<std::size_t>();
  c.activation = parse_activation(j.at("activation").get<std::string>());
  c.renormalize = j.at("renormalize").get<bool>();
  return c;
}

void write_file(const std::filesystem::path& path, const nlohmann::ordered_json& manifest,
                const std::vector<NamedTensor>& tensors) {
  const std::string m = manifest.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(kMagic, sizeof(kMagic));
  const std::uint32_t version = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint64_t len = m.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(m.data(), static_cast<std::streamsize>(m.size()));
  for (const auto& [name, t] : tensors) {
    out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

nlohmann::ordered_json tensor_entries(const std::vector<NamedTensor>& tensors) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    nlohmann::ordered_json e;
    e["name"] = name;
    e["shape"] = t.shape();
    e["offset"] = offset;
    e["trainable"] = t.requires_grad();
    arr.push_back(e);
    offset += t.size();
  }
  return arr;
}

struct Loaded {
  nlohmann::json manifest;
  std::vector<double> payload;
};

Loaded read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  auto take = [&](std::size_t n) {
    if (pos + n > bytes.size()) throw DataError("checkpoint '" + path.string() + "' is truncated");
    const char* p = bytes.data() + pos;
    pos += n;
    return p;
  };
  if (std::memcmp(take(8), kMagic, 8) != 0) throw DataError("'" + path.string() + "' is not a checkpoint");
  std::uint32_t version;
  std::memcpy(&version, take(sizeof(version)), sizeof(version));
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  std::uint64_t len;
  std::memcpy(&len, take(sizeof(len)), sizeof(len));
  Loaded out;
  const char* m = take(len);
  try {
    out.manifest = nlohmann::json::parse(m, m + len);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }
  const std::size_t rest = bytes.size() - pos;
  if (rest % sizeof(double) != 0) throw DataError("checkpoint payload is not a whole number of f64 values");
  out.payload.resize(rest / sizeof(double));
  std::memcpy(out.payload.data(), bytes.data() + pos, rest);
  return out;
}

// Copies payload values into the model's tensors by name and restores the
// trainable flag of each.
void restore_tensors(const nlohmann::json& entries, const std::vector<double>& payload,
                     const std::vector<NamedTensor>& tensors) {
  std::map<std::string, Tensor> by_name(tensors.begin(), tensors.end());
  if (entries.size() != by_name.size()) throw DataError("checkpoint tensor count does not match the model");
  std::size_t expected_offset = 0;
  for (const auto& e : entries) {
    const auto name = e.at("name").get<std::string>();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint tensor '" + name + "' is unknown to the model");
    Tensor t = it->second;
    if (e.at("shape").get<Shape>() != t.shape()) throw DataError("checkpoint tensor '" + name + "' has a wrong shape");
    const auto offset = e.at("offset").get<std::size_t>();
    if (offset != expected_offset || offset + t.size() > payload.size()) {
      throw DataError("checkpoint tensor '" + name + "' has a bad offset");
    }
    std::copy_n(payload.begin() + static_cast<std::ptrdiff_t>(offset), t.size(), t.mutable_data().begin());
    t.set_requires_grad(e.at("trainable").get<bool>());
    expected_offset += t.size();
  }
  if (expected_offset != payload.size()) throw DataError("checkpoint payload has trailing values");
}

DualEncoder make_backbone(const nlohmann::json& m) {
  DualEncoder model(model_from_json(m.at("model")), m.at("seed").get<std::uint64_t>());
  if (m.at("frozen").get<bool>()) model.freeze();
  return model;
}

}  // namespace

void save_backbone(const std::filesystem::path& path, const DualEncoder& model) {
  const auto tensors = model.named_tensors();
  nlohmann::ordered_json m;
  m["kind"] = "backbone";
  m["model"] = model_json(model.config());
  m["seed"] = model.seed();
  m["frozen"] = model.frozen();
  m["tensors"] = tensor_entries(tensors);
  write_file(path, m, tensors);
}

DualEncoder load_backbone(const std::filesystem::path& path) {
  const auto f = read_file(path);
  if (f.manifest.value("kind", "") != "backbone") throw DataError("'" + path.string() + "' is not a backbone checkpoint");
  DualEncoder model = make_backbone(f.manifest);
  restore_tensors(f.manifest.at("tensors"), f.payload, model.named_tensors());
  return model;
}

void save_checkpoint(const std::filesystem::path& path, const AdaptedModel& model) {
  const auto tensors = model.named_tensors();
  nlohmann::ordered_json m;
  m["kind"] = "adapted";
  m["model"] = model_json(model.backbone().config());
  m["seed"] = model.backbone().seed();
  m["frozen"] = model.backbone().frozen();
  m["alignnet"] = model.has_alignnet() ? alignnet_json(model.alignnet().config()) : nlohmann::ordered_json();
  m["alignnet_at_eval"] = model.alignnet_at_eval;
  m["tensors"] = tensor_entries(tensors);
  write_file(path, m, tensors);
}

AdaptedModel load_checkpoint(const std::filesystem::path& path) {
  const auto f = read_file(path);
  if (f.manifest.value("kind", "") != "adapted") throw DataError("'" + path.string() + "' is not a model checkpoint");
  DualEncoder backbone = make_backbone(f.manifest);
  std::optional<AlignNet> align;
  if (!f.manifest.at("alignnet").is_null()) {
    Rng rng(0);
    align.emplace(backbone.config().embed, alignnet_from_json(f.manifest.at("alignnet")), rng);
  }
  AdaptedModel model(std::move(backbone), std::move(align));
  model.alignnet_at_eval = f.manifest.at("alignnet_at_eval").get<bool>();
  restore_tensors(f.manifest.at("tensors"), f.payload, model.named_tensors());
  return model;
}

}  // namespace glad
