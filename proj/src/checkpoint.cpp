#include "forceworld/checkpoint.hpp"

#include <torch/torch.h>

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "forceworld/clip_io.hpp"
#include "forceworld/errors.hpp"
#include "forceworld/util.hpp"

namespace forceworld::ckpt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'F', 'W', 'A', 'R', 'C', 'H', '0', '1'};

}  // namespace

void write_archive(const fs::path& path, const NamedTensors& tensors) {
  json entries = json::array();
  uint64_t offset = 0;
  std::vector<torch::Tensor> blobs;
  for (const auto& [name, tensor] : tensors) {
    auto t = tensor.detach().contiguous().cpu();
    entries.push_back({{"name", name},
                       {"dtype", world::dtype_name(t.scalar_type())},
                       {"shape", t.sizes().vec()},
                       {"offset", offset},
                       {"nbytes", t.nbytes()}});
    offset += t.nbytes();
    blobs.push_back(t);
  }
  const std::string header = json{{"tensors", entries}}.dump();
  std::string bytes;
  bytes.reserve(16 + header.size() + offset);
  bytes.append(kMagic, sizeof(kMagic));
  const uint64_t header_len = header.size();
  bytes.append(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  bytes.append(header);
  for (const auto& t : blobs) bytes.append(static_cast<const char*>(t.data_ptr()), t.nbytes());
  util::write_text_atomic(path, bytes);
}

NamedTensors read_archive(const fs::path& path) {
  std::string bytes;
  try {
    bytes = util::read_text(path);
  } catch (const std::runtime_error& e) {
    throw FormatError(e.what());
  }
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError(path.string() + ": not a forceworld archive", 0);
  }
  uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data() + 8, sizeof(header_len));
  if (16 + header_len > bytes.size()) throw FormatError(path.string() + ": truncated header", 16);
  json header;
  try {
    header = json::parse(bytes.substr(16, header_len));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": bad header: " + e.what(), 16 + static_cast<long long>(e.byte));
  }
  const size_t data_start = 16 + header_len;
  NamedTensors out;
  for (const auto& e : header.at("tensors")) {
    const auto offset = e.at("offset").get<uint64_t>();
    const auto nbytes = e.at("nbytes").get<uint64_t>();
    if (data_start + offset + nbytes > bytes.size()) {
      throw FormatError(path.string() + ": tensor '" + e.at("name").get<std::string>() + "' truncated",
                        static_cast<long long>(bytes.size()));
    }
    auto t = torch::empty(e.at("shape").get<std::vector<int64_t>>(),
                          torch::TensorOptions().dtype(world::dtype_from_name(e.at("dtype").get<std::string>())));
    if (t.nbytes() != nbytes) throw FormatError("tensor '" + e.at("name").get<std::string>() + "' size mismatch");
    std::memcpy(t.data_ptr(), bytes.data() + data_start + offset, nbytes);
    out.emplace_back(e.at("name").get<std::string>(), t);
  }
  return out;
}

fs::path sidecar_path(const fs::path& archive) {
  auto p = archive;
  p += ".json";
  return p;
}

NamedTensors model_tensors(const torch::nn::Module& module) {
  NamedTensors out;
  for (const auto& item : module.named_parameters()) out.emplace_back("model/" + item.key(), item.value());
  for (const auto& item : module.named_buffers()) out.emplace_back("buffer/" + item.key(), item.value());
  return out;
}

void load_model_tensors(torch::nn::Module& module, const NamedTensors& tensors) {
  std::map<std::string, torch::Tensor> by_name(tensors.begin(), tensors.end());
  torch::NoGradGuard no_grad;
  auto assign = [&](const std::string& key, torch::Tensor& target) {
    auto it = by_name.find(key);
    if (it == by_name.end()) throw FormatError("checkpoint lacks tensor '" + key + "'");
    if (!it->second.sizes().equals(target.sizes())) {
      throw FormatError("checkpoint tensor '" + key + "' has shape " + c10::str(it->second.sizes()) + ", model expects " +
                        c10::str(target.sizes()));
    }
    target.copy_(it->second);
  };
  for (auto& item : module.named_parameters()) assign("model/" + item.key(), item.value());
  for (auto& item : module.named_buffers()) assign("buffer/" + item.key(), item.value());
}

std::string file_fingerprint(const fs::path& archive) {
  uint64_t h = util::fnv1a(util::read_text(archive));
  const auto side = sidecar_path(archive);
  if (fs::exists(side)) h = util::fnv1a(util::read_text(side), h);
  return util::hex64(h);
}

ModelBundle load_model(const fs::path& archive) {
  ModelBundle bundle;
  try {
    bundle.sidecar = json::parse(util::read_text(sidecar_path(archive)));
  } catch (const json::parse_error& e) {
    throw FormatError(sidecar_path(archive).string() + ": " + e.what(), static_cast<long long>(e.byte));
  } catch (const std::runtime_error& e) {
    throw FormatError(e.what());
  }
  bundle.net_cfg = bundle.sidecar.at("net").get<net::NetConfig>();
  bundle.flow_cfg = bundle.sidecar.at("flow").get<flow::FlowMatchConfig>();
  bundle.net = net::VectorFieldRegressor(bundle.net_cfg);
  load_model_tensors(*bundle.net, read_archive(archive));
  bundle.net->eval();
  bundle.fingerprint = file_fingerprint(archive);
  return bundle;
}

void save_model(const fs::path& archive, net::VectorFieldRegressor& net, const flow::FlowMatchConfig& flow_cfg,
                json extra_sidecar) {
  write_archive(archive, model_tensors(*net));
  json side = std::move(extra_sidecar);
  side["net"] = net->config();
  side["flow"] = flow_cfg;
  side["code_version"] = kCodeVersion;
  util::write_text_atomic(sidecar_path(archive), side.dump(2));
}

}  // namespace forceworld::ckpt
