#include "mpbm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mpbm {

namespace {

constexpr char kMagic[8] = {'M', 'P', 'B', 'M', 'C', 'K', 'P', 'T'};

void put_u64_le(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t get_u64_le(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

nlohmann::json spec_to_json(const ModelSpec& spec) {
  return nlohmann::json{{"arch", spec.arch},
                        {"input_shape", spec.input_shape},
                        {"feature_dim", spec.feature_dim},
                        {"hidden", spec.hidden},
                        {"num_classes", spec.num_classes}};
}

ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.arch = j.at("arch").get<std::string>();
  s.input_shape = j.at("input_shape").get<std::vector<size_t>>();
  s.feature_dim = j.at("feature_dim").get<size_t>();
  s.hidden = j.at("hidden").get<size_t>();
  s.num_classes = j.at("num_classes").get<size_t>();
  return s;
}

void save_checkpoint(const std::string& path, const CheckpointMeta& meta, const ParamSet& params) {
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& it : params.items)
    tensors.push_back({{"name", it.name}, {"shape", it.value.shape()}});
  nlohmann::json header{{"format_version", meta.format_version},
                        {"kind", meta.kind},
                        {"arch", spec_to_json(meta.spec)},
                        {"seed", meta.seed},
                        {"step", meta.step},
                        {"tensors", tensors}};
  std::string hs = header.dump();

  std::string body;
  body.reserve(16 + hs.size() + 8 * params.count());
  body.append(kMagic, sizeof(kMagic));
  uint32_t hlen = static_cast<uint32_t>(hs.size());
  for (int i = 0; i < 4; ++i) body.push_back(static_cast<char>((hlen >> (8 * i)) & 0xff));
  body += hs;
  for (const auto& it : params.items)
    for (size_t k = 0; k < it.value.size(); ++k)
      put_u64_le(body, std::bit_cast<uint64_t>(it.value[k]));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  f.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!f) throw std::runtime_error("checkpoint: short write to '" + path + "'");
}

std::pair<CheckpointMeta, ParamSet> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (raw.size() < 12 || std::memcmp(raw.data(), kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint: '" + path + "' has no MPBMCKPT magic");
  const auto* p = reinterpret_cast<const unsigned char*>(raw.data());
  uint32_t hlen = 0;
  for (int i = 0; i < 4; ++i) hlen |= static_cast<uint32_t>(p[8 + i]) << (8 * i);
  if (raw.size() < 12 + static_cast<size_t>(hlen))
    throw std::runtime_error("checkpoint: truncated header in '" + path + "'");
  nlohmann::json header = nlohmann::json::parse(raw.substr(12, hlen));

  CheckpointMeta meta;
  meta.format_version = header.at("format_version").get<int>();
  if (meta.format_version != 1)
    throw std::runtime_error("checkpoint: unsupported format version " +
                             std::to_string(meta.format_version));
  meta.kind = header.at("kind").get<std::string>();
  meta.spec = spec_from_json(header.at("arch"));
  meta.seed = header.at("seed").get<uint64_t>();
  meta.step = header.at("step").get<int64_t>();

  ParamSet params;
  size_t off = 12 + hlen;
  for (const auto& t : header.at("tensors")) {
    std::string name = t.at("name").get<std::string>();
    auto shape = t.at("shape").get<std::vector<size_t>>();
    size_t n = shape_numel(shape);
    if (off + 8 * n > raw.size())
      throw std::runtime_error("checkpoint: truncated payload for tensor '" + name + "'");
    std::vector<double> data(n);
    for (size_t k = 0; k < n; ++k) {
      data[k] = std::bit_cast<double>(get_u64_le(p + off));
      off += 8;
    }
    params.items.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  if (off != raw.size())
    throw std::runtime_error("checkpoint: trailing bytes in '" + path + "'");
  return {std::move(meta), std::move(params)};
}

}  // namespace mpbm
