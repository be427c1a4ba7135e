// PMCK checkpoints: "PMCK", u32 version, u32 header length, a UTF-8 JSON
// header, then one contiguous little-endian float32 blob. The header lists
// every tensor as {name, shape, offset} with offset in bytes from the start
// of the blob, plus architecture, epoch and config hash.
#pragma once

#include "bagmix/aggregator.hpp"
#include "bagmix/bagio.hpp"

#include <nlohmann/json.hpp>

namespace bagmix {

inline constexpr std::array<char, 4> kCheckpointMagic{'P', 'M', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json to_json(const ArchConfig& a) {
  return {{"input_dim", a.input_dim},   {"hidden", a.hidden},
          {"layers", a.layers},         {"heads", a.heads},
          {"ff_ratio", a.ff_ratio},     {"pool_dim", a.pool_dim},
          {"projector", a.projector},   {"identity_projector", a.identity_projector},
          {"positional_encoding", a.positional_encoding},
          {"num_classes", a.num_classes}};
}

inline ArchConfig arch_from_json(const nlohmann::json& j) {
  ArchConfig a;
  a.input_dim = j.value("input_dim", a.input_dim);
  a.hidden = j.value("hidden", a.hidden);
  a.layers = j.value("layers", a.layers);
  a.heads = j.value("heads", a.heads);
  a.ff_ratio = j.value("ff_ratio", a.ff_ratio);
  a.pool_dim = j.value("pool_dim", a.pool_dim);
  a.projector = j.value("projector", a.projector);
  a.identity_projector = j.value("identity_projector", a.identity_projector);
  a.positional_encoding = j.value("positional_encoding", a.positional_encoding);
  a.num_classes = j.value("num_classes", a.num_classes);
  return a;
}

struct Checkpoint {
  AggregatorParams<float> params;
  int epoch = 0;
  std::string config_hash;
};

inline std::vector<char> encode_checkpoint(const Checkpoint& ck) {
  auto& params = const_cast<AggregatorParams<float>&>(ck.params);
  auto refs = param_refs(params);
  const auto bufs = buffer_refs(params);
  refs.insert(refs.end(), bufs.begin(), bufs.end());

  nlohmann::json header;
  header["arch"] = to_json(ck.params.arch);
  header["epoch"] = ck.epoch;
  header["config_hash"] = ck.config_hash;
  auto tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& r : refs) {
    tensors.push_back({{"name", r.name}, {"shape", {r.rows, r.cols}}, {"offset", offset}});
    offset += 4 * static_cast<std::size_t>(r.size());
  }
  header["tensors"] = std::move(tensors);
  const std::string text = header.dump();

  std::vector<char> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& r : refs)
    for (Eigen::Index i = 0; i < r.size(); ++i) detail::put_f32(out, r.data[i]);
  return out;
}

/// Decodes a checkpoint. When `expected` is given, the stored architecture
/// and every tensor shape must match it.
inline Checkpoint decode_checkpoint(std::span<const char> bytes, const ArchConfig* expected = nullptr) {
  if (bytes.size() < 12) throw FormatError("truncated checkpoint header");
  if (!std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin()))
    throw FormatError("bad magic: expected PMCK");
  if (detail::get_u32(bytes.data() + 4) != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
  const std::size_t hlen = detail::get_u32(bytes.data() + 8);
  if (bytes.size() < 12 + hlen) throw FormatError("truncated checkpoint header");
  const auto header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<long>(hlen));
  const ArchConfig arch = arch_from_json(header.at("arch"));
  if (expected && !(arch == *expected)) throw FormatError("checkpoint architecture does not match configuration");

  Checkpoint ck{allocate_params<float>(arch), header.at("epoch").get<int>(),
                header.at("config_hash").get<std::string>()};
  auto refs = param_refs(ck.params);
  const auto bufs = buffer_refs(ck.params);
  refs.insert(refs.end(), bufs.begin(), bufs.end());
  const auto& tensors = header.at("tensors");
  if (tensors.size() != refs.size()) throw FormatError("checkpoint tensor count does not match architecture");
  const char* blob = bytes.data() + 12 + hlen;
  const std::size_t blob_size = bytes.size() - 12 - hlen;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& t = tensors[i];
    const auto shape = t.at("shape").get<std::vector<Eigen::Index>>();
    if (t.at("name").get<std::string>() != refs[i].name || shape.size() != 2 || shape[0] != refs[i].rows ||
        shape[1] != refs[i].cols)
      throw FormatError("checkpoint tensor '" + t.at("name").get<std::string>() + "' has an unexpected shape");
    const std::size_t off = t.at("offset").get<std::size_t>();
    if (off + 4 * static_cast<std::size_t>(refs[i].size()) > blob_size) throw FormatError("truncated checkpoint blob");
    for (Eigen::Index k = 0; k < refs[i].size(); ++k) refs[i].data[k] = detail::get_f32(blob + off + 4 * k);
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  detail::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, const ArchConfig* expected = nullptr) {
  return decode_checkpoint(detail::read_file(path), expected);
}

}  // namespace bagmix
