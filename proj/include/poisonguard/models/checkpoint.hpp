#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "poisonguard/io/binary.hpp"
#include "poisonguard/models/network.hpp"

namespace poisonguard {

/// Serializable snapshot of every named tensor of a network (parameters and
/// buffers). Values are held in double so float and double networks both
/// round-trip exactly.
struct Checkpoint {
  Architecture arch = Architecture::scnn;
  bool variational = false;
  std::uint32_t num_classes = 0;
  std::uint8_t scalar_bytes = 4;
  std::vector<std::pair<std::string, Tensor<double>>> tensors;

  const Tensor<double>& at(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return t;
    }
    throw std::out_of_range("checkpoint has no tensor '" + name + "'");
  }

  bool operator==(const Checkpoint& o) const {
    if (arch != o.arch || variational != o.variational || num_classes != o.num_classes ||
        scalar_bytes != o.scalar_bytes || tensors.size() != o.tensors.size()) {
      return false;
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      if (tensors[i].first != o.tensors[i].first ||
          tensors[i].second.shape != o.tensors[i].second.shape ||
          tensors[i].second.data != o.tensors[i].second.data) {
        return false;
      }
    }
    return true;
  }
};

inline constexpr char kCheckpointMagic[4] = {'P', 'S', 'N', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
Checkpoint make_checkpoint(const Network<T>& net) {
  Checkpoint ck;
  ck.arch = net.architecture();
  ck.variational = net.variational();
  ck.num_classes = static_cast<std::uint32_t>(net.num_classes());
  ck.scalar_bytes = sizeof(T);
  for (const auto& nt : net.tensors()) ck.tensors.emplace_back(nt.name, nt.value->template cast<double>());
  return ck;
}

/// Copies checkpoint values into `net`; names, shapes and the architecture
/// header must match exactly.
template <typename T>
void load_checkpoint(Network<T>& net, const Checkpoint& ck) {
  if (ck.arch != net.architecture() || ck.variational != net.variational() ||
      ck.num_classes != net.num_classes()) {
    throw FormatError(std::string("checkpoint header (") + to_string(ck.arch) +
                      (ck.variational ? ", variational" : "") + ", " +
                      std::to_string(ck.num_classes) + " classes) does not match network");
  }
  auto named = net.tensors();
  if (named.size() != ck.tensors.size()) {
    throw FormatError("checkpoint has " + std::to_string(ck.tensors.size()) +
                      " tensors, network has " + std::to_string(named.size()));
  }
  for (auto& nt : named) {
    const auto& src = ck.at(nt.name);
    if (src.shape != nt.value->shape) {
      throw FormatError("checkpoint tensor '" + nt.name + "' has shape " + shape_str(src.shape) +
                        ", network expects " + shape_str(nt.value->shape));
    }
    for (std::size_t i = 0; i < src.numel(); ++i) nt.value->data[i] = static_cast<T>(src.data[i]);
  }
}

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  if (ck.scalar_bytes != 4 && ck.scalar_bytes != 8) throw FormatError("checkpoint: scalar width must be 4 or 8");
  io::Writer w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.arch));
  w.put<std::uint8_t>(ck.variational ? 1 : 0);
  w.put<std::uint8_t>(ck.scalar_bytes);
  w.put<std::uint32_t>(ck.num_classes);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    w.put_string(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape) w.put<std::uint64_t>(d);
    for (double v : t.data) {
      if (ck.scalar_bytes == 4) {
        w.put<float>(static_cast<float>(v));
      } else {
        w.put<double>(v);
      }
    }
  }
  return w.bytes();
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  io::Reader r(bytes, "checkpoint");
  char magic[4];
  r.get_bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError("checkpoint: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  const auto arch = r.get<std::uint32_t>();
  if (arch != 1 && arch != 2) throw FormatError("checkpoint: unknown architecture id " + std::to_string(arch));
  ck.arch = static_cast<Architecture>(arch);
  ck.variational = r.get<std::uint8_t>() != 0;
  ck.scalar_bytes = r.get<std::uint8_t>();
  if (ck.scalar_bytes != 4 && ck.scalar_bytes != 8) throw FormatError("checkpoint: bad scalar width");
  ck.num_classes = r.get<std::uint32_t>();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.get_string();
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw FormatError("checkpoint: tensor '" + name + "' has rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    const std::size_t n = shape_numel(shape);
    r.need(n * ck.scalar_bytes);
    std::vector<double> data(n);
    for (auto& v : data) v = ck.scalar_bytes == 4 ? static_cast<double>(r.get<float>()) : r.get<double>();
    ck.tensors.emplace_back(std::move(name), Tensor<double>(std::move(shape), std::move(data)));
  }
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

}  // namespace poisonguard
