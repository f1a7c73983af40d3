#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "poisonguard/io/binary.hpp"
#include "poisonguard/tensor/tensor.hpp"

namespace poisonguard {

/// Images in [0, 1] with integer labels and a per-sample poison flag.
struct LabeledDataset {
  Tensor<float> images;  // [N, C, H, W]
  std::vector<int> labels;
  std::vector<bool> poisoned;
  std::size_t num_classes = 10;
  std::string name;

  std::size_t size() const { return labels.size(); }
  Shape image_shape() const { return Shape(images.shape.begin() + 1, images.shape.end()); }
  std::size_t image_numel() const { return images.numel() / std::max<std::size_t>(1, size()); }

  std::span<const float> image(std::size_t i) const {
    return {images.data.data() + i * image_numel(), image_numel()};
  }
  std::span<float> image(std::size_t i) {
    return {images.data.data() + i * image_numel(), image_numel()};
  }

  void validate() const {
    if (images.rank() != 4) throw ShapeError("dataset images must be [N,C,H,W]");
    if (images.dim(0) != labels.size() || labels.size() != poisoned.size()) {
      throw ShapeError("dataset " + name + ": images/labels/flags disagree on N");
    }
    for (float v : images.data) {
      if (!(v >= 0.0f && v <= 1.0f)) throw std::domain_error("dataset " + name + ": pixel outside [0,1]");
    }
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
        throw std::domain_error("dataset " + name + ": label " + std::to_string(y) + " outside range");
      }
    }
  }
};

/// Images [begin, end) converted to the network scalar type.
template <typename T>
Tensor<T> image_batch(const LabeledDataset& ds, std::size_t begin, std::size_t end) {
  if (begin >= end || end > ds.size()) throw std::out_of_range("image_batch: bad sample range");
  Shape shape = ds.images.shape;
  shape[0] = end - begin;
  const std::size_t stride = ds.image_numel();
  auto first = ds.images.data.begin() + begin * stride;
  return Tensor<T>(shape, Buffer<T>(first, first + (end - begin) * stride));
}

/// Copies the listed samples, in order, into a new dataset.
inline LabeledDataset subset(const LabeledDataset& ds, std::span<const std::size_t> indices,
                             std::string name = {}) {
  if (indices.empty()) throw std::invalid_argument("subset: empty index list");
  Shape shape = ds.images.shape;
  shape[0] = indices.size();
  LabeledDataset out{Tensor<float>(shape), {}, {}, ds.num_classes, name.empty() ? ds.name : name};
  out.labels.reserve(indices.size());
  out.poisoned.reserve(indices.size());
  const std::size_t stride = ds.image_numel();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    if (i >= ds.size()) throw std::out_of_range("subset: index out of range");
    std::copy_n(ds.images.data.begin() + i * stride, stride, out.images.data.begin() + k * stride);
    out.labels.push_back(ds.labels[i]);
    out.poisoned.push_back(ds.poisoned[i]);
  }
  return out;
}

inline LabeledDataset concatenate(const LabeledDataset& a, const LabeledDataset& b, std::string name) {
  if (a.image_shape() != b.image_shape()) throw ShapeError("concatenate: image shapes differ");
  Shape shape = a.images.shape;
  shape[0] = a.size() + b.size();
  LabeledDataset out{Tensor<float>(shape), a.labels, a.poisoned, a.num_classes, std::move(name)};
  std::copy(a.images.data.begin(), a.images.data.end(), out.images.data.begin());
  std::copy(b.images.data.begin(), b.images.data.end(), out.images.data.begin() + a.images.numel());
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.poisoned.insert(out.poisoned.end(), b.poisoned.begin(), b.poisoned.end());
  return out;
}

// ---------------------------------------------------------------------------
// IDX (MNIST) format: big-endian header, magic 2051 (images) / 2049 (labels).

inline constexpr std::uint32_t kIdxImageMagic = 2051;
inline constexpr std::uint32_t kIdxLabelMagic = 2049;

struct IdxImages {
  std::uint32_t count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;
};

inline IdxImages parse_idx_images(const std::vector<std::uint8_t>& bytes, const std::string& what) {
  io::Reader r(bytes, what, std::endian::big);
  const auto magic = r.get<std::uint32_t>();
  if (magic != kIdxImageMagic) {
    throw FormatError(what + ": bad magic " + std::to_string(magic) + " (expected 2051)");
  }
  IdxImages img;
  img.count = r.get<std::uint32_t>();
  img.rows = r.get<std::uint32_t>();
  img.cols = r.get<std::uint32_t>();
  if (img.count == 0 || img.rows == 0 || img.cols == 0) throw FormatError(what + ": empty image set");
  const std::size_t n = static_cast<std::size_t>(img.count) * img.rows * img.cols;
  r.need(n);
  img.pixels.resize(n);
  r.get_bytes(img.pixels.data(), n);
  return img;
}

inline std::vector<int> parse_idx_labels(const std::vector<std::uint8_t>& bytes,
                                         const std::string& what, std::size_t num_classes) {
  io::Reader r(bytes, what, std::endian::big);
  const auto magic = r.get<std::uint32_t>();
  if (magic != kIdxLabelMagic) {
    throw FormatError(what + ": bad magic " + std::to_string(magic) + " (expected 2049)");
  }
  const auto count = r.get<std::uint32_t>();
  r.need(count);
  std::vector<int> labels(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto y = r.get<std::uint8_t>();
    if (y >= num_classes) {
      throw FormatError(what + ": label " + std::to_string(y) + " at index " + std::to_string(i) +
                        " outside [0," + std::to_string(num_classes) + ")");
    }
    labels[i] = y;
  }
  return labels;
}

inline LabeledDataset load_idx_pair(const std::filesystem::path& images_path,
                                    const std::filesystem::path& labels_path, std::string name) {
  auto img = parse_idx_images(io::read_file(images_path), images_path.string());
  auto labels = parse_idx_labels(io::read_file(labels_path), labels_path.string(), 10);
  if (labels.size() != img.count) {
    throw FormatError(name + ": " + std::to_string(img.count) + " images but " +
                      std::to_string(labels.size()) + " labels");
  }
  LabeledDataset ds{Tensor<float>({img.count, 1, img.rows, img.cols}), std::move(labels),
                    std::vector<bool>(img.count, false), 10, std::move(name)};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) ds.images.data[i] = img.pixels[i] / 255.0f;
  return ds;
}

struct TrainTestPair {
  LabeledDataset train;
  LabeledDataset test;
};

/// Reads train-images-idx3-ubyte, train-labels-idx1-ubyte,
/// t10k-images-idx3-ubyte and t10k-labels-idx1-ubyte from `dir`.
inline TrainTestPair load_mnist(const std::filesystem::path& dir) {
  return {load_idx_pair(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", "mnist-train"),
          load_idx_pair(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte", "mnist-test")};
}

inline std::vector<std::uint8_t> encode_idx_images(const LabeledDataset& ds) {
  if (ds.images.dim(1) != 1) throw ShapeError("IDX images must be single-channel");
  io::Writer w(std::endian::big);
  w.put<std::uint32_t>(kIdxImageMagic);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.size()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.images.dim(2)));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.images.dim(3)));
  for (float v : ds.images.data) w.put<std::uint8_t>(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
  return w.bytes();
}

inline std::vector<std::uint8_t> encode_idx_labels(std::span<const int> labels) {
  io::Writer w(std::endian::big);
  w.put<std::uint32_t>(kIdxLabelMagic);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(labels.size()));
  for (int y : labels) w.put<std::uint8_t>(static_cast<std::uint8_t>(y));
  return w.bytes();
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches: 3073-byte records (label + 3x32x32 channel-major).

inline constexpr std::size_t kCifarRecordBytes = 3073;

inline LabeledDataset parse_cifar_batch(const std::vector<std::uint8_t>& bytes, std::string name) {
  if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0) {
    throw FormatError(name + ": length " + std::to_string(bytes.size()) +
                      " is not a positive multiple of 3073");
  }
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  LabeledDataset ds{Tensor<float>({n, 3, 32, 32}), std::vector<int>(n), std::vector<bool>(n, false),
                    10, std::move(name)};
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kCifarRecordBytes;
    if (rec[0] >= 10) {
      throw FormatError(ds.name + ": label " + std::to_string(rec[0]) + " in record " + std::to_string(i));
    }
    ds.labels[i] = rec[0];
    for (std::size_t k = 0; k < 3072; ++k) ds.images.data[i * 3072 + k] = rec[1 + k] / 255.0f;
  }
  return ds;
}

inline std::vector<std::uint8_t> encode_cifar_batch(const LabeledDataset& ds) {
  if (ds.image_shape() != Shape{3, 32, 32}) throw ShapeError("CIFAR records must be 3x32x32");
  std::vector<std::uint8_t> out;
  out.reserve(ds.size() * kCifarRecordBytes);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out.push_back(static_cast<std::uint8_t>(ds.labels[i]));
    for (float v : ds.image(i)) out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
  }
  return out;
}

/// Reads data_batch_1..5.bin and test_batch.bin from `dir`.
inline TrainTestPair load_cifar10(const std::filesystem::path& dir) {
  LabeledDataset train;
  for (int b = 1; b <= 5; ++b) {
    const auto path = dir / ("data_batch_" + std::to_string(b) + ".bin");
    auto batch = parse_cifar_batch(io::read_file(path), path.string());
    train = b == 1 ? std::move(batch) : concatenate(train, batch, "cifar10-train");
  }
  train.name = "cifar10-train";
  const auto test_path = dir / "test_batch.bin";
  auto test = parse_cifar_batch(io::read_file(test_path), "cifar10-test");
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------

struct SplitPair {
  LabeledDataset fit_half;
  LabeledDataset eval_half;
  std::vector<std::size_t> fit_indices;
  std::vector<std::size_t> eval_indices;
};

/// Class-stratified, seeded half split. Per-class shuffles decide membership;
/// odd class counts alternate which half receives the extra sample so the
/// halves differ in size by at most one. Each half keeps source order.
inline SplitPair split_half(const LabeledDataset& ds, std::uint64_t seed) {
  if (ds.size() < 2) throw std::invalid_argument("split_half: need at least 2 samples");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> fit, eval;
  bool extra_to_fit = true;
  for (auto& [label, idx] : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t take = idx.size() / 2;
    if (idx.size() % 2 == 1) {
      if (extra_to_fit) ++take;
      extra_to_fit = !extra_to_fit;
    }
    fit.insert(fit.end(), idx.begin(), idx.begin() + take);
    eval.insert(eval.end(), idx.begin() + take, idx.end());
  }
  std::sort(fit.begin(), fit.end());
  std::sort(eval.begin(), eval.end());
  SplitPair sp{subset(ds, fit, ds.name + "-fit"), subset(ds, eval, ds.name + "-eval"), fit, eval};
  return sp;
}

}  // namespace poisonguard
