#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mpbm/rng.hpp"
#include "mpbm/tensor.hpp"

namespace mpbm {

// Paired inputs and one-hot labels drawn from a dataset.
struct LabeledBatch {
  Tensor inputs;  // N x (input shape)
  Tensor labels;  // N x K one-hot (or soft) rows
};

struct Dataset {
  std::string name;
  std::string domain;
  Tensor inputs;            // N x (input shape), values in [0,1]
  Tensor labels;            // N x K one-hot
  std::vector<int> classes; // per-row class index

  size_t size() const { return inputs.extent(0); }
  size_t num_classes() const { return labels.cols(); }
  LabeledBatch gather(const std::vector<size_t>& rows) const;
};

// Raw IDX payload; kept byte-exact for round-trip writing.
struct IdxFile {
  uint32_t magic = 0;
  std::vector<uint32_t> dims;
  std::vector<uint8_t> payload;
};

IdxFile read_idx(const std::string& path);
void write_idx(const std::string& path, const IdxFile& file);

// IDX image+label pair -> Dataset: pixels scaled to [0,1], bilinearly resized
// to {channels, height, width}, single-channel sources replicated across RGB.
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const std::vector<size_t>& input_shape, size_t num_classes,
                 const std::string& name, const std::string& domain);

// Gaussian class clusters inside the unit square.
Dataset synth_blobs(size_t num_classes, size_t per_class, double separation, double sigma,
                    uint64_t seed, const std::string& name, const std::string& domain);

struct ShiftSpec {
  std::string kind;  // rotate | intensity-invert | gaussian-noise | affine-warp | channel-drop
  double magnitude = 0.0;
  uint64_t seed = 0;
};

// Transformed copy: labels untouched, inputs shifted and re-clamped to [0,1].
Dataset apply_shift(const Dataset& d, const ShiftSpec& s, const std::string& name);

// Source domain plus evaluation targets, as described by a JSON manifest.
struct DomainSet {
  std::string name;
  std::vector<size_t> input_shape;
  size_t num_classes = 0;
  Dataset source;
  std::vector<Dataset> targets;
};

DomainSet load_manifest(const std::string& path);

std::string sha256_file(const std::string& path);
std::string sha256_bytes(const void* data, size_t len);

}  // namespace mpbm
