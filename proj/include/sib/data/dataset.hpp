#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sib/autodiff/tensor.hpp"

namespace sib::data {

struct LabeledSample {
  std::string id;
  ad::Tensor image;    // 1 x h x w, values in [0, 1]
  std::size_t label = 0;
  ad::Tensor gt_mask;  // h x w, values in {0, 1}, at least one foreground pixel
};

struct Dataset {
  std::vector<LabeledSample> samples;
  std::size_t classes = 0;
  std::string split;                          // "train" / "test"
  std::map<std::string, std::string> recipe;  // generation parameters, empty for ingested folders

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

// Shape families in class order.
const std::vector<std::string>& shape_families();

struct SyntheticRecipe {
  std::size_t classes = 3;
  std::size_t side = 32;
  std::size_t n_train = 2000;
  std::size_t n_test = 500;
  double spurious = 0.0;  // probability that a train background band encodes the class
  std::uint64_t seed = 0;
};

void validate(const SyntheticRecipe& r);
std::map<std::string, std::string> to_map(const SyntheticRecipe& r);

struct SplitDatasets {
  Dataset train;
  Dataset test;
};

SplitDatasets generate_synthetic(const SyntheticRecipe& recipe);

// Background band index of a generated sample, recoverable from its recipe and index.
std::size_t background_band(const SyntheticRecipe& recipe, bool train, std::size_t index);

// 8-bit binary PGM (P5). Values are byte / 255.
std::vector<std::uint8_t> encode_pgm(const ad::Tensor& image);  // h x w or 1 x h x w, clamped to [0, 1]
ad::Tensor decode_pgm(std::span<const std::uint8_t> bytes);     // h x w
ad::Tensor read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const ad::Tensor& image);

// Layout: <dir>/class_<k>/<id>.pgm with sibling <id>.mask.pgm, plus recipe.txt.
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
// Samples ordered by id, then by class.
Dataset load_folder(const std::filesystem::path& dir);

struct Batch {
  ad::Tensor x;                     // N x 1 x h x w
  std::vector<std::size_t> labels;
  ad::Tensor masks;                 // N x h x w
  std::vector<std::size_t> indices; // into the dataset
};

Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices);

// Deterministic shuffle per (seed, epoch); a trailing batch of fewer than 2 samples is dropped.
std::vector<Batch> batches(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch);

// splitmix64 finalizer over a combined key; used to derive per-sample streams.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace sib::data
