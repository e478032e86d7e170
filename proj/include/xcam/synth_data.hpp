#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "xcam/sample.hpp"

namespace xcam {

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::size_t num_samples = 0;
  std::vector<std::string> class_names{"circle", "triangle", "square"};
  std::size_t image_size = 32;
  double multi_instance_prob = 0.0;
  std::string split = "train";  // "train" or "val"

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Sample> samples;
};

/// Colored circles, triangles and squares on a textured background. Each
/// image holds 1-3 non-overlapping instances of a single class; with
/// probability `multi_instance_prob` it holds more than one. Boxes are tight
/// to the rasterized shape. Same arguments give bit-identical output.
Dataset generate(std::uint64_t seed, std::size_t num_samples, std::size_t size, double multi_instance_prob,
                 const std::string& split = "train");

/// Regenerates the dataset a manifest describes. Throws InvalidArgument if
/// `seed` differs from the manifest's.
Dataset regenerate(const DatasetManifest& manifest, std::uint64_t seed);

std::string manifest_to_json(const DatasetManifest& manifest);
/// Strict parse: unknown or missing fields raise FormatError naming them.
DatasetManifest manifest_from_json(const std::string& text);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& path);

/// Directory layout: manifest.json, labels.json and images/NNNNN.ppm.
void save_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& dir);

// Binary portable any-map, maxval 255. [3,H,W] maps to P6; [1,H,W] or
// [H,W] to P5. Values are clamped to [0,1] and rounded to 8 bits.
std::string encode_pnm(const Tensor& image);
/// Returns [3,H,W] for P6 and [1,H,W] for P5.
Tensor decode_pnm(const std::string& bytes);
void write_image(const std::filesystem::path& path, const Tensor& image);
Tensor read_image(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace xcam
