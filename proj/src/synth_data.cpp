#include "xcam/synth_data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

#include "xcam/error.hpp"
#include "xcam/rng.hpp"

namespace xcam {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

enum class ShapeKind { circle = 0, triangle = 1, square = 2 };

struct Rgb {
  double r, g, b;
};

bool inside_shape(ShapeKind kind, double px, double py, double x0, double y0, double extent) {
  switch (kind) {
    case ShapeKind::circle: {
      const double r = extent / 2.0;
      const double dx = px - (x0 + r), dy = py - (y0 + r);
      return dx * dx + dy * dy <= r * r;
    }
    case ShapeKind::square:
      return px >= x0 && px <= x0 + extent && py >= y0 && py <= y0 + extent;
    case ShapeKind::triangle: {
      // Apex at top centre, base along the bottom edge.
      if (py < y0 || py > y0 + extent) return false;
      const double half = (py - y0) / 2.0;
      const double cx = x0 + extent / 2.0;
      return px >= cx - half && px <= cx + half;
    }
  }
  return false;
}

Rgb pick_shape_color(Rng& rng, const Rgb& background) {
  for (;;) {
    Rgb c{rng.uniform(), rng.uniform(), rng.uniform()};
    const double dist = std::abs(c.r - background.r) + std::abs(c.g - background.g) + std::abs(c.b - background.b);
    if (dist >= 0.7) return c;
  }
}

void paint_background(Rng& rng, Tensor& img, const Rgb& base) {
  const std::size_t size = img.dim(1);
  const double theta = rng.uniform(0.0, std::numbers::pi);
  const double freq = rng.uniform(2.0, 6.0);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double amplitude = rng.uniform(0.02, 0.08);
  const double fx = std::cos(theta) * freq / static_cast<double>(size);
  const double fy = std::sin(theta) * freq / static_cast<double>(size);
  const double channel_base[3] = {base.r, base.g, base.b};
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double stripe =
          amplitude * std::sin(2.0 * std::numbers::pi * (fx * static_cast<double>(x) + fy * static_cast<double>(y)) +
                               phase);
      for (std::size_t c = 0; c < 3; ++c) {
        const double noise = rng.uniform(-0.02, 0.02);
        img.at(c, y, x) = std::clamp(channel_base[c] + stripe + noise, 0.0, 1.0);
      }
    }
}

struct Region {
  int x0, y0, extent;
  bool separated_from(const Region& o) const {
    // One clear pixel between regions.
    return x0 + extent + 1 <= o.x0 || o.x0 + o.extent + 1 <= x0 || y0 + extent + 1 <= o.y0 ||
           o.y0 + o.extent + 1 <= y0;
  }
};

BoundingBox paint_shape(Rng& rng, Tensor& img, ShapeKind kind, const Region& region, const Rgb& color,
                        std::size_t label) {
  const int size = static_cast<int>(img.dim(1));
  int min_x = size, min_y = size, max_x = -1, max_y = -1;
  const double col[3] = {color.r, color.g, color.b};
  for (int y = region.y0; y < region.y0 + region.extent; ++y)
    for (int x = region.x0; x < region.x0 + region.extent; ++x) {
      if (!inside_shape(kind, x + 0.5, y + 0.5, region.x0, region.y0, region.extent)) continue;
      for (std::size_t c = 0; c < 3; ++c)
        img.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
            std::clamp(col[c] + rng.uniform(-0.03, 0.03), 0.0, 1.0);
      min_x = std::min(min_x, x);
      min_y = std::min(min_y, y);
      max_x = std::max(max_x, x);
      max_y = std::max(max_y, y);
    }
  return {min_x, min_y, max_x + 1, max_y + 1, label};
}

Sample make_sample(Rng& rng, std::size_t label, std::size_t size, double multi_instance_prob) {
  Sample s;
  s.label = label;
  s.image = Tensor({3, size, size});
  std::size_t wanted = 1;
  if (rng.uniform() < multi_instance_prob) wanted = 2 + rng.below(2);

  const Rgb base{rng.uniform(0.2, 0.7), rng.uniform(0.2, 0.7), rng.uniform(0.2, 0.7)};
  paint_background(rng, s.image, base);

  const int isize = static_cast<int>(size);
  const int min_extent = std::max(8, static_cast<int>(std::lround(0.28 * isize)));
  const int max_extent = static_cast<int>(std::lround(0.44 * isize));
  std::vector<Region> placed;
  for (int attempt = 0; attempt < 400 && placed.size() < wanted; ++attempt) {
    const int extent = min_extent + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_extent - min_extent + 1)));
    const int span = isize - 2 - extent;  // keep a one pixel margin to the border
    const Region r{1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(span + 1))),
                   1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(span + 1))), extent};
    if (std::all_of(placed.begin(), placed.end(), [&](const Region& o) { return r.separated_from(o); }))
      placed.push_back(r);
  }
  for (const auto& r : placed) {
    const Rgb color = pick_shape_color(rng, base);
    s.boxes.push_back(paint_shape(rng, s.image, static_cast<ShapeKind>(label), r, color, label));
  }
  s.instance_count = s.boxes.size();
  return s;
}

const std::set<std::string> kManifestFields{"seed",       "num_samples",         "class_names",
                                            "image_size", "multi_instance_prob", "split"};

void expect_whitespace_token(const std::string& bytes, std::size_t& pos) {
  // Skip whitespace and '#' comments between header tokens.
  for (;;) {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (pos < bytes.size() && bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      continue;
    }
    return;
  }
}

std::size_t read_header_int(const std::string& bytes, std::size_t& pos) {
  expect_whitespace_token(bytes, pos);
  if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos])))
    throw FormatError("malformed PNM header");
  std::size_t v = 0;
  while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
    v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
    if (v > (1u << 24)) throw FormatError("PNM header value too large");
    ++pos;
  }
  return v;
}

unsigned char quantize(double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

Dataset generate(std::uint64_t seed, std::size_t num_samples, std::size_t size, double multi_instance_prob,
                 const std::string& split) {
  if (size < 32) throw InvalidArgument("image size " + std::to_string(size) + " is too small to place a shape (min 32)");
  if (!(multi_instance_prob >= 0.0 && multi_instance_prob <= 1.0))
    throw InvalidArgument("multi-instance probability must lie in [0, 1]");
  if (split != "train" && split != "val") throw InvalidArgument("split must be 'train' or 'val'");

  Dataset ds;
  ds.manifest.seed = seed;
  ds.manifest.num_samples = num_samples;
  ds.manifest.image_size = size;
  ds.manifest.multi_instance_prob = multi_instance_prob;
  ds.manifest.split = split;

  Rng rng(seed);
  std::vector<std::size_t> labels(num_samples);
  for (std::size_t i = 0; i < num_samples; ++i) labels[i] = i % 3;
  rng.shuffle(std::span<std::size_t>(labels));
  ds.samples.reserve(num_samples);
  for (std::size_t i = 0; i < num_samples; ++i) ds.samples.push_back(make_sample(rng, labels[i], size, multi_instance_prob));
  return ds;
}

Dataset regenerate(const DatasetManifest& manifest, std::uint64_t seed) {
  if (seed != manifest.seed)
    throw InvalidArgument("seed mismatch: manifest records " + std::to_string(manifest.seed) + ", requested " +
                          std::to_string(seed));
  return generate(manifest.seed, manifest.num_samples, manifest.image_size, manifest.multi_instance_prob,
                  manifest.split);
}

std::string manifest_to_json(const DatasetManifest& m) {
  ordered_json j;
  j["seed"] = m.seed;
  j["num_samples"] = m.num_samples;
  j["class_names"] = m.class_names;
  j["image_size"] = m.image_size;
  j["multi_instance_prob"] = m.multi_instance_prob;
  j["split"] = m.split;
  return j.dump(2) + "\n";
}

DatasetManifest manifest_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw FormatError("manifest must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!kManifestFields.count(key)) throw FormatError("manifest has unknown field '" + key + "'");
  for (const auto& key : kManifestFields)
    if (!j.contains(key)) throw FormatError("manifest is missing field '" + key + "'");
  DatasetManifest m;
  try {
    m.seed = j["seed"].get<std::uint64_t>();
    m.num_samples = j["num_samples"].get<std::size_t>();
    m.class_names = j["class_names"].get<std::vector<std::string>>();
    m.image_size = j["image_size"].get<std::size_t>();
    m.multi_instance_prob = j["multi_instance_prob"].get<double>();
    m.split = j["split"].get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest field has the wrong type: ") + e.what());
  }
  if (m.split != "train" && m.split != "val") throw FormatError("manifest field 'split' must be train or val");
  return m;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  write_file(path, manifest_to_json(manifest));
}

DatasetManifest read_manifest(const std::filesystem::path& path) { return manifest_from_json(read_file(path)); }

void save_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
  std::filesystem::create_directories(dir / "images");
  write_manifest(dir / "manifest.json", dataset.manifest);
  ordered_json labels;
  labels["seed"] = dataset.manifest.seed;
  ordered_json items = ordered_json::array();
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const auto& s = dataset.samples[i];
    char name[32];
    std::snprintf(name, sizeof name, "images/%05zu.ppm", i);
    write_image(dir / name, s.image);
    ordered_json item;
    item["file"] = name;
    item["label"] = s.label;
    item["instance_count"] = s.instance_count;
    ordered_json boxes = ordered_json::array();
    for (const auto& b : s.boxes) boxes.push_back({b.x0, b.y0, b.x1, b.y1, b.class_index});
    item["boxes"] = std::move(boxes);
    items.push_back(std::move(item));
  }
  labels["samples"] = std::move(items);
  write_file(dir / "labels.json", labels.dump(2) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.manifest = read_manifest(dir / "manifest.json");
  json labels;
  try {
    labels = json::parse(read_file(dir / "labels.json"));
    const auto seed = labels.at("seed").get<std::uint64_t>();
    if (seed != ds.manifest.seed)
      throw FormatError("seed mismatch: manifest records " + std::to_string(ds.manifest.seed) + ", labels.json " +
                        std::to_string(seed));
    for (const auto& item : labels.at("samples")) {
      Sample s;
      s.image = read_image(dir / item.at("file").get<std::string>());
      s.label = item.at("label").get<std::size_t>();
      s.instance_count = item.at("instance_count").get<std::size_t>();
      for (const auto& b : item.at("boxes"))
        s.boxes.push_back({b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(), b.at(3).get<int>(),
                           b.at(4).get<std::size_t>()});
      ds.samples.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("labels.json: ") + e.what());
  }
  if (ds.samples.size() != ds.manifest.num_samples)
    throw FormatError("labels.json lists " + std::to_string(ds.samples.size()) + " samples, manifest declares " +
                      std::to_string(ds.manifest.num_samples));
  return ds;
}

std::string encode_pnm(const Tensor& image) {
  std::size_t channels = 0, h = 0, w = 0;
  if (image.rank() == 2) {
    channels = 1;
    h = image.dim(0);
    w = image.dim(1);
  } else if (image.rank() == 3 && (image.dim(0) == 1 || image.dim(0) == 3)) {
    channels = image.dim(0);
    h = image.dim(1);
    w = image.dim(2);
  } else {
    throw ShapeError("PNM images must be [H,W], [1,H,W] or [3,H,W], got " + shape_string(image.shape()));
  }
  std::string out = (channels == 3 ? "P6 " : "P5 ") + std::to_string(w) + " " + std::to_string(h) + " 255\n";
  out.reserve(out.size() + channels * h * w);
  const std::size_t plane = h * w;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < channels; ++c) out.push_back(static_cast<char>(quantize(image[c * plane + p])));
  return out;
}

Tensor decode_pnm(const std::string& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P') throw FormatError("not a PNM file");
  std::size_t channels = 0;
  if (bytes[1] == '6')
    channels = 3;
  else if (bytes[1] == '5')
    channels = 1;
  else
    throw FormatError(std::string("unsupported PNM magic 'P") + bytes[1] + "'");
  std::size_t pos = 2;
  const std::size_t w = read_header_int(bytes, pos);
  const std::size_t h = read_header_int(bytes, pos);
  const std::size_t maxval = read_header_int(bytes, pos);
  if (w == 0 || h == 0) throw FormatError("PNM image has zero size");
  if (maxval != 255) throw FormatError("unsupported PNM maxval " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw FormatError("malformed PNM header");
  ++pos;
  const std::size_t plane = h * w;
  if (bytes.size() - pos != channels * plane) throw FormatError("PNM raster size does not match header");
  Tensor img({channels, h, w});
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < channels; ++c)
      img[c * plane + p] = static_cast<unsigned char>(bytes[pos + p * channels + c]) / 255.0;
  return img;
}

void write_image(const std::filesystem::path& path, const Tensor& image) { write_file(path, encode_pnm(image)); }

Tensor read_image(const std::filesystem::path& path) { return decode_pnm(read_file(path)); }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace xcam
