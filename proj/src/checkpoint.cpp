#include "xcam/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "xcam/error.hpp"

namespace xcam {

namespace {

using nlohmann::json;

void put_f64(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

double get_f64(const std::string& in, std::size_t& pos) {
  if (pos + 8 > in.size()) throw FormatError("checkpoint truncated inside parameter block");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= std::uint64_t{static_cast<unsigned char>(in[pos + i])} << (8 * i);
  pos += 8;
  return std::bit_cast<double>(bits);
}

Shape shape_from(const json& j, const char* what) {
  if (!j.is_array()) throw FormatError(std::string("checkpoint field '") + what + "' must be an array");
  Shape s;
  for (const auto& d : j) s.push_back(d.get<std::size_t>());
  return s;
}

}  // namespace

std::string serialize_checkpoint(const ModelGraph& graph) {
  graph.validate();
  json header;
  header["name"] = graph.name;
  header["input_shape"] = graph.input_shape;
  header["num_classes"] = graph.num_classes;
  header["designated_layer"] = graph.designated_layer;
  header["input_offset"] = graph.input_offset;
  header["input_scale"] = graph.input_scale;
  json layers = json::array();
  for (const auto& l : graph.layers) {
    json jl;
    jl["kind"] = std::string(to_string(l.kind));
    jl["in_channels"] = l.in_channels;
    jl["out_channels"] = l.out_channels;
    jl["kernel"] = l.kernel;
    jl["stride"] = l.stride;
    jl["pad"] = l.pad;
    if (l.has_params()) {
      jl["weight_shape"] = l.weight.shape();
      jl["bias_shape"] = l.bias.shape();
    }
    layers.push_back(std::move(jl));
  }
  header["layers"] = std::move(layers);

  std::string out(kCheckpointMagic);
  out += '\n';
  out += header.dump();
  out += '\n';
  for (const auto& l : graph.layers) {
    if (!l.has_params()) continue;
    for (double v : l.weight.data()) put_f64(out, v);
    for (double v : l.bias.data()) put_f64(out, v);
  }
  return out;
}

ModelGraph deserialize_checkpoint(const std::string& bytes) {
  const std::string magic_line = std::string(kCheckpointMagic) + '\n';
  if (bytes.compare(0, magic_line.size(), magic_line) != 0) throw FormatError("not a checkpoint: bad magic");
  const std::size_t header_end = bytes.find('\n', magic_line.size());
  if (header_end == std::string::npos) throw FormatError("checkpoint header not terminated");

  json header;
  try {
    header = json::parse(bytes.substr(magic_line.size(), header_end - magic_line.size()));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  ModelGraph graph;
  std::size_t pos = header_end + 1;
  try {
    graph.name = header.at("name").get<std::string>();
    graph.input_shape = shape_from(header.at("input_shape"), "input_shape");
    graph.num_classes = header.at("num_classes").get<std::size_t>();
    graph.designated_layer = header.at("designated_layer").get<std::size_t>();
    graph.input_offset = header.at("input_offset").get<double>();
    graph.input_scale = header.at("input_scale").get<double>();
    for (const auto& jl : header.at("layers")) {
      LayerSpec l;
      l.kind = layer_kind_from_string(jl.at("kind").get<std::string>());
      l.in_channels = jl.at("in_channels").get<std::size_t>();
      l.out_channels = jl.at("out_channels").get<std::size_t>();
      l.kernel = jl.at("kernel").get<std::size_t>();
      l.stride = jl.at("stride").get<std::size_t>();
      l.pad = jl.at("pad").get<std::size_t>();
      if (l.has_params()) {
        l.weight = Tensor(shape_from(jl.at("weight_shape"), "weight_shape"));
        l.bias = Tensor(shape_from(jl.at("bias_shape"), "bias_shape"));
        for (auto& v : l.weight.data()) v = get_f64(bytes, pos);
        for (auto& v : l.bias.data()) v = get_f64(bytes, pos);
      }
      graph.layers.push_back(std::move(l));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  if (pos != bytes.size()) throw FormatError("checkpoint has trailing bytes after parameter blocks");
  graph.validate();
  return graph;
}

void save_checkpoint(const ModelGraph& graph, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(graph);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

ModelGraph load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace xcam
