#pragma once

#include <filesystem>
#include <string>

#include "xcam/graph.hpp"

namespace xcam {

/// Checkpoint layout: the ASCII magic "XCAMCKPT1" and a newline, one line
/// of compact JSON describing the graph (layer specs and parameter shapes),
/// a newline, then every parameter tensor as raw little-endian float64 in
/// layer order, weight before bias.
inline constexpr std::string_view kCheckpointMagic = "XCAMCKPT1";

std::string serialize_checkpoint(const ModelGraph& graph);
ModelGraph deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const ModelGraph& graph, const std::filesystem::path& path);
ModelGraph load_checkpoint(const std::filesystem::path& path);

}  // namespace xcam
