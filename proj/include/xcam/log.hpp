#pragma once

#include <string_view>

#include <spdlog/spdlog.h>

namespace xcam {

/// Maps "quiet", "info" or "debug" to a spdlog level; throws InvalidArgument
/// on anything else.
spdlog::level::level_enum log_level_from_string(std::string_view name);

/// Sets the default logger to stderr at the level named by XCAM_LOG
/// (default "info").
void init_logging();

}  // namespace xcam
