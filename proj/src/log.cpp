#include "xcam/log.hpp"

#include <cstdlib>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>

#include "xcam/error.hpp"

namespace xcam {

spdlog::level::level_enum log_level_from_string(std::string_view name) {
  if (name == "quiet") return spdlog::level::off;
  if (name == "info") return spdlog::level::info;
  if (name == "debug") return spdlog::level::debug;
  throw InvalidArgument("XCAM_LOG must be quiet, info or debug, got '" + std::string(name) + "'");
}

void init_logging() {
  const char* env = std::getenv("XCAM_LOG");
  auto logger = spdlog::stderr_color_mt("xcam");
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(log_level_from_string(env && *env ? env : "info"));
}

}  // namespace xcam
