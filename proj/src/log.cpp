#include "distillkit/log.hpp"

#include <spdlog/spdlog.h>

namespace distillkit::log {

void info(const std::string& msg) { spdlog::info(msg); }
void warn(const std::string& msg) { spdlog::warn(msg); }
void error(const std::string& msg) { spdlog::error(msg); }

void set_level(const std::string& level) { spdlog::set_level(spdlog::level::from_str(level)); }

}  // namespace distillkit::log
