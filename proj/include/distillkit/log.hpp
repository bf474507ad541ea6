#pragma once

#include <string>

// spdlog is compiled in its own translation unit: libtorch bundles a newer
// fmt than the one spdlog was built against, so the two headers cannot meet.
namespace distillkit::log {

void info(const std::string& msg);
void warn(const std::string& msg);
void error(const std::string& msg);
// "debug", "info", "warn", "error" or "off".
void set_level(const std::string& level);

}  // namespace distillkit::log
