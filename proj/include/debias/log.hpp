#pragma once

#include <memory>

#include <spdlog/spdlog.h>

namespace debias {

// Library-wide logger. Writes to stderr unless a caller installs its own.
std::shared_ptr<spdlog::logger> logger();
void set_logger(std::shared_ptr<spdlog::logger> l);

}  // namespace debias
