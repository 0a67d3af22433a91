#include "debias/log.hpp"

#include <mutex>

#include <spdlog/sinks/stdout_sinks.h>

namespace debias {
namespace {

std::mutex g_mutex;
std::shared_ptr<spdlog::logger> g_logger;

}  // namespace

std::shared_ptr<spdlog::logger> logger() {
  std::lock_guard lock(g_mutex);
  if (!g_logger) {
    g_logger = std::make_shared<spdlog::logger>(
        "debias", std::make_shared<spdlog::sinks::stderr_sink_mt>());
    g_logger->set_pattern("[%l] %v");
    g_logger->set_level(spdlog::level::warn);
  }
  return g_logger;
}

void set_logger(std::shared_ptr<spdlog::logger> l) {
  std::lock_guard lock(g_mutex);
  g_logger = std::move(l);
}

}  // namespace debias
