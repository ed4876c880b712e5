#include "anapred/common.hpp"

#include <cstdio>

namespace anapred {

void log_info(const std::string& msg) {
  if (log_level() >= 1) std::fprintf(stderr, "[info] %s\n", msg.c_str());
}

void log_debug(const std::string& msg) {
  if (log_level() >= 2) std::fprintf(stderr, "[debug] %s\n", msg.c_str());
}

}  // namespace anapred
