#pragma once

#include <cstdint>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>

namespace msf {

// Error type thrown by every argument/shape check in the library. The CLI
// catches these and turns them into machine-readable stderr output.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {
[[noreturn]] void throw_error(std::string msg);
}

// MSF_CHECK(cond, "conv2d: input channels (" << c << ") != kernel channels")
#define MSF_CHECK(cond, msg)                  \
  do {                                        \
    if (!(cond)) {                            \
      std::ostringstream oss_;                \
      oss_ << msg;                            \
      ::msf::detail::throw_error(oss_.str()); \
    }                                         \
  } while (0)

// Worker cap for parallel_for. Set once from the CLI --jobs flag; defaults
// to 1. Results are required to be identical for any setting, so loops may
// only write disjoint output slots.
void set_max_jobs(int jobs);
int max_jobs();

// Static contiguous chunking over [0, n). Serial when jobs == 1 or the range
// is small. fn must not touch shared mutable state outside its own slots.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);

}  // namespace msf
