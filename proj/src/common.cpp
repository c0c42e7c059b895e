#include "msflow/common.hpp"

#include <algorithm>
#include <atomic>
#include <mutex>
#include <thread>
#include <vector>

namespace msf {

namespace detail {
[[noreturn]] void throw_error(std::string msg) { throw Error(std::move(msg)); }
}  // namespace detail

namespace {
std::atomic<int> g_max_jobs{1};
thread_local int g_parallel_depth = 0;
}

void set_max_jobs(int jobs) {
  MSF_CHECK(jobs >= 1, "set_max_jobs: jobs must be >= 1, got " << jobs);
  g_max_jobs.store(jobs);
}

int max_jobs() { return g_max_jobs.load(); }

void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn) {
  if (n <= 0) return;
  const int jobs = std::min<std::int64_t>(max_jobs(), n);
  // Nested calls run serially: only the outermost loop fans out, so the
  // worker count never multiplies and results stay independent of nesting.
  if (jobs <= 1 || n < 4 || g_parallel_depth > 0) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> workers;
  workers.reserve(jobs);
  const std::int64_t chunk = (n + jobs - 1) / jobs;
  std::exception_ptr first_error;
  std::mutex error_mu;
  for (int w = 0; w < jobs; ++w) {
    const std::int64_t lo = w * chunk;
    const std::int64_t hi = std::min<std::int64_t>(lo + chunk, n);
    if (lo >= hi) break;
    workers.emplace_back([&, lo, hi] {
      g_parallel_depth = 1;
      try {
        for (std::int64_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : workers) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace msf
