#include "dlbl/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "dlbl/tensor.hpp"

namespace dlbl {

std::size_t worker_count() {
  if (const char* env = std::getenv("DLBL_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t count, std::size_t workers,
                  const std::function<void(std::size_t, std::size_t)>& body) {
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(count, 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) body(0, i);
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mu;
  std::atomic<std::size_t> next{0};
  const bool fixed = deterministic();
  auto run = [&](std::size_t w) {
    try {
      if (fixed) {
        // static round-robin partition
        for (std::size_t i = w; i < count; i += workers) body(w, i);
      } else {
        for (std::size_t i = next++; i < count; i = next++) body(w, i);
      }
    } catch (...) {
      std::lock_guard lock(failure_mu);
      if (!failure) failure = std::current_exception();
    }
  };
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers - 1);
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run, w);
    run(0);
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace dlbl
