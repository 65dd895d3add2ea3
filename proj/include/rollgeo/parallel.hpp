#pragma once

#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace rollgeo {

/// Run fn(k) for k in [0, n_tasks) across up to n_threads workers.
/// Tasks are assigned by fixed stride (worker t handles k = t, t+T, ...),
/// so which worker runs a task never depends on timing. Each task must
/// write only to its own output slot; combined with that discipline the
/// overall result is identical for every thread count.
template <typename Fn>
void parallel_for(std::size_t n_tasks, unsigned n_threads, Fn&& fn) {
  if (n_tasks == 0) return;
  if (n_threads < 1) n_threads = 1;
  const std::size_t T = std::min<std::size_t>(n_threads, n_tasks);
  if (T == 1) {
    for (std::size_t k = 0; k < n_tasks; ++k) fn(k);
    return;
  }
  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(T);
  workers.reserve(T);
  for (std::size_t t = 0; t < T; ++t) {
    workers.emplace_back([&, t] {
      try {
        for (std::size_t k = t; k < n_tasks; k += T) fn(k);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace rollgeo
