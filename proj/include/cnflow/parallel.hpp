#pragma once

#include <cstddef>
#include <exception>
#include <functional>
#include <thread>
#include <utility>
#include <vector>

namespace cnflow {

/// Contiguous row ranges for batch sharding; empty shards are dropped.
inline std::vector<std::pair<std::size_t, std::size_t>> shard_ranges(std::size_t total,
                                                                     std::size_t shards) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (total == 0) return out;
  shards = std::max<std::size_t>(1, std::min(shards, total));
  const std::size_t base = total / shards;
  const std::size_t extra = total % shards;
  std::size_t begin = 0;
  for (std::size_t s = 0; s < shards; ++s) {
    const std::size_t len = base + (s < extra ? 1 : 0);
    if (len == 0) continue;
    out.emplace_back(begin, begin + len);
    begin += len;
  }
  return out;
}

/// Runs fn(shard_index) on a thread per shard (shard 0 inline). Exceptions
/// propagate after all threads join; results must be written to
/// per-shard slots so the reduction order stays deterministic.
inline void run_sharded(std::size_t n_shards, const std::function<void(std::size_t)>& fn) {
  if (n_shards <= 1) {
    if (n_shards == 1) fn(0);
    return;
  }
  std::vector<std::exception_ptr> errors(n_shards);
  std::vector<std::thread> workers;
  workers.reserve(n_shards - 1);
  for (std::size_t s = 1; s < n_shards; ++s) {
    workers.emplace_back([&, s] {
      try {
        fn(s);
      } catch (...) {
        errors[s] = std::current_exception();
      }
    });
  }
  try {
    fn(0);
  } catch (...) {
    errors[0] = std::current_exception();
  }
  for (std::thread& t : workers) t.join();
  for (const std::exception_ptr& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline std::size_t default_worker_count() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

}  // namespace cnflow
