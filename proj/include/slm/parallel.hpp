// Copyright 2026 The slmkit Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace slm {

// Runs fn(task) for task in [0, n_tasks) on up to `workers` threads. Callers
// write results into per-task slots and reduce them in task order, which
// keeps the output independent of the worker count.
template <typename Fn>
void parallel_tasks(size_t n_tasks, int workers, Fn&& fn) {
  const size_t n_threads = std::min<size_t>(std::max(workers, 1), n_tasks);
  if (n_threads <= 1) {
    for (size_t t = 0; t < n_tasks; ++t) fn(t);
    return;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  pool.reserve(n_threads);
  for (size_t w = 0; w < n_threads; ++w) {
    pool.emplace_back([&] {
      for (size_t t = next++; t < n_tasks; t = next++) {
        try {
          fn(t);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace slm
