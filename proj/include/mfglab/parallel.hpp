#pragma once

#include <future>
#include <vector>

namespace mfglab {

/// Runs fn(0..n-1), at most `threads` at a time, and returns the results in
/// index order so aggregation stays deterministic.
template <typename Fn>
auto run_indexed(int n, int threads, Fn&& fn) -> std::vector<decltype(fn(0))> {
  using R = decltype(fn(0));
  std::vector<R> out(static_cast<std::size_t>(n));
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = fn(i);
    return out;
  }
  int next = 0;
  while (next < n) {
    const int batch = std::min(threads, n - next);
    std::vector<std::future<R>> futs;
    futs.reserve(static_cast<std::size_t>(batch));
    for (int i = 0; i < batch; ++i)
      futs.push_back(std::async(std::launch::async, fn, next + i));
    for (int i = 0; i < batch; ++i)
      out[static_cast<std::size_t>(next + i)] = futs[static_cast<std::size_t>(i)].get();
    next += batch;
  }
  return out;
}

}  // namespace mfglab
