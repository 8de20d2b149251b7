#pragma once

#include <cstddef>
#include <functional>

namespace drgrade {

// Process-wide worker count used by the batch-parallel kernels. 1 runs
// everything inline on the calling thread.
void set_worker_count(std::size_t workers);
std::size_t worker_count();

// Splits [0, n) into at most worker_count() contiguous chunks and runs
// fn(chunk_index, begin, end) for each. Chunk boundaries depend only on n and
// the worker count, so per-chunk partial results reduced in chunk order are
// deterministic for a fixed worker count.
std::size_t chunk_count(std::size_t n);
void parallel_chunks(std::size_t n,
                     const std::function<void(std::size_t chunk, std::size_t begin, std::size_t end)>& fn);

}  // namespace drgrade
