#pragma once

#include <cstddef>
#include <functional>

namespace artsurf {

// Process-wide worker count (1 = serial). Set once from the CLI --threads flag.
void set_worker_count(int n);
int worker_count();

// Runs fn(job) for job in [0, n_jobs). Jobs are a fixed decomposition of the work;
// any reduction over per-job outputs must happen afterwards in job order so that
// results are identical for every worker count.
void parallel_for(std::size_t n_jobs, const std::function<void(std::size_t)>& fn);

}  // namespace artsurf
