#pragma once

#include <functional>

#include "unitmod/core.hpp"

UNITMOD_BEGIN_NAMESPACE

/// Worker cap from UNITMOD_THREADS (0 or unset: run inline on the caller).
int worker_threads();
void set_worker_threads(int n);

/// Runs body(i) for i in [0, n). Iterations must write disjoint memory; the
/// result is then independent of the thread count.
void parallel_for(int n, const std::function<void(int)>& body);

UNITMOD_END_NAMESPACE
