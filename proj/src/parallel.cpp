#include "unitmod/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

UNITMOD_BEGIN_NAMESPACE

namespace {

int read_env_threads() {
    const char* v = std::getenv("UNITMOD_THREADS");
    if (!v || !*v) return 0;
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (end == v || n < 0) return 0;
    return static_cast<int>(std::min<long>(n, 256));
}

std::atomic<int> g_threads{read_env_threads()};

}  // namespace

int worker_threads() { return g_threads.load(); }
void set_worker_threads(int n) { g_threads.store(std::max(0, n)); }

void parallel_for(int n, const std::function<void(int)>& body) {
    const int workers = std::min(worker_threads(), n);
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (int i = next++; i < n; i = next++) body(i);
        });
    }
    for (auto& t : pool) t.join();
}

UNITMOD_END_NAMESPACE
