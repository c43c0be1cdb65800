#pragma once

#include <cstddef>
#include <exception>
#include <mutex>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace hemosbi {

/// Every data-parallel kernel in the library has a serial reference path and
/// an OpenMP path. Both must produce identical results up to summation order.
enum class Execution { serial, parallel };

inline int worker_count()
{
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

inline void set_worker_count(int n)
{
#ifdef _OPENMP
    if (n > 0)
        omp_set_num_threads(n);
#else
    (void)n;
#endif
}

/// Calls fn(i) for i in [0, n). Exceptions thrown inside the parallel region
/// are captured and the first one is rethrown on the calling thread.
template <class Fn>
void for_each_index(std::size_t n, Execution exec, Fn&& fn)
{
    if (exec == Execution::serial || n < 2) {
        for (std::size_t i = 0; i < n; ++i)
            fn(i);
        return;
    }
    std::exception_ptr error;
    std::mutex error_mutex;
    const long count = static_cast<long>(n);
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < count; ++i) {
        try {
            fn(static_cast<std::size_t>(i));
        } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error)
                error = std::current_exception();
        }
    }
    if (error)
        std::rethrow_exception(error);
}

} // namespace hemosbi
