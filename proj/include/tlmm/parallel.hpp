#pragma once

#include <exception>

#include "tlmm/tensor.hpp"

namespace tlmm {

// Static-schedule loop; the first exception raised by any iteration is rethrown.
template <class F>
void parallel_for(Index n, int threads, F&& f) {
  std::exception_ptr err = nullptr;
#pragma omp parallel for schedule(static) num_threads(threads > 0 ? threads : 1)
  for (Index i = 0; i < n; ++i) {
    try {
      f(i);
    } catch (...) {
#pragma omp critical(tlmm_parallel_error)
      if (!err) err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);
}

}  // namespace tlmm
