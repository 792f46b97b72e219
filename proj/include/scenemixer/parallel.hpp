#pragma once

#include <cstddef>
#include <functional>

namespace scenemixer {

/// Upper bound on worker threads used by parallel_for. Results never depend
/// on this value: every index writes disjoint outputs and reductions are
/// summed afterwards in index order.
void set_thread_count(std::size_t threads);
std::size_t thread_count();

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body);

}  // namespace scenemixer
