// SPDX-License-Identifier: Apache-2.0
//
// Process-wide allocator tuning for training workloads.
#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace textfuse {

// Activation and gradient buffers are allocated and released every step.
// Keeping them on the heap instead of fresh mappings avoids repeated page
// faults, which otherwise dominate elementwise kernels. No effect on results.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

}  // namespace textfuse
