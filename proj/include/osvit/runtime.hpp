#pragma once

namespace osvit {

// Caps the worker threads used inside dense kernels. Deterministic mode pins
// this to 1 so reduction order is fixed end to end.
void set_compute_threads(int threads);
int compute_threads();

// Keeps large freed buffers in the heap instead of returning them to the
// OS, so per-step activations do not page-fault on every batch. Call once
// at process start.
void configure_allocator();

}  // namespace osvit
