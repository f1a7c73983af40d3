#include <malloc.h>

#include "poisonguard/runner/cli.hpp"

namespace {

// Training allocates and frees the same large activation buffers every step;
// keeping them on the heap instead of mmap avoids page-fault churn.
void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  return poisonguard::run_cli(argc, argv);
}
