#include <iostream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "mulde/cli.hpp"

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Training allocates and frees multi-megabyte activation buffers every step;
  // keep them on the heap instead of returning pages to the kernel each time.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  return mulde::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
