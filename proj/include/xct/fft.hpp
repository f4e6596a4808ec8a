#pragma once

#include <complex>
#include <vector>

#include "xct/common.hpp"

namespace xct {

// In-place iterative radix-2 FFT. Size must be a power of two.
// inverse=true applies the 1/N scale.
void fft_inplace(std::vector<std::complex<double>>& a, bool inverse);

inline size_t next_pow2(size_t n) {
  size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

}  // namespace xct
