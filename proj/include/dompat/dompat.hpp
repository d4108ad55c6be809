#ifndef DOMPAT_DOMPAT_HPP
#define DOMPAT_DOMPAT_HPP

// Umbrella header for the dominant-pattern toolkit.

#include "dompat/common.hpp"
#include "dompat/tensor.hpp"
#include "dompat/optim.hpp"
#include "dompat/nn.hpp"
#include "dompat/data.hpp"
#include "dompat/pattern.hpp"
#include "dompat/eval.hpp"
#include "dompat/train.hpp"
#include "dompat/transfer.hpp"

#endif  // DOMPAT_DOMPAT_HPP
