#pragma once

// Everything: tensors and autodiff, signals, the synthetic cohort, models,
// losses, training, evaluation and reporting.

#include "opsup/autodiff.hpp"
#include "opsup/checkpoint.hpp"
#include "opsup/config.hpp"
#include "opsup/dataset.hpp"
#include "opsup/losses.hpp"
#include "opsup/metrics.hpp"
#include "opsup/models.hpp"
#include "opsup/optim.hpp"
#include "opsup/report.hpp"
#include "opsup/signals.hpp"
#include "opsup/synth.hpp"
#include "opsup/training.hpp"

namespace opsup {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace opsup
