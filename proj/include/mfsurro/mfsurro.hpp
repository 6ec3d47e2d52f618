#pragma once

// Umbrella header.

#include "mfsurro/autodiff.hpp"
#include "mfsurro/checkpoint.hpp"
#include "mfsurro/config.hpp"
#include "mfsurro/dataset.hpp"
#include "mfsurro/error.hpp"
#include "mfsurro/experiment.hpp"
#include "mfsurro/fdm.hpp"
#include "mfsurro/field.hpp"
#include "mfsurro/losses.hpp"
#include "mfsurro/metrics.hpp"
#include "mfsurro/optim.hpp"
#include "mfsurro/plot.hpp"
#include "mfsurro/tensor.hpp"
#include "mfsurro/train.hpp"
#include "mfsurro/unet.hpp"
