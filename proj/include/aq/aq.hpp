#pragma once

#include "aq/error.hpp"
#include "aq/tensor.hpp"
#include "aq/tape.hpp"
#include "aq/ops.hpp"
#include "aq/batchnorm.hpp"
#include "aq/quantize.hpp"
#include "aq/rng.hpp"
#include "aq/arch.hpp"
#include "aq/network.hpp"
#include "aq/optim.hpp"
#include "aq/dataset.hpp"
#include "aq/config.hpp"
#include "aq/trainer.hpp"
#include "aq/binary_io.hpp"
#include "aq/checkpoint.hpp"
#include "aq/bundle.hpp"
#include "aq/metrics.hpp"
