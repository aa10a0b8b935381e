#pragma once

#include "cil/backbone.hpp"
#include "cil/binary_io.hpp"
#include "cil/dataset.hpp"
#include "cil/errors.hpp"
#include "cil/metrics.hpp"
#include "cil/ops.hpp"
#include "cil/optim.hpp"
#include "cil/pq.hpp"
#include "cil/replay.hpp"
#include "cil/rng.hpp"
#include "cil/runner.hpp"
#include "cil/scenario.hpp"
#include "cil/strategies.hpp"
#include "cil/tensor.hpp"
