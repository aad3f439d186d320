#pragma once

#include "rpiq/calibration.hpp"
#include "rpiq/error.hpp"
#include "rpiq/gptq.hpp"
#include "rpiq/harness.hpp"
#include "rpiq/metrics.hpp"
#include "rpiq/model_io.hpp"
#include "rpiq/numerics.hpp"
#include "rpiq/quantgrid.hpp"
#include "rpiq/refine.hpp"
