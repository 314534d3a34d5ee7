#pragma once

// Umbrella header.

#include "ctc/config.hpp"
#include "ctc/decompose.hpp"
#include "ctc/ensemble_io.hpp"
#include "ctc/error.hpp"
#include "ctc/grid_paths.hpp"
#include "ctc/moments.hpp"
#include "ctc/parallel.hpp"
#include "ctc/pipeline.hpp"
#include "ctc/rng.hpp"
#include "ctc/simulate.hpp"
#include "ctc/solve.hpp"
#include "ctc/structural.hpp"
