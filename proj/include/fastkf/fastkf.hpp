#pragma once

// Convenience umbrella for the whole library.

#include "boxcox.hpp"
#include "cg.hpp"
#include "config.hpp"
#include "covariance.hpp"
#include "dense_filter.hpp"
#include "driver.hpp"
#include "enkf.hpp"
#include "fast_filter.hpp"
#include "field_io.hpp"
#include "grid.hpp"
#include "kernel.hpp"
#include "lowrank.hpp"
#include "rng.hpp"
#include "tomography.hpp"
#include "uq.hpp"
