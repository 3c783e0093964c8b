// Umbrella header.
#pragma once

#include "ebds/errors.hpp"
#include "ebds/io.hpp"
#include "ebds/rng.hpp"
#include "ebds/model.hpp"
#include "ebds/simulate.hpp"
#include "ebds/energynet.hpp"
#include "ebds/trainer.hpp"
#include "ebds/normalize.hpp"
#include "ebds/baselines.hpp"
#include "ebds/metrics.hpp"
