#pragma once

#include "tisc/errors.hpp"
#include "tisc/grid.hpp"
#include "tisc/mild_case.hpp"
#include "tisc/model.hpp"
#include "tisc/rng.hpp"
#include "tisc/scale.hpp"
#include "tisc/simulator.hpp"
#include "tisc/strong_case.hpp"
#include "tisc/verifier.hpp"
