#pragma once

#include "tinyman/baselines.hpp"
#include "tinyman/envsim.hpp"
#include "tinyman/errors.hpp"
#include "tinyman/evalharness.hpp"
#include "tinyman/io.hpp"
#include "tinyman/policyio.hpp"
#include "tinyman/ppo.hpp"
#include "tinyman/rng.hpp"
#include "tinyman/tinynet.hpp"
