#pragma once

#include "cocycle_clt/error.hpp"
#include "cocycle_clt/random.hpp"
#include "cocycle_clt/stats.hpp"
#include "cocycle_clt/markov_sft.hpp"
#include "cocycle_clt/lie_sl.hpp"
#include "cocycle_clt/cocycle_engine.hpp"
#include "cocycle_clt/kakutani.hpp"
#include "cocycle_clt/stationary.hpp"
#include "cocycle_clt/clt_harness.hpp"
#include "cocycle_clt/config.hpp"
#include "cocycle_clt/pipeline.hpp"
