#pragma once

#include "reachpred/accumulate.hpp"
#include "reachpred/core.hpp"
#include "reachpred/cursor.hpp"
#include "reachpred/dsp.hpp"
#include "reachpred/engine.hpp"
#include "reachpred/fsm.hpp"
#include "reachpred/intention.hpp"
#include "reachpred/mixture.hpp"
#include "reachpred/pipeline.hpp"
#include "reachpred/reduce.hpp"
#include "reachpred/service.hpp"
#include "reachpred/store.hpp"
#include "reachpred/synth.hpp"
