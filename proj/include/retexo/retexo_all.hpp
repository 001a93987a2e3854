#pragma once

#include "baseline.hpp"
#include "errors.hpp"
#include "experiment.hpp"
#include "federated.hpp"
#include "gradcheck.hpp"
#include "graph.hpp"
#include "kernels.hpp"
#include "netsim.hpp"
#include "optim.hpp"
#include "params.hpp"
#include "retexo.hpp"
#include "rng.hpp"
#include "synth.hpp"
