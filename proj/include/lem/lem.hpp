#pragma once

#include "lem/arrays.hpp"
#include "lem/controller.hpp"
#include "lem/learning.hpp"
#include "lem/network_model.hpp"
#include "lem/queues.hpp"
#include "lem/scenario_io.hpp"
#include "lem/sim.hpp"
