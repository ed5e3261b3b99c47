#pragma once

#include "advmb/attacks.hpp"
#include "advmb/core.hpp"
#include "advmb/dataio.hpp"
#include "advmb/ensemble.hpp"
#include "advmb/eval.hpp"
#include "advmb/network.hpp"
#include "advmb/riskgap.hpp"
#include "advmb/svgd.hpp"
#include "advmb/toyps.hpp"
