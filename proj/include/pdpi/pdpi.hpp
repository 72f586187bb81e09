#pragma once

#include "pdpi/hilbert.hpp"
#include "pdpi/prox.hpp"
#include "pdpi/solver.hpp"
#include "pdpi/lasso.hpp"
#include "pdpi/transport.hpp"
#include "pdpi/mfg.hpp"
#include "pdpi/experiment.hpp"
