#pragma once

// Umbrella header: joint modeling of longitudinal scores and their
// observation indicators with correlated student and teacher effects.

#include "cpmvam/config.hpp"
#include "cpmvam/csv.hpp"
#include "cpmvam/data.hpp"
#include "cpmvam/design.hpp"
#include "cpmvam/estimation.hpp"
#include "cpmvam/likelihood.hpp"
#include "cpmvam/normal.hpp"
#include "cpmvam/oracle.hpp"
#include "cpmvam/report.hpp"
#include "cpmvam/rng.hpp"
#include "cpmvam/simulate.hpp"
#include "cpmvam/types.hpp"
