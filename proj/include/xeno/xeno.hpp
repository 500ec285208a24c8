#pragma once

#include "xeno/cfg_metrics.hpp"
#include "xeno/csv.hpp"
#include "xeno/error.hpp"
#include "xeno/fragment.hpp"
#include "xeno/indirection.hpp"
#include "xeno/pe.hpp"
#include "xeno/report.hpp"
#include "xeno/trace.hpp"
#include "xeno/util.hpp"
