// Umbrella header.

#pragma once

#include "condshap/causal.hpp"
#include "condshap/causal_ordering.hpp"
#include "condshap/coalition.hpp"
#include "condshap/common.hpp"
#include "condshap/ctree.hpp"
#include "condshap/data.hpp"
#include "condshap/evaluation.hpp"
#include "condshap/explain.hpp"
#include "condshap/external_model.hpp"
#include "condshap/forecast.hpp"
#include "condshap/mc_estimators.hpp"
#include "condshap/model.hpp"
#include "condshap/plot.hpp"
#include "condshap/regression_estimators.hpp"
#include "condshap/report.hpp"
#include "condshap/solver.hpp"
