#pragma once

// Maximum likelihood estimation of panel data models with interactive
// effects: factor error structures shared by the outcome and the regressors,
// with block-diagonal idiosyncratic covariance.

#include "interfx/baselines.hpp"
#include "interfx/block_cov.hpp"
#include "interfx/core.hpp"
#include "interfx/em.hpp"
#include "interfx/identification.hpp"
#include "interfx/inference.hpp"
#include "interfx/io.hpp"
#include "interfx/likelihood.hpp"
#include "interfx/model_selection.hpp"
#include "interfx/moments.hpp"
#include "interfx/panel_data.hpp"
#include "interfx/restricted.hpp"
#include "interfx/simulation.hpp"
#include "interfx/theta.hpp"
