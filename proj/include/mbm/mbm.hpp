#pragma once

// Subpopulation model-based metric estimation: datasets, evaluation-model
// formulas and design matrices, nonparametric metric estimators, posterior
// samplers, predictive metric estimates, model checking, bootstrap intervals,
// and the semi-synthetic experiment generator.

#include "mbm/checking.hpp"
#include "mbm/dataset.hpp"
#include "mbm/design.hpp"
#include "mbm/diagnostics.hpp"
#include "mbm/errors.hpp"
#include "mbm/experiment.hpp"
#include "mbm/formula.hpp"
#include "mbm/inference.hpp"
#include "mbm/io.hpp"
#include "mbm/metrics.hpp"
#include "mbm/model.hpp"
#include "mbm/nuts.hpp"
#include "mbm/pipeline.hpp"
#include "mbm/predictive.hpp"
#include "mbm/resample.hpp"
#include "mbm/rng.hpp"
#include "mbm/slice.hpp"
#include "mbm/stats.hpp"
#include "mbm/synth.hpp"
