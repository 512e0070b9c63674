#pragma once

// Umbrella header for the variational filtering library.

#include "varfilter/checkpoint.hpp"
#include "varfilter/cli.hpp"
#include "varfilter/config.hpp"
#include "varfilter/dataset.hpp"
#include "varfilter/deep_model.hpp"
#include "varfilter/distributions.hpp"
#include "varfilter/filtering.hpp"
#include "varfilter/gradcheck.hpp"
#include "varfilter/inference.hpp"
#include "varfilter/kalman.hpp"
#include "varfilter/lgssm.hpp"
#include "varfilter/model.hpp"
#include "varfilter/ops.hpp"
#include "varfilter/optim.hpp"
#include "varfilter/rng.hpp"
#include "varfilter/tensor.hpp"
