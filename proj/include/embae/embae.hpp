#pragma once

// Umbrella header for the EmbAE metric-embedding transfer-learning library.

#include "embae/checkpoint.hpp"
#include "embae/config.hpp"
#include "embae/core.hpp"
#include "embae/errors.hpp"
#include "embae/eval.hpp"
#include "embae/harness.hpp"
#include "embae/loss.hpp"
#include "embae/model.hpp"
#include "embae/providers.hpp"
#include "embae/rng.hpp"
#include "embae/sampling.hpp"
#include "embae/tensor.hpp"
#include "embae/training.hpp"
