#pragma once

#include "convfse/autodiff.hpp"
#include "convfse/dsp.hpp"
#include "convfse/errors.hpp"
#include "convfse/gating.hpp"
#include "convfse/io.hpp"
#include "convfse/metrics.hpp"
#include "convfse/model.hpp"
#include "convfse/rng.hpp"
#include "convfse/runtime.hpp"
#include "convfse/tensor.hpp"
#include "convfse/training.hpp"
