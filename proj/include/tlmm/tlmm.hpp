#pragma once

#include "tlmm/banded.hpp"
#include "tlmm/bases.hpp"
#include "tlmm/checkpoint.hpp"
#include "tlmm/config.hpp"
#include "tlmm/constrained_mvn.hpp"
#include "tlmm/datagen.hpp"
#include "tlmm/dataset_io.hpp"
#include "tlmm/errors.hpp"
#include "tlmm/ltf_io.hpp"
#include "tlmm/metrics.hpp"
#include "tlmm/model.hpp"
#include "tlmm/parallel.hpp"
#include "tlmm/priors.hpp"
#include "tlmm/rng.hpp"
#include "tlmm/sampler.hpp"
#include "tlmm/tensor.hpp"
