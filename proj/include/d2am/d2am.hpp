#pragma once

// Umbrella header: the whole library in one include.

#include "d2am/checkpoint.hpp"
#include "d2am/clustering.hpp"
#include "d2am/config.hpp"
#include "d2am/data_synth.hpp"
#include "d2am/dataset_io.hpp"
#include "d2am/domain_repr.hpp"
#include "d2am/harness.hpp"
#include "d2am/losses.hpp"
#include "d2am/meta_trainer.hpp"
#include "d2am/metrics.hpp"
#include "d2am/model.hpp"
#include "d2am/optim.hpp"
