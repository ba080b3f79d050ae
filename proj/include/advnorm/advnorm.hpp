#pragma once

#include "advnorm/checkpoint.hpp"
#include "advnorm/errors.hpp"
#include "advnorm/experiment.hpp"
#include "advnorm/hash.hpp"
#include "advnorm/losses.hpp"
#include "advnorm/metrics.hpp"
#include "advnorm/mvol_io.hpp"
#include "advnorm/networks.hpp"
#include "advnorm/nn.hpp"
#include "advnorm/optim.hpp"
#include "advnorm/parallel.hpp"
#include "advnorm/phantom.hpp"
#include "advnorm/pipeline.hpp"
#include "advnorm/rng.hpp"
#include "advnorm/trainer.hpp"
#include "advnorm/volume.hpp"
