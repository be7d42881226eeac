#pragma once

#include "ngvi/cli.hpp"
#include "ngvi/config.hpp"
#include "ngvi/continual.hpp"
#include "ngvi/data.hpp"
#include "ngvi/errors.hpp"
#include "ngvi/linalg.hpp"
#include "ngvi/metrics.hpp"
#include "ngvi/network.hpp"
#include "ngvi/optimizers.hpp"
#include "ngvi/parallel.hpp"
#include "ngvi/posterior.hpp"
#include "ngvi/reports.hpp"
#include "ngvi/rng.hpp"
#include "ngvi/serialize.hpp"
#include "ngvi/tensor.hpp"
#include "ngvi/trainer.hpp"
