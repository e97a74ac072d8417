// Umbrella header.
#pragma once

#include "traj/checkpoint.hpp"
#include "traj/data.hpp"
#include "traj/engine.hpp"
#include "traj/eval.hpp"
#include "traj/experiment.hpp"
#include "traj/lsh.hpp"
#include "traj/model.hpp"
#include "traj/numkit.hpp"
#include "traj/parallel.hpp"
#include "traj/synthetic.hpp"
#include "traj/tbatch.hpp"
#include "traj/train.hpp"
