#pragma once

#include "batsel/common.hpp"
#include "batsel/config.hpp"
#include "batsel/dataset.hpp"
#include "batsel/harness.hpp"
#include "batsel/hessian.hpp"
#include "batsel/influence.hpp"
#include "batsel/model.hpp"
#include "batsel/oracle.hpp"
#include "batsel/selection.hpp"
#include "batsel/stats.hpp"
#include "batsel/tasks.hpp"
#include "batsel/train.hpp"
