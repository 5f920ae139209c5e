#pragma once

#include "maglim/certify.hpp"
#include "maglim/error.hpp"
#include "maglim/fit.hpp"
#include "maglim/fullorder.hpp"
#include "maglim/gain.hpp"
#include "maglim/harness.hpp"
#include "maglim/io.hpp"
#include "maglim/linalg.hpp"
#include "maglim/lqr.hpp"
#include "maglim/mpc.hpp"
#include "maglim/plant.hpp"
