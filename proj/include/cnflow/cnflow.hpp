#pragma once

// Continuous normalizing flow density estimation: reverse-mode autodiff
// with second-order vector-Jacobian products, adaptive Runge-Kutta
// integration, stochastic trace estimation, adjoint-method training.

#include "cnflow/cnf.hpp"
#include "cnflow/config.hpp"
#include "cnflow/data.hpp"
#include "cnflow/errors.hpp"
#include "cnflow/graph.hpp"
#include "cnflow/net.hpp"
#include "cnflow/odesolve.hpp"
#include "cnflow/rng.hpp"
#include "cnflow/tensor.hpp"
#include "cnflow/trace.hpp"
#include "cnflow/train.hpp"
