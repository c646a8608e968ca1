#pragma once

#include "mfglab/convergence.hpp"
#include "mfglab/fem.hpp"
#include "mfglab/geometry.hpp"
#include "mfglab/heat.hpp"
#include "mfglab/io.hpp"
#include "mfglab/mesh.hpp"
#include "mfglab/mfg_solver.hpp"
#include "mfglab/parallel.hpp"
#include "mfglab/problem.hpp"
#include "mfglab/quadrature.hpp"
#include "mfglab/spacetime.hpp"
#include "mfglab/thresholds.hpp"
