#pragma once

#include "collapse/central_path.hpp"
#include "collapse/io.hpp"
#include "collapse/metrics.hpp"
#include "collapse/perturbation.hpp"
#include "collapse/prox.hpp"
#include "collapse/types.hpp"
#include "collapse/ufm.hpp"
