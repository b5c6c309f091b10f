#pragma once

#include "meshcox/common.hpp"
#include "meshcox/diagnostics.hpp"
#include "meshcox/io.hpp"
#include "meshcox/kernel.hpp"
#include "meshcox/likelihood.hpp"
#include "meshcox/mesh.hpp"
#include "meshcox/preprocess.hpp"
#include "meshcox/rng.hpp"
#include "meshcox/sampler.hpp"
#include "meshcox/simulate.hpp"
