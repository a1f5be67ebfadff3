#pragma once

#include "lingm/adam.hpp"
#include "lingm/augment.hpp"
#include "lingm/dataset.hpp"
#include "lingm/embedding.hpp"
#include "lingm/encoder.hpp"
#include "lingm/error.hpp"
#include "lingm/evalsuite.hpp"
#include "lingm/imgparam.hpp"
#include "lingm/lgm.hpp"
#include "lingm/ndt.hpp"
#include "lingm/ops.hpp"
#include "lingm/ppm.hpp"
#include "lingm/resize.hpp"
#include "lingm/rng.hpp"
#include "lingm/tensor.hpp"
#include "lingm/run_config.hpp"
#include "lingm/toy.hpp"
