#pragma once

#include "rfcl/adam.hpp"
#include "rfcl/artifacts.hpp"
#include "rfcl/checkpoint.hpp"
#include "rfcl/cka.hpp"
#include "rfcl/config.hpp"
#include "rfcl/container.hpp"
#include "rfcl/data.hpp"
#include "rfcl/error.hpp"
#include "rfcl/fisher.hpp"
#include "rfcl/metrics.hpp"
#include "rfcl/model.hpp"
#include "rfcl/regularizers.hpp"
#include "rfcl/tape.hpp"
#include "rfcl/tensor.hpp"
#include "rfcl/trainer.hpp"
