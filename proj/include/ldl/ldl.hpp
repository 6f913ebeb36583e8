#pragma once

#include "ldl/autodiff.hpp"
#include "ldl/checkpoint.hpp"
#include "ldl/data.hpp"
#include "ldl/distribution.hpp"
#include "ldl/gradcheck.hpp"
#include "ldl/gradsuite.hpp"
#include "ldl/image.hpp"
#include "ldl/network.hpp"
#include "ldl/tensor.hpp"
#include "ldl/training.hpp"
