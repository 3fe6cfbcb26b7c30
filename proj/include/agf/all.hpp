#pragma once

#include "agf/core.hpp"
#include "agf/model.hpp"
#include "agf/modelpack.hpp"
#include "agf/backprop.hpp"
#include "agf/attribution.hpp"
#include "agf/factorization.hpp"
#include "agf/agf.hpp"
#include "agf/ssl.hpp"
#include "agf/image_io.hpp"
#include "agf/methods.hpp"
#include "agf/eval.hpp"
