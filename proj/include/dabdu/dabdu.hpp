#pragma once

#include "dabdu/bdlstm.hpp"
#include "dabdu/blocks.hpp"
#include "dabdu/dataset.hpp"
#include "dabdu/dtf.hpp"
#include "dabdu/errors.hpp"
#include "dabdu/gradcheck.hpp"
#include "dabdu/gradient_suite.hpp"
#include "dabdu/metrics.hpp"
#include "dabdu/model.hpp"
#include "dabdu/ops.hpp"
#include "dabdu/optim.hpp"
#include "dabdu/rng.hpp"
#include "dabdu/tensor.hpp"
#include "dabdu/train.hpp"
