#ifndef CMDQ_CMDQ_HPP
#define CMDQ_CMDQ_HPP

#include "cmdq/calibration.hpp"
#include "cmdq/error.hpp"
#include "cmdq/half.hpp"
#include "cmdq/linalg.hpp"
#include "cmdq/matrix.hpp"
#include "cmdq/model.hpp"
#include "cmdq/packfmt.hpp"
#include "cmdq/pipeline.hpp"
#include "cmdq/qkernel.hpp"
#include "cmdq/quantcore.hpp"
#include "cmdq/spans.hpp"
#include "cmdq/tensor_io.hpp"

#endif  // CMDQ_CMDQ_HPP
