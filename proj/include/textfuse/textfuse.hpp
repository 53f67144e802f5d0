// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header.
#pragma once

#include "textfuse/adam.hpp"
#include "textfuse/checkpoint.hpp"
#include "textfuse/conv.hpp"
#include "textfuse/dataset.hpp"
#include "textfuse/detector.hpp"
#include "textfuse/errors.hpp"
#include "textfuse/evaluate.hpp"
#include "textfuse/fusion_net.hpp"
#include "textfuse/gradcheck.hpp"
#include "textfuse/image.hpp"
#include "textfuse/losses.hpp"
#include "textfuse/metrics.hpp"
#include "textfuse/ops.hpp"
#include "textfuse/parallel.hpp"
#include "textfuse/random.hpp"
#include "textfuse/runtime.hpp"
#include "textfuse/tensor.hpp"
#include "textfuse/text_encoder.hpp"
#include "textfuse/trainer.hpp"
