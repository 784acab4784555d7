// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header.
#pragma once

#include "moltenflow/budget.hpp"
#include "moltenflow/checkpoint.hpp"
#include "moltenflow/commands.hpp"
#include "moltenflow/config.hpp"
#include "moltenflow/evaluation.hpp"
#include "moltenflow/flowmatch.hpp"
#include "moltenflow/graph.hpp"
#include "moltenflow/guidance.hpp"
#include "moltenflow/moeval.hpp"
#include "moltenflow/nn.hpp"
#include "moltenflow/optim.hpp"
#include "moltenflow/pipeline.hpp"
#include "moltenflow/report.hpp"
#include "moltenflow/rng.hpp"
#include "moltenflow/seqvae.hpp"
#include "moltenflow/surrogate.hpp"
#include "moltenflow/sweep.hpp"
#include "moltenflow/tensor.hpp"
#include "moltenflow/toyset.hpp"
