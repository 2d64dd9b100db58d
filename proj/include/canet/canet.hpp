#pragma once

#include "canet/core/autograd.hpp"
#include "canet/core/grad_check.hpp"
#include "canet/core/ops.hpp"
#include "canet/core/optim.hpp"
#include "canet/core/rng.hpp"
#include "canet/core/tensor.hpp"
#include "canet/data/dataset.hpp"
#include "canet/data/image.hpp"
#include "canet/data/image_io.hpp"
#include "canet/data/synth.hpp"
#include "canet/loss/supervision.hpp"
#include "canet/metrics/metrics.hpp"
#include "canet/metrics/report.hpp"
#include "canet/nn/cod_network.hpp"
#include "canet/nn/confidence_network.hpp"
#include "canet/nn/layers.hpp"
#include "canet/train/checkpoint.hpp"
#include "canet/train/config.hpp"
#include "canet/train/grad_suite.hpp"
#include "canet/train/trainer.hpp"
