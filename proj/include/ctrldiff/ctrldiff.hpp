#pragma once

// Desk-scale controllable-diffusion laboratory: a small denoising UNet, two
// conditioning architectures (zero-convolution trainable copy vs lightweight
// extractor + cross normalization) and a benchmark harness comparing them.

#include "ctrldiff/autodiff.hpp"
#include "ctrldiff/backbone.hpp"
#include "ctrldiff/bench.hpp"
#include "ctrldiff/checkpoint.hpp"
#include "ctrldiff/config.hpp"
#include "ctrldiff/control.hpp"
#include "ctrldiff/datagen.hpp"
#include "ctrldiff/diffusion.hpp"
#include "ctrldiff/finetune.hpp"
#include "ctrldiff/lora.hpp"
#include "ctrldiff/nn.hpp"
#include "ctrldiff/registry.hpp"
#include "ctrldiff/report.hpp"
#include "ctrldiff/rng.hpp"
#include "ctrldiff/runner.hpp"
#include "ctrldiff/tensor.hpp"
