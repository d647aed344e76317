/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include "hifimamba/archive.hpp"
#include "hifimamba/autograd.hpp"
#include "hifimamba/blocks.hpp"
#include "hifimamba/config.hpp"
#include "hifimamba/error.hpp"
#include "hifimamba/experiments.hpp"
#include "hifimamba/fft.hpp"
#include "hifimamba/image_io.hpp"
#include "hifimamba/kspace.hpp"
#include "hifimamba/metrics.hpp"
#include "hifimamba/network.hpp"
#include "hifimamba/nn.hpp"
#include "hifimamba/ops.hpp"
#include "hifimamba/ssm.hpp"
#include "hifimamba/tensor.hpp"
#include "hifimamba/training.hpp"
#include "hifimamba/wavelet.hpp"
