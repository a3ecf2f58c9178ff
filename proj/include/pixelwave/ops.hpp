#pragma once

#include "pixelwave/eig.hpp"
#include "pixelwave/ops_attn.hpp"
#include "pixelwave/ops_conv.hpp"
#include "pixelwave/ops_core.hpp"
