#pragma once

#include "cct/tensor.hpp"
#include "cct/autodiff.hpp"
#include "cct/grad_check.hpp"
#include "cct/head.hpp"
#include "cct/losses.hpp"
#include "cct/data.hpp"
#include "cct/model.hpp"
#include "cct/metrics.hpp"
#include "cct/trainer.hpp"
#include "cct/checkpoint.hpp"
