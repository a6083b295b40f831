#pragma once

#include "fedsparse/tensor.hpp"
#include "fedsparse/autodiff.hpp"
#include "fedsparse/box.hpp"
#include "fedsparse/detector.hpp"
#include "fedsparse/sparsifier.hpp"
#include "fedsparse/dataset.hpp"
#include "fedsparse/evaluation.hpp"
#include "fedsparse/federation.hpp"
#include "fedsparse/checkpoint.hpp"
#include "fedsparse/config.hpp"
#include "fedsparse/experiment.hpp"
