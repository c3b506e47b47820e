#pragma once

#include "mlab/analysis.hpp"
#include "mlab/autodiff.hpp"
#include "mlab/checkpoint.hpp"
#include "mlab/config.hpp"
#include "mlab/embed_eval.hpp"
#include "mlab/gradcheck.hpp"
#include "mlab/kernels.hpp"
#include "mlab/meta.hpp"
#include "mlab/models.hpp"
#include "mlab/tasks.hpp"
#include "mlab/tensor.hpp"
#include "mlab/selfcheck.hpp"
