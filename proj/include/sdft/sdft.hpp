#pragma once

#include "sdft/tensor.hpp"
#include "sdft/autodiff.hpp"
#include "sdft/params.hpp"
#include "sdft/data.hpp"
#include "sdft/encoder.hpp"
#include "sdft/optim.hpp"
#include "sdft/ensemble.hpp"
#include "sdft/config.hpp"
#include "sdft/report.hpp"
#include "sdft/distill.hpp"
#include "sdft/harness.hpp"
