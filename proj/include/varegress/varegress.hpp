#pragma once

// Everything except png.hpp, which needs libpng (link varegress_png).
#include "varegress/adam.hpp"
#include "varegress/autodiff.hpp"
#include "varegress/binary_io.hpp"
#include "varegress/config.hpp"
#include "varegress/data.hpp"
#include "varegress/errors.hpp"
#include "varegress/eval.hpp"
#include "varegress/experiment.hpp"
#include "varegress/gp.hpp"
#include "varegress/image.hpp"
#include "varegress/kv.hpp"
#include "varegress/linalg.hpp"
#include "varegress/model.hpp"
#include "varegress/regress.hpp"
#include "varegress/rng.hpp"
#include "varegress/ssim.hpp"
#include "varegress/training.hpp"
