#pragma once

#include "spectral/error.hpp"
#include "spectral/fits.hpp"
#include "spectral/parallel.hpp"
#include "spectral/prune.hpp"
#include "spectral/spectra.hpp"
#include "spectral/tensor_io.hpp"
#include "spectral/timelapse.hpp"
#include "spectral/twotimescale.hpp"
#include "spectral/warmup.hpp"
