// Umbrella header: pulls in the whole toolkit.
//
// The library is organized in layers. `tensor`/`autodiff` provide the numeric
// substrate; `media`/`media_io` the frame and clip types with PNG-directory
// storage; `vae`/`denoiser`/`diffusion`/`restorer` the one-step restoration
// model; `losses`/`trainer`/`checkpoint` the two-stage training loop;
// `degradation`, `curator`, `flow`, and `metrics` the data pipeline around it.

#pragma once

#include "dove/common.hpp"
#include "dove/rng.hpp"
#include "dove/tensor.hpp"
#include "dove/autodiff.hpp"
#include "dove/params.hpp"
#include "dove/media.hpp"
#include "dove/media_io.hpp"
#include "dove/schedule.hpp"
#include "dove/vae.hpp"
#include "dove/denoiser.hpp"
#include "dove/restorer.hpp"
#include "dove/losses.hpp"
#include "dove/optimizer.hpp"
#include "dove/checkpoint.hpp"
#include "dove/config.hpp"
#include "dove/trainer.hpp"
#include "dove/degradation.hpp"
#include "dove/flow.hpp"
#include "dove/curator.hpp"
#include "dove/metrics.hpp"
