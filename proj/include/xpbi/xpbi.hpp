#pragma once

#include <xpbi/linalg.hpp>
#include <xpbi/kernels.hpp>
#include <xpbi/particles.hpp>
#include <xpbi/sampling.hpp>
#include <xpbi/constitutive.hpp>
#include <xpbi/colliders.hpp>
#include <xpbi/solver.hpp>
#include <xpbi/scene_io.hpp>
#include <xpbi/oracles.hpp>
#include <xpbi/studies.hpp>
#include <xpbi/verify.hpp>
