#pragma once

#include "cfmdet/error.hpp"
#include "cfmdet/geometry.hpp"
#include "cfmdet/image.hpp"
#include "cfmdet/channels.hpp"
#include "cfmdet/tensorio.hpp"
#include "cfmdet/boost.hpp"
#include "cfmdet/detect.hpp"
#include "cfmdet/bootstrap.hpp"
#include "cfmdet/ensemble.hpp"
#include "cfmdet/segfuse.hpp"
#include "cfmdet/eval.hpp"
#include "cfmdet/synthetic.hpp"
