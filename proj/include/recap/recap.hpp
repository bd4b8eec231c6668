#pragma once

#include "recap/align.hpp"
#include "recap/captioner.hpp"
#include "recap/dal.hpp"
#include "recap/embedding.hpp"
#include "recap/error.hpp"
#include "recap/formats.hpp"
#include "recap/metrics.hpp"
#include "recap/run_manifest.hpp"
#include "recap/vecstore.hpp"
