#pragma once

#include "steerlab/activations.hpp"
#include "steerlab/backend.hpp"
#include "steerlab/corpus.hpp"
#include "steerlab/cwe.hpp"
#include "steerlab/error.hpp"
#include "steerlab/factory.hpp"
#include "steerlab/generation.hpp"
#include "steerlab/harness.hpp"
#include "steerlab/json_io.hpp"
#include "steerlab/lens.hpp"
#include "steerlab/patching.hpp"
#include "steerlab/probes.hpp"
#include "steerlab/report.hpp"
#include "steerlab/runtime.hpp"
#include "steerlab/scoring.hpp"
#include "steerlab/serve.hpp"
#include "steerlab/stats.hpp"
#include "steerlab/toy_backend.hpp"
#include "steerlab/vectors.hpp"
