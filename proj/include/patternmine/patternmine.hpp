#pragma once

#include "patternmine/benchmark.hpp"
#include "patternmine/box.hpp"
#include "patternmine/builtin_features.hpp"
#include "patternmine/config.hpp"
#include "patternmine/discovery.hpp"
#include "patternmine/error.hpp"
#include "patternmine/eval.hpp"
#include "patternmine/feature_store.hpp"
#include "patternmine/geometry.hpp"
#include "patternmine/log.hpp"
#include "patternmine/matcher.hpp"
#include "patternmine/miner.hpp"
#include "patternmine/parallel.hpp"
#include "patternmine/report.hpp"
#include "patternmine/synthetic.hpp"
#include "patternmine/trainer.hpp"
