#pragma once

#include "vegcast/backbones.hpp"
#include "vegcast/baselines.hpp"
#include "vegcast/conditioning.hpp"
#include "vegcast/evaluation/harness.hpp"
#include "vegcast/evaluation/metrics.hpp"
#include "vegcast/evaluation/shuffle.hpp"
#include "vegcast/evaluation/stats.hpp"
#include "vegcast/forecast.hpp"
#include "vegcast/minicube/dataset.hpp"
#include "vegcast/minicube/io.hpp"
#include "vegcast/minicube/minicube.hpp"
#include "vegcast/minicube/synthetic.hpp"
#include "vegcast/models/batch.hpp"
#include "vegcast/models/checkpoint.hpp"
#include "vegcast/models/models.hpp"
#include "vegcast/training.hpp"
