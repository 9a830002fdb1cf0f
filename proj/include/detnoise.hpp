/*
 * Copyright 2026 The detnoise Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include "detnoise/errors.hpp"
#include "detnoise/rng.hpp"
#include "detnoise/tensor.hpp"
#include "detnoise/numerics.hpp"
#include "detnoise/digest.hpp"
#include "detnoise/model.hpp"
#include "detnoise/variants.hpp"
#include "detnoise/training.hpp"
#include "detnoise/io.hpp"
#include "detnoise/metrics.hpp"
#include "detnoise/experiment.hpp"
#include "detnoise/profiler.hpp"
