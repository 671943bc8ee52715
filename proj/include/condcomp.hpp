// Copyright 2026 The condcomp Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef CONDCOMP_CONDCOMP_HPP_
#define CONDCOMP_CONDCOMP_HPP_

#include "condcomp/accounting.hpp"
#include "condcomp/context.hpp"
#include "condcomp/cost_trace.hpp"
#include "condcomp/data.hpp"
#include "condcomp/early_exit.hpp"
#include "condcomp/gradcheck.hpp"
#include "condcomp/gumbel.hpp"
#include "condcomp/harness.hpp"
#include "condcomp/metrics.hpp"
#include "condcomp/moe.hpp"
#include "condcomp/nn.hpp"
#include "condcomp/ops.hpp"
#include "condcomp/optim.hpp"
#include "condcomp/rng.hpp"
#include "condcomp/routing.hpp"
#include "condcomp/sampler_check.hpp"
#include "condcomp/spec_json.hpp"
#include "condcomp/tensor.hpp"
#include "condcomp/token_selection.hpp"
#include "condcomp/transformer.hpp"

#endif  // CONDCOMP_CONDCOMP_HPP_
