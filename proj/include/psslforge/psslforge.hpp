// Copyright 2026 The psslforge Authors. All Rights Reserved.
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
//
// Umbrella header pulling in the whole library.

#pragma once

#include "psslforge/build.hpp"
#include "psslforge/common.hpp"
#include "psslforge/ensemble.hpp"
#include "psslforge/eval.hpp"
#include "psslforge/image.hpp"
#include "psslforge/net.hpp"
#include "psslforge/pssl.hpp"
#include "psslforge/saliency.hpp"
#include "psslforge/synth.hpp"
#include "psslforge/train.hpp"
#include "psslforge/version.hpp"
#include "psslforge/viz.hpp"
