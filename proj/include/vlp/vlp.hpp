#pragma once

#include "vlp/attention_flow.hpp"
#include "vlp/data.hpp"
#include "vlp/error.hpp"
#include "vlp/fusion_probe.hpp"
#include "vlp/mask_engine.hpp"
#include "vlp/model.hpp"
#include "vlp/objectives.hpp"
#include "vlp/probe.hpp"
#include "vlp/records.hpp"
#include "vlp/rng.hpp"
#include "vlp/tensor.hpp"
#include "vlp/tensor_io.hpp"
#include "vlp/train.hpp"
