#pragma once

#include "iclc/circuit_scan.hpp"
#include "iclc/csv.hpp"
#include "iclc/errors.hpp"
#include "iclc/experiment.hpp"
#include "iclc/intervene.hpp"
#include "iclc/model.hpp"
#include "iclc/probe_decode.hpp"
#include "iclc/prompt.hpp"
#include "iclc/rep_metrics.hpp"
#include "iclc/safetensors.hpp"
#include "iclc/tensor.hpp"
#include "iclc/tokenizer.hpp"
#include "iclc/trace_store.hpp"
