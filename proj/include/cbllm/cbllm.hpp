#ifndef CBLLM_CBLLM_HPP_
#define CBLLM_CBLLM_HPP_

#include "cbllm/checkpoint.hpp"
#include "cbllm/common.hpp"
#include "cbllm/concept_store.hpp"
#include "cbllm/dataset.hpp"
#include "cbllm/embedding.hpp"
#include "cbllm/interpret.hpp"
#include "cbllm/model.hpp"
#include "cbllm/pipeline.hpp"
#include "cbllm/scoring.hpp"
#include "cbllm/survey.hpp"
#include "cbllm/tokenizer.hpp"
#include "cbllm/toy_data.hpp"
#include "cbllm/training.hpp"

#endif  // CBLLM_CBLLM_HPP_
