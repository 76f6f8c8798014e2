#pragma once

#include "ctrlkit/checkpoint_io.hpp"
#include "ctrlkit/corpus.hpp"
#include "ctrlkit/eval.hpp"
#include "ctrlkit/language_model.hpp"
#include "ctrlkit/model.hpp"
#include "ctrlkit/ngram_index.hpp"
#include "ctrlkit/parallel.hpp"
#include "ctrlkit/sampler.hpp"
#include "ctrlkit/task.hpp"
#include "ctrlkit/tensor.hpp"
#include "ctrlkit/text.hpp"
#include "ctrlkit/tokenizer.hpp"
#include "ctrlkit/trainer.hpp"
