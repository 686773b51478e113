#pragma once

#include "kcqrl/annotator.hpp"
#include "kcqrl/clustering.hpp"
#include "kcqrl/corpus.hpp"
#include "kcqrl/encoder.hpp"
#include "kcqrl/errors.hpp"
#include "kcqrl/eval.hpp"
#include "kcqrl/kt.hpp"
#include "kcqrl/numerics.hpp"
#include "kcqrl/pipeline.hpp"
#include "kcqrl/util.hpp"
