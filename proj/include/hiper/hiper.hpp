#pragma once

#include "hiper/analyze.hpp"
#include "hiper/config.hpp"
#include "hiper/data.hpp"
#include "hiper/errors.hpp"
#include "hiper/gradcheck.hpp"
#include "hiper/image.hpp"
#include "hiper/io.hpp"
#include "hiper/model.hpp"
#include "hiper/pipeline.hpp"
#include "hiper/random.hpp"
#include "hiper/sample.hpp"
#include "hiper/schedule.hpp"
#include "hiper/selfcheck.hpp"
#include "hiper/tensor.hpp"
#include "hiper/text.hpp"
#include "hiper/train.hpp"
