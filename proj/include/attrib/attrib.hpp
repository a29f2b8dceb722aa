#pragma once

#include "attrib/errors.hpp"
#include "attrib/core.hpp"
#include "attrib/corroborative.hpp"
#include "attrib/serialize.hpp"
#include "attrib/external.hpp"
#include "attrib/tinylm.hpp"
#include "attrib/contributive.hpp"
#include "attrib/relevance.hpp"
#include "attrib/metrics.hpp"
#include "attrib/corpora.hpp"
#include "attrib/pipeline.hpp"
