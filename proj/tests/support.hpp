#pragma once

// Shared test helpers; the generators themselves live in the library.

#include "gplvm/selfcheck.hpp"
#include "gplvm/synthetic.hpp"

namespace gplvm::testing {

using synthetic::Instance;
using synthetic::random_block_instance;
using synthetic::random_instance;
using synthetic::random_lower;
using synthetic::random_matrix;
using synthetic::random_one_hot;
using synthetic::random_spd;
using synthetic::uniform;

using selfcheck::compare_finite_differences;
using selfcheck::FdReport;

} // namespace gplvm::testing
