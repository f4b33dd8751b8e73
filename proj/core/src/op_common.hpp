#pragma once

#include <functional>
#include <string>
#include <vector>

#include "docparser/tensor.hpp"

namespace docparser::detail {

// Builds an op output node, wiring parents and the backward closure when
// grad recording is active. Shared by every op translation unit.
Tensor make_op(const char* name, Shape shape, std::vector<double> value,
               const std::vector<Tensor>& inputs,
               std::function<void(Node&)> backward_fn);

void op_check(bool cond, const std::string& msg);

}  // namespace docparser::detail
