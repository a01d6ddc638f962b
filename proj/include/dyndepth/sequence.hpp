#pragma once

#include <vector>

namespace dyndepth {

using TokenSequence = std::vector<int>;

}  // namespace dyndepth
