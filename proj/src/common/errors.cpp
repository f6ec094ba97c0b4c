// SPDX-License-Identifier: Apache-2.0
#include "obidiff/common/errors.hpp"

namespace obidiff {
namespace {
std::string join_ids(const std::vector<std::string>& ids) {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) out += (i ? "," : "") + ids[i];
    return out;
}
}  // namespace

IncompleteSessionError::IncompleteSessionError(std::vector<std::string> unanswered)
    : std::runtime_error("incomplete session; unanswered items: " + join_ids(unanswered)),
      unanswered_(std::move(unanswered)) {}

}  // namespace obidiff
