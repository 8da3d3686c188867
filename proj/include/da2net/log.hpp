#pragma once

#include <functional>
#include <string>

namespace da2 {

using WarningSink = std::function<void(const std::string&)>;

/// Replaces the warning sink (default: stderr). Returns the previous one.
WarningSink set_warning_sink(WarningSink sink);

void warn(const std::string& message);

}  // namespace da2
