#pragma once

#include <functional>
#include <string>

namespace eegdg {

using WarningSink = std::function<void(const std::string&)>;

// Library warnings go to stderr unless a sink is installed. Passing an empty
// function restores the default. Returns the previous sink.
WarningSink set_warning_sink(WarningSink sink);
void warn(const std::string& message);

}  // namespace eegdg
