#include "da2net/log.hpp"

#include <iostream>
#include <mutex>
#include <set>

namespace da2 {
namespace {

std::mutex sink_mutex;

WarningSink& sink() {
    // The default sink prints each distinct message once; a forward pass can repeat the same one per batch.
    static WarningSink s = [seen = std::set<std::string>{}](const std::string& m) mutable {
        if (seen.insert(m).second) std::cerr << "warning: " << m << '\n';
    };
    return s;
}

}  // namespace

WarningSink set_warning_sink(WarningSink s) {
    std::lock_guard lock(sink_mutex);
    auto prev = std::move(sink());
    sink() = std::move(s);
    return prev;
}

void warn(const std::string& message) {
    std::lock_guard lock(sink_mutex);
    if (sink()) sink()(message);
}

}  // namespace da2
