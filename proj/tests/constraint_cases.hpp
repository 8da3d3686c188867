#pragma once
// Invalid and valid attention settings, shared by the unit tests and the acceptance binary.

#include <string>
#include <vector>

namespace cases {

struct Invalid {
    const char* label;
    std::vector<std::string> overrides;  // applied on top of the micro architecture
    const char* constraint;              // text the error must contain
};

inline const std::vector<Invalid>& invalid_attention() {
    static const std::vector<Invalid> v = {
        {"even n", {"attention.filters=[3,4,5]"}, "n=2x+1"},
        {"n=11", {"attention.filters=[3,5,11]"}, "n=2x+1, 1≤x≤4"},
        {"n=1", {"attention.filters=[1,3]"}, "n=2x+1, 1≤x≤4"},
        {"even alpha", {"attention.alpha=8"}, "alpha=2y+1"},
        {"alpha with y=8", {"attention.alpha=17"}, "alpha=2y+1, 1≤y≤7"},
        {"alpha=1", {"attention.alpha=1"}, "alpha=2y+1, 1≤y≤7"},
        {"descending filters", {"attention.filters=[7,5,3]"}, "non-decreasing"},
        {"g not dividing C", {"model.widths=[24,48,96]", "attention.g=16"}, "divide"},
        {"g=3", {"attention.g=3"}, "1,2,4,8,16"},
        {"g=32", {"attention.g=32"}, "1,2,4,8,16"},
        {"five layers", {"attention.filters=[3,5,7,9,9]"}, "at most 4"},
        {"no layers", {"attention.filters=[]"}, "at least one layer"},
    };
    return v;
}

// Filter combinations evaluated in the original ablation table.
inline const std::vector<std::string>& table_combinations() {
    static const std::vector<std::string> v = {"[7,7,7]", "[9,9,9]", "[3,5,7]", "[5,7,9]",
                                               "[3,7,9]", "[3,5,9]", "[3,5,7,9]"};
    return v;
}

}  // namespace cases
