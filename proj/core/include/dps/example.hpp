#pragma once

#include <string>
#include <vector>

namespace dps {

// One user-conditioned training/evaluation triple (x, u, y*). Texts are byte
// strings; the tokenizer maps each byte to its own token id.
struct Example {
    std::string              user_id;
    std::vector<std::string> profile_texts; // oldest first
    std::string              input_text;
    std::string              target_text;

    bool operator==(const Example &) const = default;
};

} // namespace dps
