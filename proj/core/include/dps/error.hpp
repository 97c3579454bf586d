#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dps {

// Every failure surfaced by the library carries one of these categories so
// the CLI can map it to a distinct exit status.
enum class ErrorKind {
    input,          // empty dataset, empty target, bad argument value
    length,         // sequence exceeds max_seq_len
    config,         // shape / configuration mismatch
    io,             // unreadable or unwritable path
    magic,          // checkpoint magic bytes wrong
    version,        // checkpoint format version unsupported
    truncated,      // checkpoint shorter than its header promises
    shape,          // checkpoint header shape disagrees with config
    divergence,     // non-finite training loss
    schema,         // JSON document does not match the expected schema
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string & message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string & message) {
    throw Error(kind, message);
}

// Library warnings (e.g. a top-K selection dipping into non-positive scores)
// go through a process-wide sink. The default writes to stderr.
using WarningSink = void (*)(std::string_view message);

void set_warning_sink(WarningSink sink);
void warn(std::string_view message);

} // namespace dps
