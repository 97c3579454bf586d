#include "dps/error.hpp"

#include <atomic>
#include <iostream>

namespace dps {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::input:      return "input";
        case ErrorKind::length:     return "length";
        case ErrorKind::config:     return "config";
        case ErrorKind::io:         return "io";
        case ErrorKind::magic:      return "magic";
        case ErrorKind::version:    return "version";
        case ErrorKind::truncated:  return "truncated";
        case ErrorKind::shape:      return "shape";
        case ErrorKind::divergence: return "divergence";
        case ErrorKind::schema:     return "schema";
    }
    return "unknown";
}

namespace {

void stderr_sink(std::string_view message) {
    std::cerr << "warning: " << message << "\n";
}

std::atomic<WarningSink> g_sink{&stderr_sink};

} // namespace

void set_warning_sink(WarningSink sink) {
    g_sink.store(sink ? sink : &stderr_sink);
}

void warn(std::string_view message) {
    g_sink.load()(message);
}

} // namespace dps
