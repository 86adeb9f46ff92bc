#pragma once

#include <stdexcept>
#include <string>

namespace msmg {

// Shape/dimension violations in tensor ops. Message names the offending axis.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration detected at model build / config load time.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Missing or malformed external data (manifests, images, checkpoints).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values or failed numerical checks.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace msmg
