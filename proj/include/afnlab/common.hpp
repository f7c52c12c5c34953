#pragma once

#include <stdexcept>
#include <string>

namespace afnlab {

enum class Mode { Train, Eval };

// Error taxonomy; the CLI maps these onto distinct exit codes.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised when a forward pass produces a non-finite value; carries the
// layer name and pipeline stage so training aborts with a diagnostic
// instead of crashing.
struct NumericError : std::runtime_error {
    std::string layer;
    std::string stage;
    NumericError(std::string layer_, std::string stage_)
        : std::runtime_error("non-finite value in layer '" + layer_ +
                             "' at stage '" + stage_ + "'"),
          layer(std::move(layer_)),
          stage(std::move(stage_)) {}
};

}  // namespace afnlab
