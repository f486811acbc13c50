#pragma once

#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

namespace asw {

// Raised when a training loop meets a non-finite value; carries a small JSON
// record of where it happened.
struct TrainingDiverged : std::runtime_error {
    TrainingDiverged(const std::string& what, nlohmann::json diag) : std::runtime_error(what), diagnostic(std::move(diag)) {}
    nlohmann::json diagnostic;
};

}  // namespace asw
