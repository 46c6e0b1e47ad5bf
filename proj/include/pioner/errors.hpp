#pragma once

#include <stdexcept>
#include <string>

namespace pioner {

// Root of every error the library throws. `kind()` is a stable identifier
// used by the CLI and service to map failures onto exit codes / HTTP status.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define PIONER_DEFINE_ERROR(Name)                                          \
    class Name : public Error {                                            \
    public:                                                                \
        explicit Name(const std::string& what) : Error(#Name, what) {}     \
    };

PIONER_DEFINE_ERROR(SchemaError)
PIONER_DEFINE_ERROR(ValidationError)
PIONER_DEFINE_ERROR(ConfigError)
PIONER_DEFINE_ERROR(BackboneError)
PIONER_DEFINE_ERROR(CapabilityError)
PIONER_DEFINE_ERROR(IOError)
PIONER_DEFINE_ERROR(FormatError)
PIONER_DEFINE_ERROR(EmptySelectionError)
PIONER_DEFINE_ERROR(ModeError)
PIONER_DEFINE_ERROR(DegenerateWeightError)
PIONER_DEFINE_ERROR(ZeroVectorError)
PIONER_DEFINE_ERROR(TrainError)
PIONER_DEFINE_ERROR(DecodeError)
PIONER_DEFINE_ERROR(PluginError)
PIONER_DEFINE_ERROR(DatasetError)
PIONER_DEFINE_ERROR(LLMError)

#undef PIONER_DEFINE_ERROR

} // namespace pioner
