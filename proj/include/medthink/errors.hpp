#pragma once

#include <stdexcept>
#include <string>

namespace medthink {

// Base for every error raised by the library. `kind()` is a stable
// machine-readable tag used by the CLI error line.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define MEDTHINK_DEFINE_ERROR(Name, tag)                                \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& what) : Error(tag, what) {}        \
  };

MEDTHINK_DEFINE_ERROR(DimensionError, "dimension")
MEDTHINK_DEFINE_ERROR(ContractError, "contract")
MEDTHINK_DEFINE_ERROR(OracleInvalidError, "oracle_invalid")
MEDTHINK_DEFINE_ERROR(VocabularyError, "vocabulary")
MEDTHINK_DEFINE_ERROR(LengthError, "length")
MEDTHINK_DEFINE_ERROR(GeometryError, "geometry")
MEDTHINK_DEFINE_ERROR(DegenerateBatchError, "degenerate_batch")
MEDTHINK_DEFINE_ERROR(CheckpointError, "checkpoint")
MEDTHINK_DEFINE_ERROR(DivergenceError, "divergence")
MEDTHINK_DEFINE_ERROR(ParseError, "parse")
MEDTHINK_DEFINE_ERROR(IntegrityError, "integrity")
MEDTHINK_DEFINE_ERROR(DatasetError, "dataset")
MEDTHINK_DEFINE_ERROR(ConflictError, "conflict")
MEDTHINK_DEFINE_ERROR(ExportError, "export")
MEDTHINK_DEFINE_ERROR(TransportError, "transport")
MEDTHINK_DEFINE_ERROR(NotFoundError, "not_found")
MEDTHINK_DEFINE_ERROR(ConfigError, "config")

#undef MEDTHINK_DEFINE_ERROR

}  // namespace medthink
