#pragma once

#include "json.hpp"
#include "medthink/annotate.hpp"

namespace medthink {

nlohmann::json to_json(const ReviewVerdict& verdict);
nlohmann::json to_json(const Generation& generation);
nlohmann::json to_json(const AnnotationRecord& record);
nlohmann::json to_json(const ConflictReport& conflict);
nlohmann::json to_json(const CleaningReport& report);

// ParseError on missing or mistyped fields.
ReviewVerdict verdict_from_json(const nlohmann::json& j);
Generation generation_from_json(const nlohmann::json& j);
AnnotationRecord record_from_json(const nlohmann::json& j);

}  // namespace medthink
