#pragma once

#include <string_view>

// Text resources compiled in from core/resources/. Editing a resource means
// bumping its version suffix so previously produced artifacts stay traceable.
namespace captree::resources {

inline constexpr std::string_view kAggregationPromptVersion = "aggregation_prompt_v1";
inline constexpr std::string_view kStopwordsVersion = "stopwords_en_v1";

std::string_view aggregation_prompt_template();
std::string_view refine_instruction();
std::string_view english_stopwords();  // one word per line

}  // namespace captree::resources
