#pragma once

#include <string>
#include <string_view>

namespace poemform::utf8 {

// Strict decoder: rejects overlong forms, surrogates and truncated sequences.
std::u32string decode(std::string_view text);

std::string encode(std::u32string_view text);
std::string encode(char32_t cp);

// Number of code points; throws ValidationError on invalid UTF-8.
std::size_t length(std::string_view text);

}  // namespace poemform::utf8
