#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace webreplay {

/// Lowercase hex SHA-256 of `data` (64 chars).
std::string sha256_hex(std::string_view data);

std::string base64_encode(std::string_view data);
/// Throws ParseError on malformed input.
std::string base64_decode(std::string_view text);

std::string to_lower(std::string_view s);
std::string_view trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);
bool iequals(std::string_view a, std::string_view b);
bool starts_with_icase(std::string_view s, std::string_view prefix);

/// RFC 3986 normalization: decodes percent-escapes of unreserved characters
/// (ALPHA / DIGIT / "-" / "." / "_" / "~") and uppercases the hex digits of
/// every escape that remains.
std::string normalize_percent_encoding(std::string_view s);

/// Full percent-decoding ("+" left untouched).
std::string percent_decode(std::string_view s);

}  // namespace webreplay
