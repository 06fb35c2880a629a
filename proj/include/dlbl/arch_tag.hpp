#pragma once

#include <string>
#include <string_view>

namespace dlbl {

// PC: patch classification, SPL: sub-patch labelling, FPL: full patch
// labelling by learned upsampling.
enum class ArchTag { PC, SPL, FPL };

std::string to_string(ArchTag tag);
// Accepts "PC"/"SPL"/"FPL" in any case; throws ConfigError otherwise.
ArchTag parse_arch_tag(std::string_view s);

}  // namespace dlbl
