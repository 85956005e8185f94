#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace recipemind {

std::string sha256_hex(std::string_view bytes);
std::string file_sha256_hex(const std::filesystem::path& path);

}  // namespace recipemind
