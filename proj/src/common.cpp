#include "hemosbi/common.hpp"

#include <cstdio>

namespace hemosbi {

std::string code_version()
{
    return HEMOSBI_VERSION;
}

std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t seed)
{
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t fnv1a(const std::string& s, std::uint64_t seed)
{
    return fnv1a(s.data(), s.size(), seed);
}

std::string hex64(std::uint64_t h)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace hemosbi
