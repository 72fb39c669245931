#include "cellmtl/rng.hpp"

#include <cmath>

namespace cellmtl {
namespace {

std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

} // namespace

std::uint64_t Rng::below(std::uint64_t n)
{
    if (n <= 1)
        return 0;
    const std::uint64_t limit = ~std::uint64_t(0) - (~std::uint64_t(0) % n);
    std::uint64_t r;
    do {
        r = engine_();
    } while (r >= limit);
    return r % n;
}

double Rng::normal()
{
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300)
        u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view key)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : key) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return splitmix64(splitmix64(base) ^ h);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t key)
{
    return splitmix64(splitmix64(base) ^ splitmix64(key + 0x632be59bd9b4e019ULL));
}

} // namespace cellmtl
