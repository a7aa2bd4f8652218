#pragma once

#include <boost/rational.hpp>

#include <charconv>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <system_error>

#include "tdma_fl/errors.hpp"

namespace tdma_fl {

using Rational = boost::rational<std::int64_t>;

inline std::int64_t floor_of(const Rational& x)
{
    std::int64_t q = x.numerator() / x.denominator();
    if (x.numerator() % x.denominator() != 0 && x.numerator() < 0)
        --q;
    return q;
}

inline std::int64_t ceil_of(const Rational& x)
{
    std::int64_t q = x.numerator() / x.denominator();
    if (x.numerator() % x.denominator() != 0 && x.numerator() > 0)
        ++q;
    return q;
}

inline double to_double(const Rational& x)
{
    return static_cast<double>(x.numerator()) / static_cast<double>(x.denominator());
}

/// Parses "7", "6.4", "-0.25" or "32/5" exactly.
inline Rational parse_rational(std::string_view text)
{
    auto fail = [&] { return ConfigError("not a rational number: '" + std::string(text) + "'"); };
    if (text.empty())
        throw fail();

    if (auto slash = text.find('/'); slash != std::string_view::npos) {
        std::int64_t num = 0, den = 0;
        auto a = std::from_chars(text.data(), text.data() + slash, num);
        auto b = std::from_chars(text.data() + slash + 1, text.data() + text.size(), den);
        if (a.ec != std::errc{} || a.ptr != text.data() + slash || b.ec != std::errc{} ||
            b.ptr != text.data() + text.size() || den == 0)
            throw fail();
        return Rational(num, den);
    }

    bool negative = false;
    std::size_t pos = 0;
    if (text[0] == '-' || text[0] == '+') {
        negative = text[0] == '-';
        pos = 1;
    }
    std::int64_t num = 0;
    std::int64_t den = 1;
    bool seen_point = false;
    bool seen_digit = false;
    for (; pos < text.size(); ++pos) {
        char c = text[pos];
        if (c == '.' && !seen_point) {
            seen_point = true;
            continue;
        }
        if (c < '0' || c > '9')
            throw fail();
        if (num > (INT64_MAX - 9) / 10 || (seen_point && den > INT64_MAX / 10))
            throw fail();
        num = num * 10 + (c - '0');
        if (seen_point)
            den *= 10;
        seen_digit = true;
    }
    if (!seen_digit)
        throw fail();
    return Rational(negative ? -num : num, den);
}

/// Exact rational for the shortest decimal that round-trips `x` (6.4 -> 32/5).
inline Rational rational_from_double(double x)
{
    if (!std::isfinite(x))
        throw ConfigError("non-finite value where a rational was expected");
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), x, std::chars_format::fixed);
    if (res.ec != std::errc{})
        throw ConfigError("value out of range for an exact rational");
    return parse_rational(std::string_view(buf, static_cast<std::size_t>(res.ptr - buf)));
}

inline std::string to_string(const Rational& x)
{
    if (x.denominator() == 1)
        return std::to_string(x.numerator());
    return std::to_string(x.numerator()) + "/" + std::to_string(x.denominator());
}

} // namespace tdma_fl
