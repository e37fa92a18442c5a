#include "truckcast/timeutil.hpp"

#include <cctype>
#include <cstdlib>

namespace truckcast {

namespace {

bool all_digits(const std::string& s, size_t from, size_t to) {
    if (from >= to || to > s.size()) return false;
    for (size_t i = from; i < to; ++i)
        if (!std::isdigit(static_cast<unsigned char>(s[i]))) return false;
    return true;
}

int to_int(const std::string& s, size_t from, size_t to) {
    int v = 0;
    for (size_t i = from; i < to; ++i) v = v * 10 + (s[i] - '0');
    return v;
}

}  // namespace

std::optional<std::int64_t> parse_timestamp(const std::string& raw) {
    std::string s = raw;
    while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.pop_back();
    size_t b = 0;
    while (b < s.size() && s[b] == ' ') ++b;
    s = s.substr(b);
    if (s.empty()) return std::nullopt;

    // Plain integer: epoch seconds (possibly negative).
    {
        size_t i = (s[0] == '-' || s[0] == '+') ? 1 : 0;
        if (i < s.size() && all_digits(s, i, s.size())) {
            errno = 0;
            char* end = nullptr;
            long long v = std::strtoll(s.c_str(), &end, 10);
            if (errno != 0 || end != s.c_str() + s.size()) return std::nullopt;
            return static_cast<std::int64_t>(v);
        }
    }

    // ISO-8601: YYYY-MM-DD[T ]HH:MM:SS[.frac][Z|+HH:MM|+HHMM|+HH]
    if (s.size() < 19) return std::nullopt;
    if (!all_digits(s, 0, 4) || s[4] != '-' || !all_digits(s, 5, 7) || s[7] != '-' ||
        !all_digits(s, 8, 10))
        return std::nullopt;
    if (s[10] != 'T' && s[10] != ' ') return std::nullopt;
    if (!all_digits(s, 11, 13) || s[13] != ':' || !all_digits(s, 14, 16) || s[16] != ':' ||
        !all_digits(s, 17, 19))
        return std::nullopt;

    const int year = to_int(s, 0, 4);
    const int month = to_int(s, 5, 7);
    const int day = to_int(s, 8, 10);
    const int hh = to_int(s, 11, 13);
    const int mm = to_int(s, 14, 16);
    const int ss = to_int(s, 17, 19);
    if (month < 1 || month > 12 || day < 1 || day > 31) return std::nullopt;
    if (hh > 23 || mm > 59 || ss > 60) return std::nullopt;

    size_t p = 19;
    if (p < s.size() && s[p] == '.') {
        ++p;
        while (p < s.size() && std::isdigit(static_cast<unsigned char>(s[p]))) ++p;
    }

    std::int64_t offset = 0;  // seconds east of UTC
    if (p == s.size()) {
        // No zone: treat as UTC.
    } else if (s[p] == 'Z' && p + 1 == s.size()) {
        // UTC
    } else if (s[p] == '+' || s[p] == '-') {
        const int sign = (s[p] == '-') ? -1 : 1;
        ++p;
        if (!all_digits(s, p, p + 2)) return std::nullopt;
        int oh = to_int(s, p, p + 2);
        p += 2;
        int om = 0;
        if (p < s.size() && s[p] == ':') ++p;
        if (p + 2 <= s.size() && all_digits(s, p, p + 2)) {
            om = to_int(s, p, p + 2);
            p += 2;
        }
        if (p != s.size() || oh > 14 || om > 59) return std::nullopt;
        offset = sign * (oh * 3600LL + om * 60LL);
    } else {
        return std::nullopt;
    }

    const std::int64_t days = days_from_civil(year, static_cast<unsigned>(month),
                                              static_cast<unsigned>(day));
    return days * 86400LL + hh * 3600LL + mm * 60LL + ss - offset;
}

}  // namespace truckcast
