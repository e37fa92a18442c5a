#pragma once

#include <cstdint>
#include <optional>
#include <string>

namespace truckcast {

// Days-from-civil / civil-from-days (proleptic Gregorian), Hinnant's algorithm.
inline std::int64_t days_from_civil(int y, unsigned m, unsigned d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
    std::int64_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

inline std::int64_t floor_mod(std::int64_t a, std::int64_t b) {
    return a - floor_div(a, b) * b;
}

/// Hour of day (0-23) for a UTC epoch-seconds timestamp.
inline int hour_of_day(std::int64_t t) {
    return static_cast<int>(floor_mod(t, 86400) / 3600);
}

/// Day of week with Monday = 0 .. Sunday = 6. 1970-01-01 was a Thursday.
inline int day_of_week(std::int64_t t) {
    return static_cast<int>(floor_mod(floor_div(t, 86400) + 3, 7));
}

/// Parses epoch seconds ("1659484800") or ISO-8601 with zone
/// ("2022-08-03T00:00:00Z", "2022-08-03 08:00:00+08:00").
std::optional<std::int64_t> parse_timestamp(const std::string& s);

}  // namespace truckcast
