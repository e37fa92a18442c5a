#pragma once

#include <cmath>

namespace truckcast {

inline constexpr double kEarthRadiusM = 6371000.0;
inline constexpr double kMetersPerDegLat = 111320.0;
inline constexpr double kPi = 3.14159265358979323846;

inline double deg2rad(double d) { return d * kPi / 180.0; }

/// Great-circle distance in meters between two WGS84 points.
inline double haversine(double lat1, double lon1, double lat2, double lon2) {
    const double phi1 = deg2rad(lat1);
    const double phi2 = deg2rad(lat2);
    const double dphi = deg2rad(lat2 - lat1);
    const double dlmb = deg2rad(lon2 - lon1);
    const double sp = std::sin(dphi / 2.0);
    const double sl = std::sin(dlmb / 2.0);
    const double a = sp * sp + std::cos(phi1) * std::cos(phi2) * sl * sl;
    return 2.0 * kEarthRadiusM * std::asin(std::min(1.0, std::sqrt(a)));
}

inline double meters_per_deg_lon(double ref_lat_deg) {
    return kMetersPerDegLat * std::cos(deg2rad(ref_lat_deg));
}

}  // namespace truckcast
