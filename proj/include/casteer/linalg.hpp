#pragma once

#include <casteer/error.hpp>

#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace casteer::linalg {

/// Inner product accumulated in double, ascending index order.
template <class A, class B>
double dot(std::span<const A> a, std::span<const B> b) {
    if (a.size() != b.size())
        fail(ErrorKind::validation, "dimension mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    double sum = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j)
        sum += static_cast<double>(a[j]) * static_cast<double>(b[j]);
    return sum;
}

template <class A>
double norm(std::span<const A> a) {
    return std::sqrt(dot(a, a));
}

inline std::vector<double> widen(std::span<const float> v) { return {v.begin(), v.end()}; }

inline std::vector<float> narrow(std::span<const double> v) {
    std::vector<float> out(v.size());
    for (std::size_t j = 0; j < v.size(); ++j)
        out[j] = static_cast<float>(v[j]);
    return out;
}

}  // namespace casteer::linalg
