#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace dynakv {

using Vector = std::vector<double>;

inline void check_same_dim(const Vector& a, const Vector& b) {
    if (a.size() != b.size()) {
        throw std::invalid_argument("vector dimension mismatch");
    }
}

inline double sq_distance(const Vector& a, const Vector& b) {
    check_same_dim(a, b);
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

inline double dot(const Vector& a, const Vector& b) {
    check_same_dim(a, b);
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

inline double norm(const Vector& a) { return std::sqrt(dot(a, a)); }

// Exact online first/second moments of a point set: member count, running
// centroid, and scatter (sum of squared distances to the centroid).
// Updates use the multivariate Welford recurrence, so folding points one by
// one matches the two-pass batch computation to floating-point accuracy.
struct ClusterStats {
    std::size_t n = 0;
    Vector centroid;
    double scatter = 0.0;

    double variance() const { return scatter / static_cast<double>(n > 1 ? n : 1); }
};

inline ClusterStats update_stats(const ClusterStats& s, const Vector& x) {
    ClusterStats out = s;
    if (out.n == 0) {
        out.n = 1;
        out.centroid = x;
        out.scatter = 0.0;
        return out;
    }
    check_same_dim(out.centroid, x);
    out.n += 1;
    const double inv_n = 1.0 / static_cast<double>(out.n);
    double cross = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double delta = x[i] - out.centroid[i];
        out.centroid[i] += delta * inv_n;
        cross += delta * (x[i] - out.centroid[i]);
    }
    out.scatter += cross;
    if (out.scatter < 0.0) out.scatter = 0.0;  // round-off clamp
    return out;
}

inline ClusterStats batch_stats(const std::vector<const Vector*>& xs) {
    if (xs.empty()) throw std::invalid_argument("batch_stats: empty point set");
    const std::size_t dim = xs.front()->size();
    ClusterStats s;
    s.n = xs.size();
    s.centroid.assign(dim, 0.0);
    for (const Vector* x : xs) {
        check_same_dim(s.centroid, *x);
        for (std::size_t i = 0; i < dim; ++i) s.centroid[i] += (*x)[i];
    }
    const double inv_n = 1.0 / static_cast<double>(s.n);
    for (double& c : s.centroid) c *= inv_n;
    s.scatter = 0.0;
    for (const Vector* x : xs) s.scatter += sq_distance(*x, s.centroid);
    return s;
}

inline ClusterStats batch_stats(const std::vector<Vector>& xs) {
    std::vector<const Vector*> ptrs;
    ptrs.reserve(xs.size());
    for (const auto& x : xs) ptrs.push_back(&x);
    return batch_stats(ptrs);
}

inline double variance(const ClusterStats& s) { return s.variance(); }

}  // namespace dynakv
