// Small fixed-size linear algebra used throughout the library. Everything is
// templated on the scalar type so the same expressions can be evaluated with
// plain floats/doubles or recorded onto an autodiff tape.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>

namespace mgnerf {

template <class T> constexpr T sqr(T x) { return x * x; }

// value_of() lets templated numeric code branch on the current value of a
// scalar regardless of whether it is plain or tape-recorded.
inline double value_of(double x) { return x; }
inline double value_of(float x) { return double(x); }

template <class T>
struct Vec3 {
    T x{}, y{}, z{};

    Vec3() = default;
    Vec3(T x_, T y_, T z_) : x(x_), y(y_), z(z_) {}

    T& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
    const T& operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator-() const { return {-x, -y, -z}; }
    Vec3 operator*(const T& s) const { return {x * s, y * s, z * s}; }
    Vec3 operator/(const T& s) const { return {x / s, y / s, z / s}; }
    Vec3& operator+=(const Vec3& o) { x = x + o.x; y = y + o.y; z = z + o.z; return *this; }
    Vec3& operator-=(const Vec3& o) { x = x - o.x; y = y - o.y; z = z - o.z; return *this; }
    Vec3& operator*=(const T& s) { x = x * s; y = y * s; z = z * s; return *this; }
};

template <class T> Vec3<T> operator*(const T& s, const Vec3<T>& v) { return v * s; }

template <class T> T dot(const Vec3<T>& a, const Vec3<T>& b) {
    return a.x * b.x + a.y * b.y + a.z * b.z;
}

template <class T> Vec3<T> cross(const Vec3<T>& a, const Vec3<T>& b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

template <class T> T norm2(const Vec3<T>& v) { return dot(v, v); }

template <class T> T norm(const Vec3<T>& v) {
    using std::sqrt;
    return sqrt(norm2(v));
}

template <class T> Vec3<T> normalized(const Vec3<T>& v) { return v / norm(v); }

using Vec3d = Vec3<double>;
using Vec3f = Vec3<float>;

inline Vec3d cwise_min(const Vec3d& a, const Vec3d& b) {
    return {std::min(a.x, b.x), std::min(a.y, b.y), std::min(a.z, b.z)};
}
inline Vec3d cwise_max(const Vec3d& a, const Vec3d& b) {
    return {std::max(a.x, b.x), std::max(a.y, b.y), std::max(a.z, b.z)};
}

// Row-major 3x3 matrix.
template <class T>
struct Mat3 {
    std::array<T, 9> m{};

    static Mat3 identity() {
        Mat3 r;
        r.m = {T(1), T(0), T(0), T(0), T(1), T(0), T(0), T(0), T(1)};
        return r;
    }
    static Mat3 zero() { return Mat3{}; }

    T& operator()(int r, int c) { return m[3 * r + c]; }
    const T& operator()(int r, int c) const { return m[3 * r + c]; }

    Mat3 operator+(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 9; ++i) r.m[i] = m[i] + o.m[i];
        return r;
    }
    Mat3 operator-(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 9; ++i) r.m[i] = m[i] - o.m[i];
        return r;
    }
    Mat3 operator*(const T& s) const {
        Mat3 r;
        for (int i = 0; i < 9; ++i) r.m[i] = m[i] * s;
        return r;
    }
    Vec3<T> operator*(const Vec3<T>& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
                m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }
    Mat3 operator*(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                r(i, j) = (*this)(i, 0) * o(0, j) + (*this)(i, 1) * o(1, j) + (*this)(i, 2) * o(2, j);
        return r;
    }

    Mat3 transposed() const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
        return r;
    }

    T det() const {
        return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
               m[2] * (m[3] * m[7] - m[4] * m[6]);
    }

    // Adjugate-based inverse; the caller is responsible for checking
    // conditioning before trusting the result.
    Mat3 inverse() const {
        const auto& a = m;
        Mat3 adj;
        adj.m = {a[4] * a[8] - a[5] * a[7], a[2] * a[7] - a[1] * a[8], a[1] * a[5] - a[2] * a[4],
                 a[5] * a[6] - a[3] * a[8], a[0] * a[8] - a[2] * a[6], a[2] * a[3] - a[0] * a[5],
                 a[3] * a[7] - a[4] * a[6], a[1] * a[6] - a[0] * a[7], a[0] * a[4] - a[1] * a[3]};
        T d = det();
        Mat3 r;
        for (int i = 0; i < 9; ++i) r.m[i] = adj.m[i] / d;
        return r;
    }

    T frobenius2() const {
        T s = m[0] * m[0];
        for (int i = 1; i < 9; ++i) s = s + m[i] * m[i];
        return s;
    }

    Vec3<T> col(int c) const { return {m[c], m[3 + c], m[6 + c]}; }
    void set_col(int c, const Vec3<T>& v) { m[c] = v.x; m[3 + c] = v.y; m[6 + c] = v.z; }
};

using Mat3d = Mat3<double>;

// Rodrigues' formula. Uses series expansions of sin(t)/t and (1-cos t)/t^2 for
// tiny angles so the expression stays smooth (and differentiable) through the
// rest pose, where the axis-angle vector is exactly zero.
template <class T>
Mat3<T> rotation_from_axis_angle(const Vec3<T>& aa) {
    using std::cos;
    using std::sin;
    using std::sqrt;
    T t2 = norm2(aa);
    T a, b;  // a = sin(t)/t, b = (1 - cos t)/t^2
    if (value_of(t2) < 1e-12) {
        a = T(1.0) - t2 * (1.0 / 6.0);
        b = T(0.5) - t2 * (1.0 / 24.0);
    } else {
        T t = sqrt(t2);
        a = sin(t) / t;
        b = (T(1.0) - cos(t)) / t2;
    }
    Mat3<T> k = Mat3<T>::zero();
    k(0, 1) = -aa.z; k(0, 2) = aa.y;
    k(1, 0) = aa.z;  k(1, 2) = -aa.x;
    k(2, 0) = -aa.y; k(2, 1) = aa.x;
    Mat3<T> r = Mat3<T>::identity() + k * a + (k * k) * b;
    return r;
}

// Log map of a rotation matrix, via the quaternion. Plain-scalar only; used
// for composing global rigid motions into pose parameters and for angular
// error metrics, never on the tape.
inline Vec3d axis_angle_from_rotation(const Mat3d& r) {
    double trace = r(0, 0) + r(1, 1) + r(2, 2);
    double qw, qx, qy, qz;
    if (trace > 0.0) {
        double s = std::sqrt(trace + 1.0) * 2.0;
        qw = 0.25 * s;
        qx = (r(2, 1) - r(1, 2)) / s;
        qy = (r(0, 2) - r(2, 0)) / s;
        qz = (r(1, 0) - r(0, 1)) / s;
    } else if (r(0, 0) > r(1, 1) && r(0, 0) > r(2, 2)) {
        double s = std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2)) * 2.0;
        qw = (r(2, 1) - r(1, 2)) / s;
        qx = 0.25 * s;
        qy = (r(0, 1) + r(1, 0)) / s;
        qz = (r(0, 2) + r(2, 0)) / s;
    } else if (r(1, 1) > r(2, 2)) {
        double s = std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2)) * 2.0;
        qw = (r(0, 2) - r(2, 0)) / s;
        qx = (r(0, 1) + r(1, 0)) / s;
        qy = 0.25 * s;
        qz = (r(1, 2) + r(2, 1)) / s;
    } else {
        double s = std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1)) * 2.0;
        qw = (r(1, 0) - r(0, 1)) / s;
        qx = (r(0, 2) + r(2, 0)) / s;
        qy = (r(1, 2) + r(2, 1)) / s;
        qz = 0.25 * s;
    }
    if (qw < 0) { qw = -qw; qx = -qx; qy = -qy; qz = -qz; }
    double sin_half = std::sqrt(qx * qx + qy * qy + qz * qz);
    if (sin_half < 1e-12) return {0, 0, 0};
    double angle = 2.0 * std::atan2(sin_half, qw);
    return Vec3d{qx, qy, qz} * (angle / sin_half);
}

// Angle of the relative rotation between two rotation matrices, in radians.
inline double rotation_angle_between(const Mat3d& a, const Mat3d& b) {
    Mat3d rel = a * b.transposed();
    double c = (rel(0, 0) + rel(1, 1) + rel(2, 2) - 1.0) * 0.5;
    return std::acos(std::clamp(c, -1.0, 1.0));
}

// Polar rotation factor via the Higham iteration X <- (X + X^-T)/2. This is
// the canonical re-orthonormalization: it returns the rotation closest to A
// in the Frobenius sense, and it commutes exactly with composing A by a
// rotation on either side, which keeps the inverse-rotated embedding rigid
// invariant. Requires det(A) > 0 (blends of nearby rotations qualify).
template <class T>
Mat3<T> polar_rotation(const Mat3<T>& a, int iterations = 8) {
    Mat3<T> x = a;
    for (int it = 0; it < iterations; ++it) {
        Mat3<T> inv_t = x.inverse().transposed();
        for (int i = 0; i < 9; ++i) x.m[i] = (x.m[i] + inv_t.m[i]) * T(0.5);
    }
    return x;
}

// Gram-Schmidt on the first two columns, third column from the cross product
// so the result is a proper rotation (det +1).
template <class T>
Mat3<T> orthonormalized_rotation(const Mat3<T>& a) {
    Vec3<T> c0 = normalized(a.col(0));
    Vec3<T> c1 = a.col(1) - c0 * dot(c0, a.col(1));
    c1 = normalized(c1);
    Vec3<T> c2 = cross(c0, c1);
    Mat3<T> r;
    r.set_col(0, c0);
    r.set_col(1, c1);
    r.set_col(2, c2);
    return r;
}

// Affine transform x -> A*x + t. This is the compact form of a 4x4 matrix
// with implicit last row (0,0,0,1); blends of transforms whose weights sum to
// one preserve that row exactly.
template <class T>
struct Affine3 {
    Mat3<T> A;
    Vec3<T> t;

    static Affine3 identity() { return {Mat3<T>::identity(), {T(0), T(0), T(0)}}; }
    static Affine3 translation(const Vec3<T>& t) { return {Mat3<T>::identity(), t}; }

    Vec3<T> apply(const Vec3<T>& p) const { return A * p + t; }
    // Lift a plain-scalar point through a (possibly tape-valued) transform.
    template <class U>
    Vec3<T> apply_point(const Vec3<U>& p) const {
        return {A.m[0] * T(p.x) + A.m[1] * T(p.y) + A.m[2] * T(p.z) + t.x,
                A.m[3] * T(p.x) + A.m[4] * T(p.y) + A.m[5] * T(p.z) + t.y,
                A.m[6] * T(p.x) + A.m[7] * T(p.y) + A.m[8] * T(p.z) + t.z};
    }

    // this ∘ o : applies o first.
    Affine3 compose(const Affine3& o) const { return {A * o.A, A * o.t + t}; }

    Affine3 inverse() const {
        Mat3<T> ai = A.inverse();
        return {ai, -(ai * t)};
    }

    Affine3 operator+(const Affine3& o) const { return {A + o.A, t + o.t}; }
    Affine3 operator*(const T& s) const { return {A * s, t * s}; }
};

using Affine3d = Affine3<double>;

// ---------------------------------------------------------------------------
// Triangle geometry (plain double; used by spatial queries and the
// ground-truth rasterizer).

struct TriangleClosest {
    Vec3d point;
    Vec3d bary;  // barycentric coordinates w.r.t. (a, b, c)
};

// Closest point on triangle abc to p (Ericson, Real-Time Collision Detection).
inline TriangleClosest closest_point_on_triangle(const Vec3d& p, const Vec3d& a, const Vec3d& b,
                                                 const Vec3d& c) {
    Vec3d ab = b - a, ac = c - a, ap = p - a;
    double d1 = dot(ab, ap), d2 = dot(ac, ap);
    if (d1 <= 0.0 && d2 <= 0.0) return {a, {1, 0, 0}};

    Vec3d bp = p - b;
    double d3 = dot(ab, bp), d4 = dot(ac, bp);
    if (d3 >= 0.0 && d4 <= d3) return {b, {0, 1, 0}};

    double vc = d1 * d4 - d3 * d2;
    if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
        double v = d1 / (d1 - d3);
        return {a + ab * v, {1.0 - v, v, 0.0}};
    }

    Vec3d cp = p - c;
    double d5 = dot(ab, cp), d6 = dot(ac, cp);
    if (d6 >= 0.0 && d5 <= d6) return {c, {0, 0, 1}};

    double vb = d5 * d2 - d1 * d6;
    if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
        double w = d2 / (d2 - d6);
        return {a + ac * w, {1.0 - w, 0.0, w}};
    }

    double va = d3 * d6 - d5 * d4;
    if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
        double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return {b + (c - b) * w, {0.0, 1.0 - w, w}};
    }

    double denom = 1.0 / (va + vb + vc);
    double v = vb * denom, w = vc * denom;
    return {a + ab * v + ac * w, {1.0 - v - w, v, w}};
}

// Moller-Trumbore. Returns the ray parameter t of the intersection with
// triangle abc, or nothing. Only strictly positive t counts as a hit.
inline std::optional<double> ray_triangle(const Vec3d& origin, const Vec3d& dir, const Vec3d& a,
                                          const Vec3d& b, const Vec3d& c, double* u_out = nullptr,
                                          double* v_out = nullptr) {
    constexpr double kEps = 1e-12;
    Vec3d e1 = b - a, e2 = c - a;
    Vec3d pvec = cross(dir, e2);
    double det = dot(e1, pvec);
    if (std::abs(det) < kEps) return std::nullopt;
    double inv_det = 1.0 / det;
    Vec3d tvec = origin - a;
    double u = dot(tvec, pvec) * inv_det;
    if (u < 0.0 || u > 1.0) return std::nullopt;
    Vec3d qvec = cross(tvec, e1);
    double v = dot(dir, qvec) * inv_det;
    if (v < 0.0 || u + v > 1.0) return std::nullopt;
    double t = dot(e2, qvec) * inv_det;
    if (t <= 0.0) return std::nullopt;
    if (u_out) *u_out = u;
    if (v_out) *v_out = v;
    return t;
}

// The same intersection parameter expressed in a scalar type S, for a
// triangle whose vertices are S-valued. The caller has already established
// that the triangle is hit; this recomputes t so that its dependence on the
// vertex positions is visible to the autodiff tape.
template <class S>
S ray_triangle_t(const Vec3d& origin, const Vec3d& dir, const Vec3<S>& a, const Vec3<S>& b,
                 const Vec3<S>& c) {
    Vec3<S> e1 = b - a, e2 = c - a;
    Vec3<S> o{S(origin.x), S(origin.y), S(origin.z)};
    Vec3<S> d{S(dir.x), S(dir.y), S(dir.z)};
    Vec3<S> pvec = cross(d, e2);
    S det = dot(e1, pvec);
    Vec3<S> tvec = o - a;
    Vec3<S> qvec = cross(tvec, e1);
    return dot(e2, qvec) / det;
}

}  // namespace mgnerf
