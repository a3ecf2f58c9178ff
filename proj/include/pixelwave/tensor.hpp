#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "pixelwave/common.hpp"
#include "pixelwave/rng.hpp"

namespace pixelwave {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) {
        if (e <= 0) throw dimension_error("non-positive extent in shape");
        n *= e;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major tensor. The value type is float for training and double
// for verification oracles; both instantiations share every kernel.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), T(0)) {}
    Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != shape_numel(shape))
            throw dimension_error("buffer length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t rank() const { return static_cast<int64_t>(shape.size()); }
    int64_t extent(int64_t axis) const { return shape[static_cast<size_t>(axis)]; }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    // 2-D convenience accessors (heavily used by the loss/retrieval code).
    T& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
    const T& at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }
    void zero() { fill(T(0)); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    Tensor<T> reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            throw dimension_error("reshape " + shape_str(shape) + " -> " + shape_str(s) + " changes element count");
        return Tensor<T>(std::move(s), data);
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape);
        for (int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(data[static_cast<size_t>(i)]);
        return out;
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

    static Tensor full(Shape s, T v) {
        Tensor t(std::move(s));
        t.fill(v);
        return t;
    }

    static Tensor randn(Shape s, Rng& rng, double stddev = 1.0, double mean = 0.0) {
        Tensor t(std::move(s));
        rng.fill_normal(t.data, mean, stddev);
        return t;
    }

    static Tensor uniform(Shape s, Rng& rng, double lo, double hi) {
        Tensor t(std::move(s));
        rng.fill_uniform(t.data, lo, hi);
        return t;
    }

    static Tensor from(Shape s, std::initializer_list<T> vals) {
        return Tensor(std::move(s), std::vector<T>(vals));
    }
};

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (!a.same_shape(b))
        throw dimension_error(std::string(what) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                              shape_str(b.shape));
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "max_abs_diff");
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

template <typename T>
double max_abs(const Tensor<T>& a) {
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i])));
    return m;
}

// -------- little-endian binary helpers (shared by all file formats) --------

namespace io {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::istream& is, void* p, size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!is) throw state_error("unexpected end of stream");
}

template <typename V>
void write_pod(std::ostream& os, V v) {
    static_assert(std::is_trivially_copyable_v<V>);
    write_bytes(os, &v, sizeof(V));
}

template <typename V>
V read_pod(std::istream& is) {
    V v{};
    read_bytes(is, &v, sizeof(V));
    return v;
}

inline void write_magic(std::ostream& os, const char m[4]) { write_bytes(os, m, 4); }

inline void expect_magic(std::istream& is, const char m[4], const char* what) {
    char buf[4];
    read_bytes(is, buf, 4);
    if (std::memcmp(buf, m, 4) != 0) throw state_error(std::string("bad magic for ") + what);
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_pod<uint32_t>(os, static_cast<uint32_t>(s.size()));
    write_bytes(os, s.data(), s.size());
}

inline std::string read_string(std::istream& is) {
    uint32_t n = read_pod<uint32_t>(is);
    std::string s(n, '\0');
    if (n) read_bytes(is, s.data(), n);
    return s;
}

}  // namespace io

// DTEN tensor container: magic "DTEN", dtype code (0 = f32, 1 = f64),
// rank, extents, then the raw row-major payload. Little-endian throughout.
template <typename T>
void save_tensor(std::ostream& os, const Tensor<T>& t) {
    io::write_magic(os, "DTEN");
    io::write_pod<uint8_t>(os, std::is_same_v<T, double> ? 1 : 0);
    io::write_pod<uint32_t>(os, static_cast<uint32_t>(t.shape.size()));
    for (int64_t e : t.shape) io::write_pod<uint64_t>(os, static_cast<uint64_t>(e));
    io::write_bytes(os, t.data.data(), t.data.size() * sizeof(T));
}

template <typename T>
Tensor<T> load_tensor(std::istream& is) {
    io::expect_magic(is, "DTEN", "tensor");
    uint8_t dtype = io::read_pod<uint8_t>(is);
    uint8_t want = std::is_same_v<T, double> ? 1 : 0;
    if (dtype != want) throw state_error("tensor dtype code " + std::to_string(dtype) + " does not match target");
    uint32_t rank = io::read_pod<uint32_t>(is);
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<int64_t>(io::read_pod<uint64_t>(is));
    Tensor<T> t(shape);
    io::read_bytes(is, t.data.data(), t.data.size() * sizeof(T));
    return t;
}

template <typename T>
void save_tensor_file(const std::string& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw state_error("cannot open for writing: " + path);
    save_tensor(os, t);
}

template <typename T>
Tensor<T> load_tensor_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw state_error("cannot open for reading: " + path);
    return load_tensor<T>(is);
}

}  // namespace pixelwave
