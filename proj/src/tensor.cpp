#include "pqnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <limits>
#include <numeric>
#include <sstream>

namespace pqnet {

const char* to_string(ParseErrorKind kind) {
    switch (kind) {
        case ParseErrorKind::BadMagic: return "bad magic";
        case ParseErrorKind::VersionMismatch: return "version mismatch";
        case ParseErrorKind::Truncated: return "truncated";
        case ParseErrorKind::IndexOutOfRange: return "index out of range";
        case ParseErrorKind::Malformed: return "malformed";
    }
    return "unknown";
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
        throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str(shape_));
    }
}

template <typename T>
BasicTensor<T> BasicTensor<T>::matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t n = rows.size();
    const std::size_t p = n ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(n * p);
    for (const auto& r : rows) {
        if (r.size() != p) throw ShapeError("ragged matrix literal");
        data.insert(data.end(), r.begin(), r.end());
    }
    return BasicTensor({n, p}, std::move(data));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::vector(std::initializer_list<T> values) {
    return BasicTensor({values.size()}, std::vector<T>(values));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::identity(std::size_t n) {
    BasicTensor out({n, n});
    for (std::size_t i = 0; i < n; ++i) out(i, i) = T(1);
    return out;
}

template <typename T>
std::size_t BasicTensor<T>::rows() const {
    if (rank() != 2) throw ShapeError("expected rank-2 tensor, got " + shape_str(shape_));
    return shape_[0];
}

template <typename T>
std::size_t BasicTensor<T>::cols() const {
    if (rank() != 2) throw ShapeError("expected rank-2 tensor, got " + shape_str(shape_));
    return shape_[1];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return BasicTensor(std::move(shape), data_);
}

template class BasicTensor<float>;
template class BasicTensor<double>;

double Rng::uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::size_t Rng::uniform_index(std::size_t n) {
    if (n == 0) throw ArgumentError("uniform_index: empty range");
    // Rejection sampling keeps the draw exactly uniform.
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return static_cast<std::size_t>(x % bound);
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

Rng Rng::fork() {
    return Rng(engine_() ^ 0x9e3779b97f4a7c15ULL);
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    const std::size_t n = a.rows(), p = a.cols(), q = b.cols();
    if (b.rows() != p) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    BasicTensor<T> c({n, q});
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* pc = c.data().data();
    // i-k-j order: every c[i][j] accumulates its k terms in increasing k.
    for (std::size_t i = 0; i < n; ++i) {
        T* crow = pc + i * q;
        for (std::size_t k = 0; k < p; ++k) {
            const T aik = pa[i * p + k];
            const T* brow = pb + k * q;
            for (std::size_t j = 0; j < q; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
    const std::size_t n = a.rows(), p = a.cols();
    BasicTensor<T> t({p, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < p; ++j) t(j, i) = a(i, j);
    return t;
}

template <typename T>
BasicTensor<T> gram(const BasicTensor<T>& a) {
    const std::size_t n = a.rows(), d = a.cols();
    BasicTensor<T> g({d, d});
    for (std::size_t r = 0; r < n; ++r) {
        const auto row = a.row(r);
        for (std::size_t i = 0; i < d; ++i) {
            const T ri = row[i];
            for (std::size_t j = i; j < d; ++j) g(i, j) += ri * row[j];
        }
    }
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < i; ++j) g(i, j) = g(j, i);
    return g;
}

std::vector<std::size_t> sample_row_indices(std::size_t n, std::size_t count, Rng& rng) {
    if (count == 0) throw ArgumentError("sample_rows: count must be positive");
    if (n == 0) throw ArgumentError("sample_rows: source has no rows");
    std::vector<std::size_t> idx;
    if (count > n) {
        idx.resize(count);
        for (auto& i : idx) i = rng.uniform_index(n);
        return idx;
    }
    // Partial Fisher-Yates.
    idx.resize(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t j = i + rng.uniform_index(n - i);
        std::swap(idx[i], idx[j]);
    }
    idx.resize(count);
    return idx;
}

template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& a, std::span<const std::size_t> rows) {
    const std::size_t d = a.cols();
    BasicTensor<T> out({rows.size(), d});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= a.rows()) throw ArgumentError("gather_rows: row out of range");
        std::copy_n(a.row(rows[i]).begin(), d, out.row(i).begin());
    }
    return out;
}

template <typename T>
BasicTensor<T> sample_rows(const BasicTensor<T>& a, std::size_t count, Rng& rng) {
    const auto idx = sample_row_indices(a.rows(), count, rng);
    return gather_rows(a, std::span<const std::size_t>(idx));
}

template <typename T>
BasicTensor<T> gaussian_noise(const Shape& shape, double sigma, Rng& rng) {
    if (!(sigma >= 0.0)) throw ArgumentError("gaussian_noise: sigma must be non-negative");
    BasicTensor<T> out(shape);
    for (auto& v : out.data()) v = static_cast<T>(sigma * rng.normal());
    return out;
}

template BasicTensor<float> matmul(const BasicTensor<float>&, const BasicTensor<float>&);
template BasicTensor<double> matmul(const BasicTensor<double>&, const BasicTensor<double>&);
template BasicTensor<float> transpose(const BasicTensor<float>&);
template BasicTensor<double> transpose(const BasicTensor<double>&);
template BasicTensor<float> gram(const BasicTensor<float>&);
template BasicTensor<double> gram(const BasicTensor<double>&);
template BasicTensor<float> sample_rows(const BasicTensor<float>&, std::size_t, Rng&);
template BasicTensor<double> sample_rows(const BasicTensor<double>&, std::size_t, Rng&);
template BasicTensor<float> gather_rows(const BasicTensor<float>&, std::span<const std::size_t>);
template BasicTensor<double> gather_rows(const BasicTensor<double>&, std::span<const std::size_t>);
template BasicTensor<float> gaussian_noise(const Shape&, double, Rng&);
template BasicTensor<double> gaussian_noise(const Shape&, double, Rng&);

float max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    float m = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double max_abs_diff(const DTensor& a, const DTensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

bool all_finite(const Tensor& t) {
    return std::all_of(t.data().begin(), t.data().end(), [](float v) { return std::isfinite(v); });
}

}  // namespace pqnet
