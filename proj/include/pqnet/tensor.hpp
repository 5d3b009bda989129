#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pqnet/error.hpp"

namespace pqnet {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major n-dimensional array.
///
/// `Tensor` (float) is the carrier for network weights and activations.
/// `DTensor` (double) is used by the quantizer's linear algebra.
template <typename T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() : shape_{0}, data_{} {}
    explicit BasicTensor(Shape shape, T fill = T(0));
    BasicTensor(Shape shape, std::vector<T> data);

    /// Rank-2 tensor from nested rows: `{{1, 2}, {3, 4}}`.
    static BasicTensor matrix(std::initializer_list<std::initializer_list<T>> rows);
    static BasicTensor vector(std::initializer_list<T> values);
    static BasicTensor identity(std::size_t n);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::size_t rows() const;
    std::size_t cols() const;

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    std::span<T> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

    /// Same data, new shape. Element counts must agree.
    BasicTensor reshaped(Shape shape) const;

    template <typename U>
    BasicTensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return BasicTensor<U>(shape_, std::move(out));
    }

    bool operator==(const BasicTensor& other) const = default;

private:
    Shape shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using DTensor = BasicTensor<double>;

/// Seeded random source.
///
/// std::mt19937_64 with hand-written distributions; streams match across
/// standard libraries.
class Rng {
public:
    static constexpr const char* kAlgorithm = "mt19937_64+inverse-uniform+box-muller";

    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t next_u64() { return engine_(); }
    /// Uniform double in [0, 1) with 53 random bits.
    double uniform();
    /// Uniform integer in [0, n). n must be positive.
    std::size_t uniform_index(std::size_t n);
    /// Standard normal.
    double normal();
    /// Derive an independent child generator.
    Rng fork();

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a);

/// aᵀa, upper triangle accumulated in row order then mirrored.
template <typename T>
BasicTensor<T> gram(const BasicTensor<T>& a);

/// Draw `count` rows of `a`: without replacement when count <= rows,
/// uniformly with replacement otherwise.
template <typename T>
BasicTensor<T> sample_rows(const BasicTensor<T>& a, std::size_t count, Rng& rng);

/// Row indices chosen by `sample_rows` for an n-row input.
std::vector<std::size_t> sample_row_indices(std::size_t n, std::size_t count, Rng& rng);

template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& a, std::span<const std::size_t> rows);

template <typename T>
BasicTensor<T> gaussian_noise(const Shape& shape, double sigma, Rng& rng);

float max_abs_diff(const Tensor& a, const Tensor& b);
double max_abs_diff(const DTensor& a, const DTensor& b);
bool all_finite(const Tensor& t);

}  // namespace pqnet
