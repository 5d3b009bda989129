#include "pqnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace pqnet {

InMemoryDataset::InMemoryDataset(Tensor images, std::optional<std::vector<int>> labels,
                                 std::size_t num_classes)
    : images_(std::move(images)), labels_(std::move(labels)), num_classes_(num_classes) {
    if (images_.rank() < 2) throw ShapeError("dataset images need a batch axis");
    if (labels_) {
        if (labels_->size() != images_.dim(0)) {
            throw ShapeError("dataset has " + std::to_string(images_.dim(0)) + " images but " +
                             std::to_string(labels_->size()) + " labels");
        }
        for (int l : *labels_) {
            if (l < 0) throw ArgumentError("negative label");
            num_classes_ = std::max(num_classes_, static_cast<std::size_t>(l) + 1);
        }
    }
}

Shape InMemoryDataset::sample_shape() const {
    return Shape(images_.shape().begin() + 1, images_.shape().end());
}

Tensor InMemoryDataset::images(std::span<const std::size_t> indices) const {
    const std::size_t per = images_.size() / images_.dim(0);
    Shape shape = images_.shape();
    shape[0] = indices.size();
    Tensor out(shape);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= size()) throw ArgumentError("dataset index out of range");
        std::copy_n(images_.data().begin() + indices[i] * per, per, out.data().begin() + i * per);
    }
    return out;
}

int InMemoryDataset::label(std::size_t i) const {
    if (!labels_) throw ArgumentError("dataset has no labels");
    return labels_->at(i);
}

Tensor CountingDataset::images(std::span<const std::size_t> indices) const {
    image_reads_ += indices.size();
    return inner_.images(indices);
}

int CountingDataset::label(std::size_t i) const {
    ++label_reads_;
    return inner_.label(i);
}

std::vector<int> labels_of(const Dataset& data, std::span<const std::size_t> indices) {
    std::vector<int> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(data.label(i));
    return out;
}

InMemoryDataset make_stripes(std::size_t n, Rng& rng, double noise) {
    constexpr std::size_t kSide = 8;
    Tensor images({n, 1, kSide, kSide});
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int cls = static_cast<int>(i % 2);
        labels[i] = cls;
        const double freq = 1.0 + static_cast<double>(rng.uniform_index(2));
        const double phase = 2.0 * std::numbers::pi * rng.uniform();
        const double amp = 0.5 + rng.uniform();
        const double offset = 0.5 * rng.normal();
        for (std::size_t y = 0; y < kSide; ++y) {
            for (std::size_t x = 0; x < kSide; ++x) {
                const double t = static_cast<double>(cls == 0 ? y : x);
                const double v = offset +
                                 amp * std::sin(2.0 * std::numbers::pi * freq * t / kSide + phase) +
                                 noise * rng.normal();
                images[(i * kSide + y) * kSide + x] = static_cast<float>(v);
            }
        }
    }
    return InMemoryDataset(std::move(images), std::move(labels), 2);
}

InMemoryDataset make_blobs(std::size_t n, std::size_t dims, Rng& rng) {
    Tensor points({n, dims});
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int cls = static_cast<int>(i % 2);
        labels[i] = cls;
        for (std::size_t j = 0; j < dims; ++j) {
            const double center = (j == 0) ? (cls ? 3.0 : -3.0) : 0.0;
            points(i, j) = static_cast<float>(center + 0.5 * rng.normal());
        }
    }
    return InMemoryDataset(std::move(points), std::move(labels), 2);
}

}  // namespace pqnet
