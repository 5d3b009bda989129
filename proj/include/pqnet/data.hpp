#pragma once

#include <atomic>
#include <optional>
#include <span>
#include <vector>

#include "pqnet/tensor.hpp"

namespace pqnet {

/// Indexed image collection with optional labels.
class Dataset {
public:
    virtual ~Dataset() = default;

    virtual std::size_t size() const = 0;
    /// Shape of one sample, without the batch axis.
    virtual Shape sample_shape() const = 0;
    /// Stack the selected samples into [n × sample_shape].
    virtual Tensor images(std::span<const std::size_t> indices) const = 0;
    virtual bool has_labels() const = 0;
    /// Throws ArgumentError when the dataset is unlabeled.
    virtual int label(std::size_t i) const = 0;
    virtual std::size_t num_classes() const = 0;
};

class InMemoryDataset final : public Dataset {
public:
    InMemoryDataset(Tensor images, std::optional<std::vector<int>> labels,
                    std::size_t num_classes = 0);

    std::size_t size() const override { return images_.dim(0); }
    Shape sample_shape() const override;
    Tensor images(std::span<const std::size_t> indices) const override;
    bool has_labels() const override { return labels_.has_value(); }
    int label(std::size_t i) const override;
    std::size_t num_classes() const override { return num_classes_; }

    const Tensor& all_images() const { return images_; }
    const std::optional<std::vector<int>>& labels() const { return labels_; }

private:
    Tensor images_;
    std::optional<std::vector<int>> labels_;
    std::size_t num_classes_;
};

/// Forwards to another dataset and counts label and image reads.
class CountingDataset final : public Dataset {
public:
    explicit CountingDataset(const Dataset& inner) : inner_(inner) {}

    std::size_t size() const override { return inner_.size(); }
    Shape sample_shape() const override { return inner_.sample_shape(); }
    Tensor images(std::span<const std::size_t> indices) const override;
    bool has_labels() const override { return inner_.has_labels(); }
    int label(std::size_t i) const override;
    std::size_t num_classes() const override { return inner_.num_classes(); }

    std::size_t label_reads() const { return label_reads_.load(); }
    std::size_t image_reads() const { return image_reads_.load(); }

private:
    const Dataset& inner_;
    mutable std::atomic<std::size_t> label_reads_{0};
    mutable std::atomic<std::size_t> image_reads_{0};
};

std::vector<int> labels_of(const Dataset& data, std::span<const std::size_t> indices);

/// Two-class 8×8 single-channel images: class 0 carries horizontal
/// structure, class 1 vertical, with random phase, contrast and noise.
InMemoryDataset make_stripes(std::size_t n, Rng& rng, double noise = 0.35);

/// Two well-separated Gaussian blobs in `dims` dimensions.
InMemoryDataset make_blobs(std::size_t n, std::size_t dims, Rng& rng);

}  // namespace pqnet
