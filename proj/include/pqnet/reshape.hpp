#pragma once

#include "pqnet/tensor.hpp"

namespace pqnet {

struct ConvShape {
    std::size_t c_out = 1;
    std::size_t c_in = 1;
    std::size_t k = 1;  // square kernel side
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t groups = 1;

    void validate() const;
    std::size_t in_per_group() const { return c_in / groups; }
    std::size_t out_per_group() const { return c_out / groups; }
    /// Length of one column of the reshaped weight matrix.
    std::size_t column_length() const { return in_per_group() * k * k; }
    Shape weight_shape() const { return {c_out, in_per_group(), k, k}; }
    std::size_t out_size(std::size_t in) const;

    bool operator==(const ConvShape&) const = default;
};

/// Subvector layout for one layer: d = span·K·K for convolutions.
struct SubvectorScheme {
    std::size_t span = 1;
    std::size_t kernel = 1;

    std::size_t d() const { return span * kernel * kernel; }
};

/// W [C_out×C_in/g×K×K] → W_r [(C_in/g·K·K)×C_out]. Column o is filter o,
/// flattened (input channel, kernel row, kernel column). Grouped filters only
/// carry their own group's channels, so the layout is the same for any g.
Tensor weight_to_matrix(const Tensor& w, const ConvShape& shape);

/// Exact inverse of weight_to_matrix.
Tensor matrix_to_weight(const Tensor& wr, const ConvShape& shape);

/// im2col. x [B×C_in×H×W] → x_r [(g·B·H_out·W_out)×(C_in/g·K·K)].
/// Rows are group-major, then (b, oy, ox); padding is zero.
Tensor unfold_activations(const Tensor& x, const ConvShape& shape);

/// Adjoint of unfold_activations: scatter-add rows back to an input-shaped
/// tensor [B×C_in×H×W].
Tensor fold_activations(const Tensor& xr, const ConvShape& shape, std::size_t batch,
                        std::size_t height, std::size_t width);

/// Direct nested-loop convolution with zero padding. Reference oracle.
Tensor conv2d_reference(const Tensor& x, const Tensor& w, const ConvShape& shape);

/// Convolution through unfold_activations and one matmul per group.
Tensor conv2d_im2col(const Tensor& x, const Tensor& w, const ConvShape& shape);

/// Group-wise product of unfolded input and reshaped weight, rearranged to
/// [B×C_out×H_out×W_out].
Tensor conv_from_unfolded(const Tensor& xr, const Tensor& wr, const ConvShape& shape,
                          std::size_t batch, std::size_t h_out, std::size_t w_out);

/// Contiguous d-sized subvectors of each W_r column: [(C_out·m)×d].
Tensor conv_subvectors(const Tensor& wr, const SubvectorScheme& scheme);

}  // namespace pqnet
