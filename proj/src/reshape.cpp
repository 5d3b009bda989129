#include "pqnet/reshape.hpp"

#include <string>

#include "pqnet/quantizer.hpp"

namespace pqnet {

void ConvShape::validate() const {
    if (c_out == 0 || c_in == 0 || k == 0 || stride == 0 || groups == 0) {
        throw ShapeError("conv: c_out, c_in, k, stride and groups must be positive");
    }
    if (c_in % groups != 0 || c_out % groups != 0) {
        throw ShapeError("conv: channels (" + std::to_string(c_in) + ", " + std::to_string(c_out) +
                         ") not divisible by groups=" + std::to_string(groups));
    }
}

std::size_t ConvShape::out_size(std::size_t in) const {
    const std::size_t padded = in + 2 * padding;
    if (padded < k) {
        throw ShapeError("conv: input size " + std::to_string(in) + " too small for kernel " +
                         std::to_string(k) + " with padding " + std::to_string(padding));
    }
    return (padded - k) / stride + 1;
}

namespace {

void check_weight(const Tensor& w, const ConvShape& shape) {
    shape.validate();
    if (w.shape() != shape.weight_shape()) {
        throw ShapeError("conv weight " + shape_str(w.shape()) + " does not match expected " +
                         shape_str(shape.weight_shape()));
    }
}

void check_input(const Tensor& x, const ConvShape& shape) {
    if (x.rank() != 4 || x.dim(1) != shape.c_in) {
        throw ShapeError("conv input " + shape_str(x.shape()) + " does not have " +
                         std::to_string(shape.c_in) + " channels");
    }
}

}  // namespace

Tensor weight_to_matrix(const Tensor& w, const ConvShape& shape) {
    check_weight(w, shape);
    const std::size_t col_len = shape.column_length();
    Tensor wr({col_len, shape.c_out});
    for (std::size_t o = 0; o < shape.c_out; ++o)
        for (std::size_t r = 0; r < col_len; ++r) wr(r, o) = w[o * col_len + r];
    return wr;
}

Tensor matrix_to_weight(const Tensor& wr, const ConvShape& shape) {
    shape.validate();
    const std::size_t col_len = shape.column_length();
    if (wr.rank() != 2 || wr.rows() != col_len || wr.cols() != shape.c_out) {
        throw ShapeError("reshaped weight " + shape_str(wr.shape()) + " does not match [" +
                         std::to_string(col_len) + "x" + std::to_string(shape.c_out) + "]");
    }
    Tensor w(shape.weight_shape());
    for (std::size_t o = 0; o < shape.c_out; ++o)
        for (std::size_t r = 0; r < col_len; ++r) w[o * col_len + r] = wr(r, o);
    return w;
}

Tensor unfold_activations(const Tensor& x, const ConvShape& shape) {
    shape.validate();
    check_input(x, shape);
    const std::size_t batch = x.dim(0), h = x.dim(2), wd = x.dim(3);
    const std::size_t ho = shape.out_size(h), wo = shape.out_size(wd);
    const std::size_t k = shape.k, cpg = shape.in_per_group();
    const std::size_t rows_per_group = batch * ho * wo;
    const std::size_t cols = shape.column_length();
    Tensor xr({shape.groups * rows_per_group, cols});
    const float* px = x.data().data();
    float* out = xr.data().data();

    for (std::size_t g = 0; g < shape.groups; ++g) {
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t oy = 0; oy < ho; ++oy) {
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    float* row = out + (g * rows_per_group + (b * ho + oy) * wo + ox) * cols;
                    for (std::size_t ci = 0; ci < cpg; ++ci) {
                        const float* plane = px + ((b * shape.c_in) + g * cpg + ci) * h * wd;
                        for (std::size_t ky = 0; ky < k; ++ky) {
                            const long iy = static_cast<long>(oy * shape.stride + ky) -
                                            static_cast<long>(shape.padding);
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const long ix = static_cast<long>(ox * shape.stride + kx) -
                                                static_cast<long>(shape.padding);
                                const bool inside = iy >= 0 && ix >= 0 &&
                                                    iy < static_cast<long>(h) &&
                                                    ix < static_cast<long>(wd);
                                row[(ci * k + ky) * k + kx] =
                                    inside ? plane[static_cast<std::size_t>(iy) * wd +
                                                   static_cast<std::size_t>(ix)]
                                           : 0.0f;
                            }
                        }
                    }
                }
            }
        }
    }
    return xr;
}

Tensor fold_activations(const Tensor& xr, const ConvShape& shape, std::size_t batch,
                        std::size_t height, std::size_t width) {
    shape.validate();
    const std::size_t ho = shape.out_size(height), wo = shape.out_size(width);
    const std::size_t k = shape.k, cpg = shape.in_per_group();
    const std::size_t rows_per_group = batch * ho * wo;
    const std::size_t cols = shape.column_length();
    if (xr.rank() != 2 || xr.rows() != shape.groups * rows_per_group || xr.cols() != cols) {
        throw ShapeError("fold_activations: unexpected unfolded shape " + shape_str(xr.shape()));
    }
    Tensor x({batch, shape.c_in, height, width});
    float* px = x.data().data();
    const float* in = xr.data().data();

    for (std::size_t g = 0; g < shape.groups; ++g) {
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t oy = 0; oy < ho; ++oy) {
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    const float* row = in + (g * rows_per_group + (b * ho + oy) * wo + ox) * cols;
                    for (std::size_t ci = 0; ci < cpg; ++ci) {
                        float* plane = px + ((b * shape.c_in) + g * cpg + ci) * height * width;
                        for (std::size_t ky = 0; ky < k; ++ky) {
                            const long iy = static_cast<long>(oy * shape.stride + ky) -
                                            static_cast<long>(shape.padding);
                            if (iy < 0 || iy >= static_cast<long>(height)) continue;
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const long ix = static_cast<long>(ox * shape.stride + kx) -
                                                static_cast<long>(shape.padding);
                                if (ix < 0 || ix >= static_cast<long>(width)) continue;
                                plane[static_cast<std::size_t>(iy) * width +
                                      static_cast<std::size_t>(ix)] +=
                                    row[(ci * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    return x;
}

Tensor conv2d_reference(const Tensor& x, const Tensor& w, const ConvShape& shape) {
    check_weight(w, shape);
    check_input(x, shape);
    const std::size_t batch = x.dim(0), h = x.dim(2), wd = x.dim(3);
    const std::size_t ho = shape.out_size(h), wo = shape.out_size(wd);
    const std::size_t k = shape.k, cpg = shape.in_per_group(), opg = shape.out_per_group();
    Tensor y({batch, shape.c_out, ho, wo});

    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t o = 0; o < shape.c_out; ++o) {
            const std::size_t g = o / opg;
            for (std::size_t oy = 0; oy < ho; ++oy) {
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    float acc = 0.0f;
                    for (std::size_t ci = 0; ci < cpg; ++ci) {
                        for (std::size_t ky = 0; ky < k; ++ky) {
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const long iy = static_cast<long>(oy * shape.stride + ky) -
                                                static_cast<long>(shape.padding);
                                const long ix = static_cast<long>(ox * shape.stride + kx) -
                                                static_cast<long>(shape.padding);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) ||
                                    ix >= static_cast<long>(wd)) {
                                    continue;
                                }
                                const float xv = x[((b * shape.c_in + g * cpg + ci) * h +
                                                    static_cast<std::size_t>(iy)) *
                                                       wd +
                                                   static_cast<std::size_t>(ix)];
                                const float wv = w[((o * cpg + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    y[((b * shape.c_out + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    return y;
}

Tensor conv_from_unfolded(const Tensor& xr, const Tensor& wr, const ConvShape& shape,
                          std::size_t batch, std::size_t h_out, std::size_t w_out) {
    const std::size_t rows_per_group = batch * h_out * w_out;
    const std::size_t cols = shape.column_length(), opg = shape.out_per_group();
    if (xr.rows() != shape.groups * rows_per_group || xr.cols() != cols || wr.rows() != cols ||
        wr.cols() != shape.c_out) {
        throw ShapeError("conv_from_unfolded: " + shape_str(xr.shape()) + " x " +
                         shape_str(wr.shape()) + " inconsistent with conv shape");
    }
    Tensor y({batch, shape.c_out, h_out, w_out});
    const std::size_t plane = h_out * w_out;
    for (std::size_t g = 0; g < shape.groups; ++g) {
        // Rows of this group times the group's own output columns.
        Tensor xg({rows_per_group, cols},
                  std::vector<float>(xr.data().begin() + g * rows_per_group * cols,
                                     xr.data().begin() + (g + 1) * rows_per_group * cols));
        Tensor wg({cols, opg});
        for (std::size_t r = 0; r < cols; ++r)
            for (std::size_t o = 0; o < opg; ++o) wg(r, o) = wr(r, g * opg + o);
        const Tensor yg = matmul(xg, wg);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t p = 0; p < plane; ++p)
                for (std::size_t o = 0; o < opg; ++o)
                    y[(b * shape.c_out + g * opg + o) * plane + p] = yg(b * plane + p, o);
    }
    return y;
}

Tensor conv2d_im2col(const Tensor& x, const Tensor& w, const ConvShape& shape) {
    check_weight(w, shape);
    const Tensor xr = unfold_activations(x, shape);
    return conv_from_unfolded(xr, weight_to_matrix(w, shape), shape, x.dim(0),
                              shape.out_size(x.dim(2)), shape.out_size(x.dim(3)));
}

Tensor conv_subvectors(const Tensor& wr, const SubvectorScheme& scheme) {
    const std::size_t d = scheme.d();
    if (d == 0 || wr.rows() % d != 0) {
        throw ShapeError("column length " + std::to_string(wr.rows()) +
                         " is not a multiple of subvector size d=" + std::to_string(d) +
                         "; choose a span that divides C_in/groups");
    }
    return split_columns(wr, wr.rows() / d);
}

}  // namespace pqnet
