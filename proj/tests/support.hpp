#pragma once

// Independent reference implementations used as test oracles.

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <map>
#include <variant>

#include "pqnet/modelio.hpp"
#include "pqnet/netgraph.hpp"
#include "pqnet/quantizer.hpp"

namespace oracle {

using pqnet::DTensor;
using pqnet::Tensor;

inline Eigen::MatrixXd to_eigen(const DTensor& t) {
    Eigen::MatrixXd m(t.rows(), t.cols());
    for (std::size_t r = 0; r < t.rows(); ++r)
        for (std::size_t c = 0; c < t.cols(); ++c) m(r, c) = t(r, c);
    return m;
}

inline DTensor from_eigen(const Eigen::MatrixXd& m) {
    DTensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) t(r, c) = m(r, c);
    return t;
}

template <typename T>
pqnet::BasicTensor<T> naive_matmul(const pqnet::BasicTensor<T>& a, const pqnet::BasicTensor<T>& b) {
    pqnet::BasicTensor<T> out({a.rows(), b.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            T s = 0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
            out(i, j) = s;
        }
    return out;
}

/// Minimum-norm x with a·x = a·b via a thin SVD of `a` itself.
inline Eigen::VectorXd svd_lstsq(const Eigen::MatrixXd& a, const Eigen::VectorXd& b) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    svd.setThreshold(1e-6);
    return svd.solve(a * b);
}

/// argmin_c ‖x̃(c − v)‖², lowest index on ties, computed from x̃ directly.
inline std::vector<std::uint32_t> brute_estep(const DTensor& sub, const DTensor& centroids,
                                              const DTensor& xt) {
    const Eigen::MatrixXd X = to_eigen(xt);
    std::vector<std::uint32_t> out;
    for (std::size_t p = 0; p < sub.rows(); ++p) {
        double best = std::numeric_limits<double>::infinity();
        std::uint32_t arg = 0;
        for (std::size_t c = 0; c < centroids.rows(); ++c) {
            Eigen::VectorXd diff(sub.cols());
            for (std::size_t i = 0; i < sub.cols(); ++i) diff[i] = centroids(c, i) - sub(p, i);
            const double dist = (X * diff).squaredNorm();
            if (dist < best) {
                best = dist;
                arg = static_cast<std::uint32_t>(c);
            }
        }
        out.push_back(arg);
    }
    return out;
}

/// Cluster update minimizing Σ_p ‖x̃(c − v_p)‖² by direct least squares over
/// the stacked system [x̃; x̃; …] c ≈ [x̃v_1; x̃v_2; …].
inline DTensor lstsq_mstep(const DTensor& sub, const std::vector<std::uint32_t>& asg,
                           const DTensor& centroids, const DTensor& xt) {
    const Eigen::MatrixXd X = to_eigen(xt);
    const Eigen::Index n = X.rows(), d = X.cols();
    DTensor out = centroids;
    for (std::size_t c = 0; c < centroids.rows(); ++c) {
        std::vector<std::size_t> members;
        for (std::size_t p = 0; p < asg.size(); ++p)
            if (asg[p] == c) members.push_back(p);
        if (members.empty()) continue;
        Eigen::MatrixXd A(n * Eigen::Index(members.size()), d);
        Eigen::VectorXd rhs(A.rows());
        for (std::size_t j = 0; j < members.size(); ++j) {
            Eigen::VectorXd v(d);
            for (Eigen::Index i = 0; i < d; ++i) v[i] = sub(members[j], i);
            A.middleRows(Eigen::Index(j) * n, n) = X;
            rhs.segment(Eigen::Index(j) * n, n) = X * v;
        }
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
        svd.setThreshold(1e-6);
        const Eigen::VectorXd sol = svd.solve(rhs);
        for (Eigen::Index i = 0; i < d; ++i) out(c, i) = sol[i];
    }
    return out;
}

/// Textbook Lloyd iteration under Euclidean distance.
struct LloydResult {
    DTensor centroids;
    std::vector<std::uint32_t> assignments;
    bool had_empty = false;
};

inline LloydResult lloyd(const DTensor& sub, DTensor centroids, std::size_t iters) {
    LloydResult r;
    const std::size_t k = centroids.rows(), d = sub.cols();
    DTensor identity = DTensor::identity(d);
    for (std::size_t it = 0; it < iters; ++it) {
        r.assignments = brute_estep(sub, centroids, identity);
        std::vector<std::size_t> count(k, 0);
        DTensor sum({k, d});
        for (std::size_t p = 0; p < sub.rows(); ++p) {
            ++count[r.assignments[p]];
            for (std::size_t i = 0; i < d; ++i) sum(r.assignments[p], i) += sub(p, i);
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (count[c] == 0) {
                r.had_empty = true;
                continue;
            }
            for (std::size_t i = 0; i < d; ++i) centroids(c, i) = sum(c, i) / double(count[c]);
        }
    }
    r.centroids = centroids;
    return r;
}

inline double sq_norm(std::span<const float> v) {
    double s = 0.0;
    for (float x : v) s += double(x) * double(x);
    return s;
}

/// ‖a − b‖ / max(‖a‖, ‖b‖, floor).
inline double rel_error(std::span<const double> a, std::span<const double> b, double floor = 1e-12) {
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

/// Parse an architecture and give it random weights and nontrivial
/// BatchNorm statistics.
inline pqnet::Network random_net(const std::string& arch, pqnet::Rng& rng) {
    pqnet::Network net = pqnet::parse_architecture(arch);
    net.init_parameters(rng);
    for (auto& [name, t] : net.tensors()) {
        const bool var = name.ends_with("running_var") || name.ends_with("gamma");
        const bool shift = name.ends_with("running_mean") || name.ends_with("beta") || name.ends_with("bias");
        for (auto& v : t->data()) {
            if (var) v = static_cast<float>(0.5 + rng.uniform());
            else if (shift) v = static_cast<float>(0.3 * rng.normal());
        }
    }
    return net;
}

inline Tensor random_probs(std::size_t rows, std::size_t classes, pqnet::Rng& rng, double spread = 1.0) {
    Tensor logits = pqnet::gaussian_noise<float>({rows, classes}, spread, rng);
    return pqnet::softmax(logits);
}

/// Distillation loss of the network on (x, targets) in the network's mode,
/// without touching running statistics.
inline double kl_of(const pqnet::Network& net, const Tensor& x, const Tensor& targets) {
    pqnet::Network copy = net;
    return pqnet::kl_loss(pqnet::softmax(pqnet::forward(copy, x)), targets);
}


/// Every network tensor widened to double, keyed like Network::tensors().
using DoubleParams = std::map<std::string, DTensor>;

inline DoubleParams double_params(const pqnet::Network& net) {
    DoubleParams out;
    for (const auto& [k, t] : net.tensors()) out[k] = t->cast<double>();
    return out;
}

namespace detail {

inline DTensor conv_direct(const DTensor& x, const DTensor& w, const DTensor* bias, const pqnet::ConvShape& s) {
    const std::size_t b = x.dim(0), h = x.dim(2), wd = x.dim(3);
    const std::size_t oh = s.out_size(h), ow = s.out_size(wd);
    const std::size_t cin_g = s.c_in / s.groups, cout_g = s.c_out / s.groups;
    DTensor y({b, s.c_out, oh, ow});
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t o = 0; o < s.c_out; ++o) {
            const std::size_t g = o / cout_g;
            for (std::size_t oy = 0; oy < oh; ++oy)
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    double acc = bias ? (*bias)[o] : 0.0;
                    for (std::size_t c = 0; c < cin_g; ++c)
                        for (std::size_t ky = 0; ky < s.k; ++ky)
                            for (std::size_t kx = 0; kx < s.k; ++kx) {
                                const long iy = long(oy * s.stride + ky) - long(s.padding);
                                const long ix = long(ox * s.stride + kx) - long(s.padding);
                                if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(wd)) continue;
                                const double xv = x[((n * s.c_in + g * cin_g + c) * h + iy) * wd + ix];
                                acc += xv * w[((o * cin_g + c) * s.k + ky) * s.k + kx];
                            }
                    y[((n * s.c_out + o) * oh + oy) * ow + ox] = acc;
                }
        }
    return y;
}

inline DTensor batchnorm(const DTensor& x, const pqnet::BatchNorm2d& bn, const DoubleParams& p, const std::string& id,
                         bool batch_stats) {
    const std::size_t b = x.dim(0), c = x.dim(1), plane = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
    const DTensor& gamma = p.at(id + ".gamma");
    const DTensor& beta = p.at(id + ".beta");
    DTensor y = x;
    for (std::size_t ch = 0; ch < c; ++ch) {
        double mean = p.at(id + ".running_mean")[ch], var = p.at(id + ".running_var")[ch];
        if (batch_stats) {
            double s = 0.0, sq = 0.0;
            for (std::size_t n = 0; n < b; ++n)
                for (std::size_t i = 0; i < plane; ++i) s += x[(n * c + ch) * plane + i];
            mean = s / double(b * plane);
            for (std::size_t n = 0; n < b; ++n)
                for (std::size_t i = 0; i < plane; ++i) {
                    const double d = x[(n * c + ch) * plane + i] - mean;
                    sq += d * d;
                }
            var = sq / double(b * plane);
        }
        const double inv = 1.0 / std::sqrt(var + double(bn.eps));
        for (std::size_t n = 0; n < b; ++n)
            for (std::size_t i = 0; i < plane; ++i) {
                double& v = y[(n * c + ch) * plane + i];
                v = gamma[ch] * (v - mean) * inv + beta[ch];
            }
    }
    return y;
}

inline DTensor run_layer(const pqnet::LayerNode& node, const DTensor& x, const DoubleParams& p, bool batch_stats) {
    using namespace pqnet;
    return std::visit(
        [&](const auto& l) -> DTensor {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, Linear>) {
                DTensor y = matmul(x, p.at(node.id + ".weight"));
                if (l.has_bias)
                    for (std::size_t r = 0; r < y.rows(); ++r)
                        for (std::size_t j = 0; j < y.cols(); ++j) y(r, j) += p.at(node.id + ".bias")[j];
                return y;
            } else if constexpr (std::is_same_v<L, Conv2d>) {
                return conv_direct(x, p.at(node.id + ".weight"), l.has_bias ? &p.at(node.id + ".bias") : nullptr,
                                   l.shape);
            } else if constexpr (std::is_same_v<L, BatchNorm2d>) {
                return batchnorm(x, l, p, node.id, batch_stats);
            } else if constexpr (std::is_same_v<L, ReLU>) {
                DTensor y = x;
                for (auto& v : y.data()) v = std::max(v, 0.0);
                return y;
            } else if constexpr (std::is_same_v<L, GlobalAvgPool>) {
                const std::size_t b = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
                DTensor y({b, c});
                for (std::size_t i = 0; i < b * c; ++i) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < plane; ++j) s += x[i * plane + j];
                    y[i] = s / double(plane);
                }
                return y;
            } else {
                return x.reshaped({x.dim(0), x.size() / x.dim(0)});
            }
        },
        node.layer);
}

}  // namespace detail

/// Logits in double with direct convolution. `batch_stats` normalizes
/// BatchNorm with the batch's biased variance.
inline DTensor forward_double(const pqnet::Network& net, const DoubleParams& p, const DTensor& x, bool batch_stats) {
    DTensor h = x;
    for (const auto& block : net.blocks) {
        DTensor main = h;
        for (const auto& n : block.main) main = detail::run_layer(n, main, p, batch_stats);
        if (block.kind == pqnet::Block::Kind::Residual) {
            DTensor side = h;
            for (const auto& n : block.shortcut) side = detail::run_layer(n, side, p, batch_stats);
            for (std::size_t i = 0; i < main.size(); ++i) main[i] += side[i];
        }
        h = std::move(main);
    }
    return detail::run_layer(net.classifier, h, p, batch_stats);
}

/// Mean KL(targets ‖ softmax(logits)) in double, student clamped at 1e-12.
inline double kl_double(const DTensor& logits, const Tensor& targets) {
    double total = 0.0;
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < logits.cols(); ++j) mx = std::max(mx, logits(r, j));
        double z = 0.0;
        for (std::size_t j = 0; j < logits.cols(); ++j) z += std::exp(logits(r, j) - mx);
        for (std::size_t j = 0; j < logits.cols(); ++j) {
            const double t = targets(r, j);
            if (t <= 0.0) continue;
            const double s = std::max(std::exp(logits(r, j) - mx) / z, 1e-12);
            total += t * std::log(t / s);
        }
    }
    return total / double(logits.rows());
}

inline double kl_double(const pqnet::Network& net, const DoubleParams& p, const DTensor& x, const Tensor& targets) {
    return kl_double(forward_double(net, p, x, net.mode == pqnet::Mode::BnTrain), targets);
}

}  // namespace oracle
