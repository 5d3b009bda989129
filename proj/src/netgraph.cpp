#include "pqnet/netgraph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pqnet {

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

[[noreturn]] void layer_error(const std::string& id, const std::string& msg) {
    throw ShapeError("layer " + id + ": " + msg);
}

Shape batched(std::size_t batch, const Shape& sample) {
    Shape s{batch};
    s.insert(s.end(), sample.begin(), sample.end());
    return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Network

LayerNode* Network::find(const std::string& id) {
    LayerNode* out = nullptr;
    for_each_node([&](LayerNode& n) {
        if (n.id == id) out = &n;
    });
    return out;
}

const LayerNode* Network::find(const std::string& id) const {
    const LayerNode* out = nullptr;
    for_each_node([&](const LayerNode& n) {
        if (n.id == id) out = &n;
    });
    return out;
}

LayerNode& Network::at(const std::string& id) {
    if (auto* n = find(id)) return *n;
    throw ArgumentError("no layer with id '" + id + "'");
}

const LayerNode& Network::at(const std::string& id) const {
    if (const auto* n = find(id)) return *n;
    throw ArgumentError("no layer with id '" + id + "'");
}

std::vector<std::string> Network::quantizable_ids() const {
    std::vector<std::string> ids;
    for_each_node([&](const LayerNode& n) {
        if (std::holds_alternative<Conv2d>(n.layer) || std::holds_alternative<Linear>(n.layer)) {
            ids.push_back(n.id);
        }
    });
    return ids;
}

std::vector<std::string> Network::layer_ids() const {
    std::vector<std::string> ids;
    for_each_node([&](const LayerNode& n) { ids.push_back(n.id); });
    return ids;
}

namespace {

template <typename Node, typename Map>
void collect_tensors(Node& n, Map& out) {
    std::visit(
        [&](auto& l) {
            using L = std::remove_cvref_t<decltype(l)>;
            if constexpr (std::is_same_v<L, Linear> || std::is_same_v<L, Conv2d>) {
                out[n.id + ".weight"] = &l.weight;
                if (l.has_bias) out[n.id + ".bias"] = &l.bias;
            } else if constexpr (std::is_same_v<L, BatchNorm2d>) {
                out[n.id + ".gamma"] = &l.gamma;
                out[n.id + ".beta"] = &l.beta;
                out[n.id + ".running_mean"] = &l.running_mean;
                out[n.id + ".running_var"] = &l.running_var;
            }
        },
        n.layer);
}

}  // namespace

std::map<std::string, Tensor*> Network::tensors() {
    std::map<std::string, Tensor*> out;
    for_each_node([&](LayerNode& n) { collect_tensors(n, out); });
    return out;
}

std::map<std::string, const Tensor*> Network::tensors() const {
    std::map<std::string, const Tensor*> out;
    for_each_node([&](const LayerNode& n) { collect_tensors(n, out); });
    return out;
}

std::size_t Network::num_classes() const {
    const auto* lin = std::get_if<Linear>(&classifier.layer);
    if (!lin) throw ShapeError("classifier must be a linear layer");
    return lin->c_out;
}

std::size_t Network::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors()) n += t->size();
    return n;
}

namespace {

Shape propagate(const LayerNode& node, const Shape& s) {
    return std::visit(
        overloaded{
            [&](const Linear& l) -> Shape {
                if (s.size() != 1 || s[0] != l.c_in) {
                    layer_error(node.id, "linear expects [" + std::to_string(l.c_in) + "], got " +
                                             shape_str(s));
                }
                if (l.weight.shape() != Shape{l.c_in, l.c_out}) {
                    layer_error(node.id, "weight shape " + shape_str(l.weight.shape()));
                }
                if (l.has_bias && l.bias.shape() != Shape{l.c_out}) {
                    layer_error(node.id, "bias shape " + shape_str(l.bias.shape()));
                }
                return {l.c_out};
            },
            [&](const Conv2d& c) -> Shape {
                try {
                    c.shape.validate();
                } catch (const ShapeError& e) {
                    layer_error(node.id, e.what());
                }
                if (s.size() != 3 || s[0] != c.shape.c_in) {
                    layer_error(node.id, "conv expects [" + std::to_string(c.shape.c_in) +
                                             "xHxW], got " + shape_str(s));
                }
                if (c.weight.shape() != c.shape.weight_shape()) {
                    layer_error(node.id, "weight shape " + shape_str(c.weight.shape()));
                }
                if (c.has_bias && c.bias.shape() != Shape{c.shape.c_out}) {
                    layer_error(node.id, "bias shape " + shape_str(c.bias.shape()));
                }
                try {
                    return {c.shape.c_out, c.shape.out_size(s[1]), c.shape.out_size(s[2])};
                } catch (const ShapeError& e) {
                    layer_error(node.id, e.what());
                }
            },
            [&](const BatchNorm2d& b) -> Shape {
                if ((s.size() != 3 && s.size() != 1) || s[0] != b.channels) {
                    layer_error(node.id, "batchnorm expects " + std::to_string(b.channels) +
                                             " channels, got " + shape_str(s));
                }
                return s;
            },
            [&](const ReLU&) -> Shape { return s; },
            [&](const GlobalAvgPool&) -> Shape {
                if (s.size() != 3) layer_error(node.id, "gap expects [CxHxW], got " + shape_str(s));
                return {s[0]};
            },
            [&](const Flatten&) -> Shape { return {shape_numel(s)}; },
        },
        node.layer);
}

}  // namespace

void Network::validate() const {
    Shape s = input_shape;
    for (const auto& b : blocks) {
        Shape main = s;
        for (const auto& n : b.main) main = propagate(n, main);
        if (b.kind == Block::Kind::Residual) {
            Shape sc = s;
            for (const auto& n : b.shortcut) sc = propagate(n, sc);
            if (sc != main) {
                const std::string id = b.main.empty() ? "residual" : b.main.front().id;
                layer_error(id, "residual branches disagree: " + shape_str(main) + " vs " +
                                    shape_str(sc));
            }
        }
        s = main;
    }
    if (!std::holds_alternative<Linear>(classifier.layer)) {
        throw ShapeError("classifier must be a linear layer");
    }
    propagate(classifier, s);
}

void Network::init_parameters(Rng& rng) {
    for_each_node([&](LayerNode& n) {
        std::visit(overloaded{
                       [&](Linear& l) {
                           const double std = std::sqrt(2.0 / static_cast<double>(l.c_in));
                           l.weight = gaussian_noise<float>({l.c_in, l.c_out}, std, rng);
                           l.bias = l.has_bias ? Tensor({l.c_out}) : Tensor();
                       },
                       [&](Conv2d& c) {
                           const double fan_in = static_cast<double>(c.shape.column_length());
                           c.weight = gaussian_noise<float>(c.shape.weight_shape(),
                                                            std::sqrt(2.0 / fan_in), rng);
                           c.bias = c.has_bias ? Tensor({c.shape.c_out}) : Tensor();
                       },
                       [&](BatchNorm2d& b) {
                           b.gamma = Tensor({b.channels}, 1.0f);
                           b.beta = Tensor({b.channels});
                           b.running_mean = Tensor({b.channels});
                           b.running_var = Tensor({b.channels}, 1.0f);
                       },
                       [](auto&) {},
                   },
                   n.layer);
    });
}

// ---------------------------------------------------------------------------
// Forward

namespace {

Tensor linear_forward(const Linear& l, const Tensor& x, const std::string& id) {
    if (x.rank() != 2 || x.dim(1) != l.c_in) {
        layer_error(id, "linear input " + shape_str(x.shape()) + ", expected [Bx" +
                            std::to_string(l.c_in) + "]");
    }
    Tensor y = matmul(x, l.weight);
    if (l.has_bias) {
        for (std::size_t b = 0; b < y.rows(); ++b)
            for (std::size_t o = 0; o < l.c_out; ++o) y(b, o) += l.bias[o];
    }
    return y;
}

struct BnGeometry {
    std::size_t batch, channels, plane;
};

BnGeometry bn_geometry(const Tensor& x, const BatchNorm2d& b, const std::string& id) {
    if ((x.rank() != 4 && x.rank() != 2) || x.dim(1) != b.channels) {
        layer_error(id, "batchnorm input " + shape_str(x.shape()) + " lacks " +
                            std::to_string(b.channels) + " channels");
    }
    const std::size_t plane = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
    return {x.dim(0), b.channels, plane};
}

Tensor batchnorm_forward(const BatchNorm2d& b, BatchNorm2d* stats_out, const Tensor& x,
                         bool batch_stats, LayerCache* cache, const std::string& id) {
    const auto [batch, channels, plane] = bn_geometry(x, b, id);
    const std::size_t count = batch * plane;
    Tensor y(x.shape());
    Tensor xhat(x.shape());
    std::vector<float> inv_std(channels);

    for (std::size_t c = 0; c < channels; ++c) {
        double mean, var;
        if (batch_stats) {
            double sum = 0.0, sq = 0.0;
            for (std::size_t n = 0; n < batch; ++n) {
                const float* p = x.data().data() + (n * channels + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) sum += p[i];
            }
            mean = sum / static_cast<double>(count);
            for (std::size_t n = 0; n < batch; ++n) {
                const float* p = x.data().data() + (n * channels + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - mean) * (p[i] - mean);
            }
            var = sq / static_cast<double>(count);
            if (stats_out) {
                const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
                const double m = b.momentum;
                stats_out->running_mean[c] =
                    static_cast<float>((1.0 - m) * b.running_mean[c] + m * mean);
                stats_out->running_var[c] =
                    static_cast<float>((1.0 - m) * b.running_var[c] + m * unbiased);
            }
        } else {
            mean = b.running_mean[c];
            var = b.running_var[c];
        }
        const double is = 1.0 / std::sqrt(var + static_cast<double>(b.eps));
        inv_std[c] = static_cast<float>(is);
        for (std::size_t n = 0; n < batch; ++n) {
            const std::size_t off = (n * channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                const float xh = static_cast<float>((x[off + i] - mean) * is);
                xhat[off + i] = xh;
                y[off + i] = b.gamma[c] * xh + b.beta[c];
            }
        }
    }
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv_std);
        cache->batch_stats = batch_stats;
    }
    return y;
}

struct Runner {
    Mode mode;
    bool update_stats;
    Tape* tape;
    ActivationTrace* trace;

    // `mut` is the same node when running stats may be written.
    Tensor node(const LayerNode& n, LayerNode* mut, const Tensor& x) const {
        LayerCache* cache = nullptr;
        if (tape) {
            cache = &tape->layers[n.id];
            cache->input = x;
        }
        return std::visit(
            overloaded{
                [&](const Linear& l) {
                    if (trace) (*trace)[n.id] = x;
                    return linear_forward(l, x, n.id);
                },
                [&](const Conv2d& c) {
                    if (trace) (*trace)[n.id] = x;
                    if (x.rank() != 4 || x.dim(1) != c.shape.c_in) {
                        layer_error(n.id, "conv input " + shape_str(x.shape()) + ", expected " +
                                              std::to_string(c.shape.c_in) + " channels");
                    }
                    const std::size_t ho = c.shape.out_size(x.dim(2));
                    const std::size_t wo = c.shape.out_size(x.dim(3));
                    Tensor xr = unfold_activations(x, c.shape);
                    Tensor y = conv_from_unfolded(xr, weight_to_matrix(c.weight, c.shape),
                                                  c.shape, x.dim(0), ho, wo);
                    if (c.has_bias) {
                        const std::size_t plane = ho * wo;
                        for (std::size_t b = 0; b < x.dim(0); ++b)
                            for (std::size_t o = 0; o < c.shape.c_out; ++o)
                                for (std::size_t p = 0; p < plane; ++p)
                                    y[(b * c.shape.c_out + o) * plane + p] += c.bias[o];
                    }
                    if (cache) cache->unfolded = std::move(xr);
                    return y;
                },
                [&](const BatchNorm2d& b) {
                    BatchNorm2d* out =
                        (update_stats && mut) ? std::get_if<BatchNorm2d>(&mut->layer) : nullptr;
                    return batchnorm_forward(b, out, x, mode == Mode::BnTrain, cache, n.id);
                },
                [&](const ReLU&) {
                    Tensor y = x;
                    for (auto& v : y.data()) v = v > 0.0f ? v : 0.0f;
                    return y;
                },
                [&](const GlobalAvgPool&) {
                    if (x.rank() != 4) layer_error(n.id, "gap input " + shape_str(x.shape()));
                    const std::size_t batch = x.dim(0), ch = x.dim(1), plane = x.dim(2) * x.dim(3);
                    Tensor y({batch, ch});
                    for (std::size_t i = 0; i < batch * ch; ++i) {
                        double s = 0.0;
                        for (std::size_t p = 0; p < plane; ++p) s += x[i * plane + p];
                        y[i] = static_cast<float>(s / static_cast<double>(plane));
                    }
                    return y;
                },
                [&](const Flatten&) { return x.reshaped({x.dim(0), x.size() / x.dim(0)}); },
            },
            n.layer);
    }

    template <typename NetT>
    Tensor run(NetT& net, const Tensor& x) const {
        if (x.rank() < 1 || batched(x.dim(0), net.input_shape) != x.shape()) {
            throw ShapeError("network input " + shape_str(x.shape()) + " does not match [B x " +
                             shape_str(net.input_shape) + "]");
        }
        constexpr bool is_mutable = !std::is_const_v<NetT>;
        Tensor h = x;
        for (auto& b : net.blocks) {
            Tensor main = h;
            for (auto& n : b.main) main = node(n, is_mutable ? mut_ptr(n) : nullptr, main);
            if (b.kind == Block::Kind::Residual) {
                Tensor sc = h;
                for (auto& n : b.shortcut) sc = node(n, is_mutable ? mut_ptr(n) : nullptr, sc);
                if (sc.shape() != main.shape()) {
                    throw ShapeError("residual branches disagree: " + shape_str(main.shape()) +
                                     " vs " + shape_str(sc.shape()));
                }
                for (std::size_t i = 0; i < main.size(); ++i) main[i] += sc[i];
            }
            h = std::move(main);
        }
        return node(net.classifier, is_mutable ? mut_ptr(net.classifier) : nullptr, h);
    }

    static LayerNode* mut_ptr(LayerNode& n) { return &n; }
    static LayerNode* mut_ptr(const LayerNode&) { return nullptr; }
};

}  // namespace

Tensor forward(Network& net, const Tensor& x, Tape* tape, ActivationTrace* trace) {
    Runner r{net.mode, net.mode == Mode::BnTrain, tape, trace};
    return r.run(net, x);
}

Tensor predict(const Network& net, const Tensor& x, ActivationTrace* trace) {
    Runner r{Mode::Eval, false, nullptr, trace};
    return r.run(net, x);
}

// ---------------------------------------------------------------------------
// Backward

namespace {

struct BackwardRunner {
    const Tape& tape;
    Gradients& grads;

    const LayerCache& cache(const std::string& id) const {
        auto it = tape.layers.find(id);
        if (it == tape.layers.end()) throw ArgumentError("backward: no tape entry for " + id);
        return it->second;
    }

    Tensor node(const LayerNode& n, const Tensor& gy) {
        const LayerCache& c = cache(n.id);
        return std::visit(
            overloaded{
                [&](const Linear& l) {
                    grads.params[n.id + ".weight"] = matmul(transpose(c.input), gy);
                    if (l.has_bias) {
                        Tensor gb({l.c_out});
                        for (std::size_t b = 0; b < gy.rows(); ++b)
                            for (std::size_t o = 0; o < l.c_out; ++o) gb[o] += gy(b, o);
                        grads.params[n.id + ".bias"] = std::move(gb);
                    }
                    return matmul(gy, transpose(l.weight));
                },
                [&](const Conv2d& conv) { return conv_backward(n.id, conv, c, gy); },
                [&](const BatchNorm2d& b) {
                    const auto [batch, channels, plane] = bn_geometry(c.input, b, n.id);
                    Tensor gx(c.input.shape());
                    const double count = static_cast<double>(batch * plane);
                    for (std::size_t ch = 0; ch < channels; ++ch) {
                        const double gamma = b.gamma[ch];
                        const double is = c.inv_std[ch];
                        double sum_g = 0.0, sum_gx = 0.0;
                        if (c.batch_stats) {
                            for (std::size_t s = 0; s < batch; ++s) {
                                const std::size_t off = (s * channels + ch) * plane;
                                for (std::size_t i = 0; i < plane; ++i) {
                                    const double g = gy[off + i] * gamma;
                                    sum_g += g;
                                    sum_gx += g * c.xhat[off + i];
                                }
                            }
                        }
                        for (std::size_t s = 0; s < batch; ++s) {
                            const std::size_t off = (s * channels + ch) * plane;
                            for (std::size_t i = 0; i < plane; ++i) {
                                const double g = gy[off + i] * gamma;
                                const double v =
                                    c.batch_stats
                                        ? is * (g - sum_g / count - c.xhat[off + i] * sum_gx / count)
                                        : is * g;
                                gx[off + i] = static_cast<float>(v);
                            }
                        }
                    }
                    return gx;
                },
                [&](const ReLU&) {
                    Tensor gx = gy;
                    for (std::size_t i = 0; i < gx.size(); ++i)
                        if (!(c.input[i] > 0.0f)) gx[i] = 0.0f;
                    return gx;
                },
                [&](const GlobalAvgPool&) {
                    const std::size_t plane = c.input.dim(2) * c.input.dim(3);
                    Tensor gx(c.input.shape());
                    const float inv = 1.0f / static_cast<float>(plane);
                    for (std::size_t i = 0; i < gy.size(); ++i)
                        for (std::size_t p = 0; p < plane; ++p) gx[i * plane + p] = gy[i] * inv;
                    return gx;
                },
                [&](const Flatten&) { return gy.reshaped(c.input.shape()); },
            },
            n.layer);
    }

    Tensor conv_backward(const std::string& id, const Conv2d& conv, const LayerCache& c,
                         const Tensor& gy) {
        const ConvShape& s = conv.shape;
        const std::size_t batch = c.input.dim(0);
        const std::size_t ho = gy.dim(2), wo = gy.dim(3), plane = ho * wo;
        const std::size_t rows = batch * plane, cols = s.column_length(), opg = s.out_per_group();
        const Tensor wr = weight_to_matrix(conv.weight, s);
        Tensor gwr({cols, s.c_out});
        Tensor gxr({s.groups * rows, cols});

        for (std::size_t g = 0; g < s.groups; ++g) {
            Tensor gyg({rows, opg});
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t o = 0; o < opg; ++o)
                    for (std::size_t p = 0; p < plane; ++p)
                        gyg(b * plane + p, o) = gy[(b * s.c_out + g * opg + o) * plane + p];
            Tensor xg({rows, cols},
                      std::vector<float>(c.unfolded.data().begin() + g * rows * cols,
                                         c.unfolded.data().begin() + (g + 1) * rows * cols));
            Tensor wg({cols, opg});
            for (std::size_t r = 0; r < cols; ++r)
                for (std::size_t o = 0; o < opg; ++o) wg(r, o) = wr(r, g * opg + o);

            const Tensor gwg = matmul(transpose(xg), gyg);
            for (std::size_t r = 0; r < cols; ++r)
                for (std::size_t o = 0; o < opg; ++o) gwr(r, g * opg + o) = gwg(r, o);
            const Tensor gxg = matmul(gyg, transpose(wg));
            std::copy(gxg.data().begin(), gxg.data().end(),
                      gxr.data().begin() + g * rows * cols);
        }
        grads.params[id + ".weight"] = matrix_to_weight(gwr, s);
        if (conv.has_bias) {
            Tensor gb({s.c_out});
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t o = 0; o < s.c_out; ++o)
                    for (std::size_t p = 0; p < plane; ++p)
                        gb[o] += gy[(b * s.c_out + o) * plane + p];
            grads.params[id + ".bias"] = std::move(gb);
        }
        return fold_activations(gxr, s, batch, c.input.dim(2), c.input.dim(3));
    }
};

}  // namespace

Gradients backward(const Network& net, const Tape& tape, const Tensor& grad_logits) {
    Gradients grads;
    BackwardRunner r{tape, grads};
    Tensor g = r.node(net.classifier, grad_logits);
    for (auto b = net.blocks.rbegin(); b != net.blocks.rend(); ++b) {
        Tensor gm = g;
        for (auto n = b->main.rbegin(); n != b->main.rend(); ++n) gm = r.node(*n, gm);
        if (b->kind == Block::Kind::Residual) {
            Tensor gs = g;
            for (auto n = b->shortcut.rbegin(); n != b->shortcut.rend(); ++n) gs = r.node(*n, gs);
            for (std::size_t i = 0; i < gm.size(); ++i) gm[i] += gs[i];
        }
        g = std::move(gm);
    }
    grads.input = std::move(g);
    return grads;
}

// ---------------------------------------------------------------------------
// Losses

Tensor softmax(const Tensor& logits) {
    const std::size_t n = logits.rows(), c = logits.cols();
    Tensor p({n, c});
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = logits.row(i);
        const float mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
        for (std::size_t j = 0; j < c; ++j)
            p(i, j) = static_cast<float>(std::exp(static_cast<double>(row[j]) - mx) / sum);
    }
    return p;
}

double kl_loss(const Tensor& student_probs, const Tensor& teacher_probs) {
    if (student_probs.shape() != teacher_probs.shape()) {
        throw ShapeError("kl_loss: " + shape_str(student_probs.shape()) + " vs " +
                         shape_str(teacher_probs.shape()));
    }
    const std::size_t n = student_probs.rows();
    double total = 0.0;
    for (std::size_t i = 0; i < student_probs.size(); ++i) {
        const double t = teacher_probs[i];
        if (t <= 0.0) continue;
        const double s = std::max(static_cast<double>(student_probs[i]), 1e-12);
        total += t * (std::log(t) - std::log(s));
    }
    return n ? total / static_cast<double>(n) : 0.0;
}

Tensor kl_loss_grad(const Tensor& logits, const Tensor& teacher_probs) {
    Tensor g = softmax(logits);
    if (g.shape() != teacher_probs.shape()) throw ShapeError("kl_loss_grad: shape mismatch");
    const float inv = 1.0f / static_cast<float>(logits.rows());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = (g[i] - teacher_probs[i]) * inv;
    return g;
}

double cross_entropy(const Tensor& logits, std::span<const int> labels) {
    const Tensor p = softmax(logits);
    if (labels.size() != p.rows()) throw ShapeError("cross_entropy: label count mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        total -= std::log(std::max(static_cast<double>(p(i, static_cast<std::size_t>(labels[i]))),
                                   1e-12));
    }
    return total / static_cast<double>(labels.size());
}

Tensor cross_entropy_grad(const Tensor& logits, std::span<const int> labels) {
    Tensor g = softmax(logits);
    if (labels.size() != g.rows()) throw ShapeError("cross_entropy_grad: label count mismatch");
    const float inv = 1.0f / static_cast<float>(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        g(i, static_cast<std::size_t>(labels[i])) -= 1.0f;
        for (std::size_t j = 0; j < g.cols(); ++j) g(i, j) *= inv;
    }
    return g;
}

LossAndGradients backward(Network& net, const Tensor& x, const Tensor& teacher_probs) {
    Tape tape;
    const Tensor logits = forward(net, x, &tape);
    LossAndGradients out;
    out.loss = kl_loss(softmax(logits), teacher_probs);
    out.grads = backward(net, tape, kl_loss_grad(logits, teacher_probs));
    return out;
}

// ---------------------------------------------------------------------------
// Optimization

template <typename T>
void sgd_step(BasicTensor<T>& param, const BasicTensor<T>& grad, BasicTensor<T>& velocity,
              const SgdConfig& cfg) {
    if (grad.shape() != param.shape()) {
        throw ShapeError("sgd_step: gradient " + shape_str(grad.shape()) + " for parameter " +
                         shape_str(param.shape()));
    }
    if (velocity.shape() != param.shape()) velocity = BasicTensor<T>(param.shape());
    const T mu = static_cast<T>(cfg.momentum);
    const T wd = static_cast<T>(cfg.weight_decay);
    const T lr = static_cast<T>(cfg.lr);
    for (std::size_t i = 0; i < param.size(); ++i) {
        velocity[i] = mu * velocity[i] + grad[i] + wd * param[i];
        param[i] -= lr * velocity[i];
    }
}

template void sgd_step(BasicTensor<float>&, const BasicTensor<float>&, BasicTensor<float>&,
                       const SgdConfig&);
template void sgd_step(BasicTensor<double>&, const BasicTensor<double>&, BasicTensor<double>&,
                       const SgdConfig&);

void sgd_step(Network& net, const Gradients& grads, const SgdConfig& cfg, SgdState& state) {
    auto params = net.tensors();
    for (const auto& [name, g] : grads.params) {
        auto it = params.find(name);
        if (it == params.end()) throw ArgumentError("sgd_step: unknown parameter " + name);
        sgd_step(*it->second, g, state.velocity[name], cfg);
    }
}

std::size_t argmax_row(const Tensor& logits, std::size_t row) {
    const auto r = logits.row(row);
    return static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
}

Network train_toy_teacher(Network net, const Dataset& data, const TrainConfig& cfg, Rng& rng) {
    net.validate();
    if (cfg.epochs > 0 && data.size() == 0) throw ArgumentError("training set is empty");
    SgdState state;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    net.mode = Mode::BnTrain;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            if (end - start < 2) continue;  // batch statistics need two samples
            std::span<const std::size_t> idx(order.data() + start, end - start);
            const Tensor x = data.images(idx);
            const auto labels = labels_of(data, idx);
            Tape tape;
            const Tensor logits = forward(net, x, &tape);
            const double loss = cross_entropy(logits, labels);
            if (!std::isfinite(loss)) {
                throw TrainingError("training diverged at epoch " + std::to_string(epoch));
            }
            const Gradients g = backward(net, tape, cross_entropy_grad(logits, labels));
            sgd_step(net, g, cfg.sgd, state);
        }
    }
    net.mode = Mode::Eval;
    return net;
}

double evaluate(const Network& net, const Dataset& data, std::size_t batch_size) {
    if (data.size() == 0) throw ArgumentError("evaluate: dataset is empty");
    std::size_t correct = 0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        const std::size_t end = std::min(data.size(), start + batch_size);
        idx.resize(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const Tensor logits = predict(net, data.images(idx));
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (static_cast<int>(argmax_row(logits, i)) == data.label(idx[i])) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace pqnet
