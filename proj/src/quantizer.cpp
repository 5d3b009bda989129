#include "pqnet/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "pqnet/linalg.hpp"
#include "pqnet/parallel.hpp"

namespace pqnet {

std::vector<std::size_t> Assignments::counts(std::size_t k) const {
    std::vector<std::size_t> c(k, 0);
    for (auto i : indices) {
        if (i >= k) throw CorruptionError("assignment index " + std::to_string(i) + " >= k=" +
                                          std::to_string(k));
        ++c[i];
    }
    return c;
}

GramWeight GramWeight::from_activations(const DTensor& unrolled) {
    GramWeight gw;
    gw.row_count = unrolled.rows();
    gw.gram = pqnet::gram(unrolled);
    const std::size_t d = gw.gram.rows();

    const auto eig = symmetric_eigen(gw.gram);
    const double lambda_max = d ? std::max(0.0, eig.values[d - 1]) : 0.0;
    const double cutoff = kRankTolerance * kRankTolerance * lambda_max;
    gw.projector = DTensor({d, d});
    gw.factor = DTensor({d, d});
    for (std::size_t e = 0; e < d; ++e) {
        const double lambda = eig.values[e];
        const double scale = lambda > 0.0 ? std::sqrt(lambda) : 0.0;
        for (std::size_t j = 0; j < d; ++j) gw.factor(e, j) = scale * eig.vectors(j, e);
        if (lambda_max <= 0.0 || lambda <= cutoff) continue;
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j)
                gw.projector(i, j) += eig.vectors(i, e) * eig.vectors(j, e);
    }
    return gw;
}

GramWeight GramWeight::identity(std::size_t d) {
    GramWeight gw;
    gw.gram = DTensor::identity(d);
    gw.projector = DTensor::identity(d);
    gw.factor = DTensor::identity(d);
    gw.row_count = d;
    return gw;
}

void EMConfig::validate() const {
    if (n_iter < 1) throw ArgumentError("EMConfig: n_iter must be >= 1");
    if (sample_rows < 1) throw ArgumentError("EMConfig: sample_rows must be >= 1");
    if (!(epsilon > 0.0)) throw ArgumentError("EMConfig: epsilon must be > 0");
    if (k_requested < 1) throw ArgumentError("EMConfig: k must be >= 1");
}

DTensor unroll(const DTensor& x, std::size_t m) {
    const std::size_t c_in = x.cols();
    if (m == 0 || c_in % m != 0) {
        throw ShapeError("unroll: C_in=" + std::to_string(c_in) + " not divisible by m=" +
                         std::to_string(m));
    }
    // Row-major storage makes this a pure reinterpretation.
    return x.reshaped({x.rows() * m, c_in / m});
}

template <typename T>
BasicTensor<T> split_columns(const BasicTensor<T>& w, std::size_t m) {
    const std::size_t rows = w.rows(), cols = w.cols();
    if (m == 0 || rows % m != 0) {
        throw ShapeError("split_columns: column length " + std::to_string(rows) +
                         " not divisible by m=" + std::to_string(m));
    }
    const std::size_t d = rows / m;
    BasicTensor<T> out({cols * m, d});
    for (std::size_t j = 0; j < cols; ++j)
        for (std::size_t t = 0; t < m; ++t)
            for (std::size_t i = 0; i < d; ++i) out(j * m + t, i) = w(t * d + i, j);
    return out;
}

template <typename T>
BasicTensor<T> join_columns(const BasicTensor<T>& subvectors, std::size_t rows, std::size_t cols) {
    const std::size_t d = subvectors.cols();
    if (d == 0 || rows % d != 0 || subvectors.rows() * d != rows * cols) {
        throw ShapeError("join_columns: " + shape_str(subvectors.shape()) +
                         " cannot form a " + std::to_string(rows) + "x" + std::to_string(cols) +
                         " matrix");
    }
    const std::size_t m = rows / d;
    BasicTensor<T> w({rows, cols});
    for (std::size_t j = 0; j < cols; ++j)
        for (std::size_t t = 0; t < m; ++t)
            for (std::size_t i = 0; i < d; ++i) w(t * d + i, j) = subvectors(j * m + t, i);
    return w;
}

template BasicTensor<float> split_columns(const BasicTensor<float>&, std::size_t);
template BasicTensor<double> split_columns(const BasicTensor<double>&, std::size_t);
template BasicTensor<float> join_columns(const BasicTensor<float>&, std::size_t, std::size_t);
template BasicTensor<double> join_columns(const BasicTensor<double>&, std::size_t, std::size_t);

Codebook init_codebook(const DTensor& subvectors, std::size_t k, Rng& rng) {
    const std::size_t n = subvectors.rows();
    if (k == 0) throw ArgumentError("init_codebook: k must be positive");
    if (n < k) {
        throw ArgumentError("init_codebook: " + std::to_string(n) + " subvectors < k=" +
                            std::to_string(k) + " (clamp k first)");
    }
    return {sample_rows(subvectors, k, rng)};
}

std::size_t clamp_centroids(std::size_t k_requested, std::size_t c_out, std::size_t m) {
    return std::max<std::size_t>(1, std::min(k_requested, c_out * m / 4));
}

namespace {

// Rows of `v` mapped through the metric factor: out = v·Fᵀ.
DTensor apply_factor(const DTensor& v, const DTensor& factor) {
    return matmul(v, transpose(factor));
}

void check_dims(const DTensor& subvectors, const Codebook& codebook, const GramWeight& gw) {
    if (subvectors.cols() != codebook.d() || gw.dim() != codebook.d()) {
        throw ShapeError("dimension mismatch: subvectors d=" + std::to_string(subvectors.cols()) +
                         ", codebook d=" + std::to_string(codebook.d()) +
                         ", weight d=" + std::to_string(gw.dim()));
    }
}

}  // namespace

Assignments estep(const DTensor& subvectors, const Codebook& codebook, const GramWeight& gw) {
    check_dims(subvectors, codebook, gw);
    const DTensor z = apply_factor(subvectors, gw.factor);
    const DTensor y = apply_factor(codebook.centroids, gw.factor);
    const std::size_t n = z.rows(), k = y.rows(), d = z.cols();

    Assignments out;
    out.indices.resize(n);
    parallel_for(n, [&](std::size_t begin, std::size_t end) {
        for (std::size_t p = begin; p < end; ++p) {
            const double* zp = z.data().data() + p * d;
            double best = std::numeric_limits<double>::infinity();
            std::uint32_t best_c = 0;
            for (std::size_t c = 0; c < k; ++c) {
                const double* yc = y.data().data() + c * d;
                double dist = 0.0;
                for (std::size_t i = 0; i < d; ++i) {
                    const double diff = yc[i] - zp[i];
                    dist += diff * diff;
                }
                if (dist < best) {
                    best = dist;
                    best_c = static_cast<std::uint32_t>(c);
                }
            }
            out.indices[p] = best_c;
        }
    });
    return out;
}

Codebook mstep(const DTensor& subvectors, const Assignments& assignments, const Codebook& codebook,
               const GramWeight& gw) {
    check_dims(subvectors, codebook, gw);
    if (assignments.size() != subvectors.rows()) {
        throw ShapeError("mstep: " + std::to_string(assignments.size()) + " assignments for " +
                         std::to_string(subvectors.rows()) + " subvectors");
    }
    const std::size_t k = codebook.k(), d = codebook.d();
    DTensor sums({k, d});
    const auto counts = assignments.counts(k);
    for (std::size_t p = 0; p < subvectors.rows(); ++p) {
        const auto c = assignments.indices[p];
        for (std::size_t i = 0; i < d; ++i) sums(c, i) += subvectors(p, i);
    }
    Codebook out = codebook;
    for (std::size_t c = 0; c < k; ++c) {
        if (counts[c] == 0) continue;
        const double inv = 1.0 / static_cast<double>(counts[c]);
        for (std::size_t i = 0; i < d; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) acc += gw.projector(i, j) * sums(c, j);
            out.centroids(c, i) = acc * inv;
        }
    }
    return out;
}

Resolution resolve_empty_clusters(const DTensor& subvectors, Codebook codebook,
                                  Assignments assignments, const GramWeight& gw, double epsilon,
                                  Rng& rng, std::size_t max_rounds) {
    const std::size_t k = codebook.k(), d = codebook.d();
    Resolution res{std::move(codebook), std::move(assignments), 0, 0};

    auto empties = [&] {
        std::vector<std::size_t> out;
        const auto counts = res.assignments.counts(k);
        for (std::size_t c = 0; c < k; ++c)
            if (counts[c] == 0) out.push_back(c);
        return out;
    };

    for (auto pending = empties(); !pending.empty(); pending = empties()) {
        if (res.rounds == max_rounds) {
            throw DegenerateDataError("cluster " + std::to_string(pending.front()) +
                                          " still empty after " + std::to_string(max_rounds) +
                                          " resolution rounds",
                                      pending.front());
        }
        ++res.rounds;
        for (const std::size_t i : pending) {
            const auto counts = res.assignments.counts(k);
            if (counts[i] != 0) continue;
            const std::size_t c0 = static_cast<std::size_t>(
                std::max_element(counts.begin(), counts.end()) - counts.begin());
            const DTensor e = gaussian_noise<double>({d}, epsilon, rng);
            for (std::size_t j = 0; j < d; ++j) {
                const double base = res.codebook.centroids(c0, j);
                res.codebook.centroids(c0, j) = base + e[j];
                res.codebook.centroids(i, j) = base - e[j];
            }
            res.assignments = estep(subvectors, res.codebook, gw);
            ++res.splits;
        }
    }
    return res;
}

namespace {

void em_pass(const DTensor& subvectors, const GramWeight& gw, double epsilon, Rng& rng,
             std::size_t max_rounds, KMeansResult& state) {
    auto assignments = estep(subvectors, state.codebook, gw);
    auto res = resolve_empty_clusters(subvectors, std::move(state.codebook), std::move(assignments),
                                      gw, epsilon, rng, max_rounds);
    state.stats.max_resolution_rounds = std::max(state.stats.max_resolution_rounds, res.rounds);
    state.stats.empty_clusters_resolved += res.splits;
    state.codebook = mstep(subvectors, res.assignments, res.codebook, gw);
    state.assignments = std::move(res.assignments);
    ++state.stats.iterations;
}

}  // namespace

KMeansResult weighted_kmeans_from(const DTensor& subvectors, const GramWeight& gw, Codebook init,
                                  std::size_t n_iter, double epsilon, Rng& rng,
                                  std::size_t max_resolution_rounds) {
    KMeansResult state;
    state.codebook = std::move(init);
    state.stats.k_effective = state.codebook.k();
    for (std::size_t it = 0; it < n_iter; ++it)
        em_pass(subvectors, gw, epsilon, rng, max_resolution_rounds, state);
    return state;
}

KMeansResult weighted_kmeans(const DTensor& subvectors,
                             const std::optional<DTensor>& unrolled_activations,
                             const EMConfig& config) {
    config.validate();
    const std::size_t n = subvectors.rows(), d = subvectors.cols();
    if (unrolled_activations && unrolled_activations->cols() != d) {
        throw ShapeError("weighted_kmeans: activations have " +
                         std::to_string(unrolled_activations->cols()) + " columns, subvectors " +
                         std::to_string(d));
    }
    const std::size_t k =
        config.clamp_k ? clamp_centroids(config.k_requested, n, 1) : config.k_requested;

    Rng rng(config.seed);
    KMeansResult state;
    state.codebook = init_codebook(subvectors, k, rng);
    state.stats.k_effective = k;

    const GramWeight full = unrolled_activations ? GramWeight::from_activations(*unrolled_activations)
                                                 : GramWeight::identity(d);
    const bool subsample = unrolled_activations && config.sample_rows < unrolled_activations->rows();

    for (std::size_t it = 0; it < config.n_iter; ++it) {
        if (subsample) {
            const GramWeight gw = GramWeight::from_activations(
                sample_rows(*unrolled_activations, config.sample_rows, rng));
            em_pass(subvectors, gw, config.epsilon, rng, config.max_resolution_rounds, state);
        } else {
            em_pass(subvectors, full, config.epsilon, rng, config.max_resolution_rounds, state);
        }
    }
    state.assignments = estep(subvectors, state.codebook, full);
    return state;
}

double weighted_objective(const DTensor& subvectors, const Codebook& codebook,
                          const Assignments& assignments, const GramWeight& gw) {
    check_dims(subvectors, codebook, gw);
    const std::size_t d = codebook.d();
    double total = 0.0;
    std::vector<double> diff(d);
    for (std::size_t p = 0; p < subvectors.rows(); ++p) {
        const auto c = assignments.indices.at(p);
        for (std::size_t i = 0; i < d; ++i) diff[i] = codebook.centroids(c, i) - subvectors(p, i);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) total += diff[i] * gw.gram(i, j) * diff[j];
    }
    return total;
}

DTensor assemble(const Codebook& codebook, const Assignments& assignments, std::size_t rows,
                 std::size_t cols) {
    const std::size_t d = codebook.d(), k = codebook.k();
    DTensor subvectors({assignments.size(), d});
    for (std::size_t p = 0; p < assignments.size(); ++p) {
        const auto c = assignments.indices[p];
        if (c >= k) throw CorruptionError("codeword index " + std::to_string(c) + " >= k");
        std::copy_n(codebook.centroids.row(c).begin(), d, subvectors.row(p).begin());
    }
    return join_columns(subvectors, rows, cols);
}

double pq_error(const DTensor& w, const Codebook& codebook, const Assignments& assignments) {
    const DTensor w_hat = assemble(codebook, assignments, w.rows(), w.cols());
    double total = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double diff = w[i] - w_hat[i];
        total += diff * diff;
    }
    return total;
}

double activation_error(const DTensor& w, const Codebook& codebook, const Assignments& assignments,
                        const DTensor& x) {
    DTensor delta = assemble(codebook, assignments, w.rows(), w.cols());
    for (std::size_t i = 0; i < w.size(); ++i) delta[i] = w[i] - delta[i];
    const DTensor y = matmul(x, delta);
    double total = 0.0;
    for (const double v : y.data()) total += v * v;
    return total;
}

}  // namespace pqnet
