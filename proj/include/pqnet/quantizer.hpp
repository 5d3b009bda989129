#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "pqnet/tensor.hpp"

namespace pqnet {

/// k codewords of dimension d, stored as rows of a k×d matrix.
struct Codebook {
    DTensor centroids;

    std::size_t k() const { return centroids.rows(); }
    std::size_t d() const { return centroids.cols(); }
};

/// Codeword index per subvector. Subvector t of column j has global index
/// j·m + t.
struct Assignments {
    std::vector<std::uint32_t> indices;

    std::size_t size() const noexcept { return indices.size(); }
    std::vector<std::size_t> counts(std::size_t k) const;
};

/// Activation statistics defining the weighted metric (c−v)ᵀG(c−v).
struct GramWeight {
    DTensor gram;       // x̃ᵀx̃, d×d
    DTensor projector;  // x̃⁺x̃, d×d
    DTensor factor;     // F with FᵀF = G, so ‖F(c−v)‖² is the metric
    std::size_t row_count = 0;

    std::size_t dim() const { return gram.rows(); }

    static GramWeight from_activations(const DTensor& unrolled);
    /// G = I; the metric reduces to plain squared Euclidean distance.
    static GramWeight identity(std::size_t d);
};

struct EMConfig {
    std::size_t n_iter = 100;
    std::size_t sample_rows = 10000;
    double epsilon = 1e-8;
    std::size_t k_requested = 256;
    std::uint64_t seed = 0;
    /// Apply min(k, C_out·m/4). Disable only for exact-codebook runs.
    bool clamp_k = true;
    std::size_t max_resolution_rounds = 10;

    void validate() const;
};

struct KMeansStats {
    std::size_t k_effective = 0;
    std::size_t iterations = 0;
    /// Largest number of resolution rounds any single iteration needed.
    std::size_t max_resolution_rounds = 0;
    std::size_t empty_clusters_resolved = 0;
};

struct KMeansResult {
    Codebook codebook;
    Assignments assignments;
    KMeansStats stats;
};

/// Split each row of x [B×C_in] into m subvectors and stack them:
/// row b·m+s of the result is subvector s of row b.
DTensor unroll(const DTensor& x, std::size_t m);

/// Columns of w [rows×cols] cut into m contiguous subvectors each, returned
/// as an (cols·m)×(rows/m) matrix of subvectors.
template <typename T>
BasicTensor<T> split_columns(const BasicTensor<T>& w, std::size_t m);

/// Inverse of split_columns for a rows×cols matrix.
template <typename T>
BasicTensor<T> join_columns(const BasicTensor<T>& subvectors, std::size_t rows, std::size_t cols);

/// k distinct subvectors drawn uniformly without replacement.
Codebook init_codebook(const DTensor& subvectors, std::size_t k, Rng& rng);

/// min(k_requested, floor(c_out·m/4)), never below 1.
std::size_t clamp_centroids(std::size_t k_requested, std::size_t c_out, std::size_t m);

/// Nearest codeword under the weighted metric, lowest index on ties.
Assignments estep(const DTensor& subvectors, const Codebook& codebook, const GramWeight& gw);

/// Projected cluster means. Empty clusters keep their previous centroid.
Codebook mstep(const DTensor& subvectors, const Assignments& assignments, const Codebook& codebook,
               const GramWeight& gw);

struct Resolution {
    Codebook codebook;
    Assignments assignments;
    std::size_t rounds = 0;
    std::size_t splits = 0;
};

/// Split the most populated codeword into c₀ ± e for every empty cluster,
/// re-running the E-step after each split. Throws DegenerateDataError if
/// clusters remain empty after `max_rounds` passes.
Resolution resolve_empty_clusters(const DTensor& subvectors, Codebook codebook,
                                  Assignments assignments, const GramWeight& gw, double epsilon,
                                  Rng& rng, std::size_t max_rounds = 10);

/// Activation-aware k-means. `unrolled_activations` is x̃ [(B·m)×d]; when
/// absent the metric is Euclidean and the result is plain PQ.
KMeansResult weighted_kmeans(const DTensor& subvectors,
                             const std::optional<DTensor>& unrolled_activations,
                             const EMConfig& config);

/// Same EM loop from a caller-provided codebook and fixed weight. No
/// subsampling; used for objective tracking.
KMeansResult weighted_kmeans_from(const DTensor& subvectors, const GramWeight& gw, Codebook init,
                                  std::size_t n_iter, double epsilon, Rng& rng,
                                  std::size_t max_resolution_rounds = 10);

/// Σ_p (c_{a(p)} − v_p)ᵀ G (c_{a(p)} − v_p).
double weighted_objective(const DTensor& subvectors, const Codebook& codebook,
                          const Assignments& assignments, const GramWeight& gw);

/// Ŵ [rows×cols] assembled from assigned codewords.
DTensor assemble(const Codebook& codebook, const Assignments& assignments, std::size_t rows,
                 std::size_t cols);

/// ‖W − Ŵ‖².
double pq_error(const DTensor& w, const Codebook& codebook, const Assignments& assignments);

/// ‖xW − xŴ‖².
double activation_error(const DTensor& w, const Codebook& codebook, const Assignments& assignments,
                        const DTensor& x);

}  // namespace pqnet
