#pragma once

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pqnet/data.hpp"
#include "pqnet/netgraph.hpp"
#include "pqnet/quantizer.hpp"

namespace pqnet {

enum class LayerKind : std::uint8_t { Linear = 0, Conv = 1 };

/// Largest codebook a layer may use; indices fit in two bytes.
inline constexpr std::size_t kMaxCodewords = 65535;

/// Shape information needed to go between a layer's weight tensor and its
/// 2D quantization matrix (rows × C_out).
struct LayerGeometry {
    LayerKind kind = LayerKind::Linear;
    std::size_t c_in = 0;
    std::size_t c_out = 0;
    ConvShape conv;  // meaningful for Conv only

    static LayerGeometry of(const Layer& layer);

    std::size_t rows() const { return kind == LayerKind::Conv ? conv.column_length() : c_in; }
    std::size_t cols() const { return c_out; }
    Shape weight_shape() const;
    /// Weight tensor → [rows × cols] matrix, and back.
    Tensor to_matrix(const Tensor& weight) const;
    Tensor from_matrix(const Tensor& matrix) const;

    bool operator==(const LayerGeometry&) const = default;
};

/// One quantized weight tensor.
struct QuantizedLayer {
    std::string id;
    LayerGeometry geometry;
    Codebook codebook;
    Assignments assignments;

    std::size_t d() const { return codebook.d(); }
    std::size_t k() const { return codebook.k(); }
    /// Subvectors per column.
    std::size_t m() const { return geometry.rows() / codebook.d(); }
};

/// Dense weight from codewords: pure lookup. When `index_reads` is given it
/// is incremented once per index consumed.
Tensor reconstruct_layer(const QuantizedLayer& q, std::size_t* index_reads = nullptr);

/// Per-subvector gradient of a weight gradient, averaged per codeword:
/// (1/|I_c|) Σ_{p∈I_c} ∂L/∂b_p. Codewords without members get zero.
DTensor codeword_gradients(const QuantizedLayer& q, const Tensor& weight_grad);

enum class Regime { Small, Large };

std::optional<Regime> parse_regime(const std::string& s);
const char* to_string(Regime r);

struct LayerPlan {
    std::string id;
    std::size_t d = 0;
    std::size_t k_requested = 0;
};

struct LayerOverride {
    std::optional<std::size_t> d;
    std::optional<std::size_t> k;
};

/// Which layers to quantize and with which subvector size and codebook size.
///
/// Small blocks: K×K convolutions use d = K·K and pointwise ones d = 4.
/// Large blocks: d = 2·K·K and d = 8. The classifier always uses
/// `classifier_d` and `classifier_k`. The first convolution is skipped.
struct CompressionPlan {
    Regime regime = Regime::Small;
    std::size_t k = 256;
    std::size_t classifier_k = 2048;
    std::size_t classifier_d = 4;
    bool skip_first_conv = true;
    std::set<std::string> skip;
    /// When set, only these layers are quantized (still in network order).
    std::optional<std::vector<std::string>> only;
    std::map<std::string, LayerOverride> overrides;
    /// Give every layer one codeword per subvector (lossless codebooks).
    bool exact = false;
    bool clamp_k = true;

    std::vector<LayerPlan> resolve(const Network& net) const;
};

enum class FinetuneObjective { Distillation, Labels };

struct FinetuneConfig {
    std::size_t layer_iterations = 100;
    std::size_t batch_size = 32;
    SgdConfig sgd{0.01, 1e-4, 0.9};
    std::size_t global_epochs = 3;
    std::size_t calibration_batch = 128;
    FinetuneObjective objective = FinetuneObjective::Distillation;

    /// Values used for ImageNet-scale runs.
    static FinetuneConfig imagenet_scale();
    void validate() const;
};

/// Desk-scale EM defaults (1024 sampled rows per iteration).
EMConfig desk_em_config();

struct LayerReport {
    std::string id;
    std::size_t d = 0;
    std::size_t k = 0;
    std::size_t m = 0;
    std::size_t subvectors = 0;
    double pq_error_em = 0.0;           // ‖W − Ŵ‖² after EM
    double activation_error_em = 0.0;   // ‖xW − xŴ‖² after EM
    double pq_error_ft = 0.0;           // after codeword finetuning
    double activation_error_ft = 0.0;
    double output_energy = 0.0;         // ‖xW‖² on the same activations
    double final_loss = 0.0;
    std::size_t resolution_rounds = 0;
    std::size_t clusters_resolved = 0;

    double relative_activation_error_em() const;
};

struct PipelineReport {
    std::uint64_t seed = 0;
    bool activation_aware = true;
    std::vector<LayerReport> layers;
    std::vector<double> global_losses;  // mean loss per global epoch
};

/// Quantized student: a dense network whose quantized weights are
/// reconstructions, plus the codebooks behind them.
struct CompressedStudent {
    Network net;
    std::vector<QuantizedLayer> layers;
    std::uint64_t seed = 0;

    QuantizedLayer* find(const std::string& id);
    /// Write every layer's reconstruction into `net`.
    void install();
    void install(const QuantizedLayer& q);
};

struct PipelineOptions {
    CompressionPlan plan;
    EMConfig em = desk_em_config();
    FinetuneConfig ft;
    /// Activation-weighted k-means (true) or plain weight-space PQ (false).
    bool activation_aware = true;
    bool global_finetune = true;
    std::uint64_t seed = 0;
    /// Called before each layer is quantized with the partially quantized
    /// student.
    std::function<void(const std::string&, const Network&)> on_layer_start;
};

/// Teacher output distributions over a whole dataset, computed once.
class TeacherTargets {
public:
    TeacherTargets(const Network& teacher, const Dataset& data, std::size_t batch_size = 256);
    Tensor rows(std::span<const std::size_t> indices) const;

private:
    Tensor probs_;
};

struct PipelineResult {
    CompressedStudent student;
    PipelineReport report;
};

/// Sequentially quantize every planned layer on the student's current
/// activations, finetune each layer's codewords, then finetune all
/// codewords jointly with BatchNorm statistics refreshed.
/// Labels are read only with FinetuneObjective::Labels.
PipelineResult quantize_network(const Network& teacher, const Dataset& data,
                                const PipelineOptions& options);

/// Generator quantize_network hands to global_finetune for a given seed.
Rng global_finetune_rng(std::uint64_t seed);

/// Distill (or label-train) one layer's codewords with assignments fixed.
/// Returns the final batch loss.
/// `targets` may be null only for FinetuneObjective::Labels.
double finetune_layer_codebook(CompressedStudent& student, const std::string& layer_id,
                               const TeacherTargets* targets, const Dataset& data,
                               const FinetuneConfig& ft, Rng& rng);

/// Finetune all codewords at once with BatchNorm in training mode. Learning
/// rate decays ×0.1 every max(1, epochs/3) epochs. Returns mean loss per
/// epoch.
std::vector<double> global_finetune(CompressedStudent& student, const TeacherTargets* targets,
                                    const Dataset& data, const FinetuneConfig& ft, Rng& rng);

enum class AblationMode { ActDistill, NoActDistill, ActLabels };

std::optional<AblationMode> parse_ablation_mode(const std::string& s);
const char* to_string(AblationMode m);

struct AblationRow {
    AblationMode mode;
    std::size_t k = 0;
    double relative_activation_error_em = 0.0;  // summed over layers
    double accuracy_before_global = 0.0;
    double accuracy = 0.0;
    std::size_t compressed_bytes = 0;
};

struct AblationReport {
    double teacher_accuracy = 0.0;
    std::vector<AblationRow> rows;
};

/// Run the pipeline once per (mode, k) pair. `train` supplies calibration
/// and finetuning images (and labels for ActLabels); `test` is scored.
AblationReport ablation_run(const Network& teacher, const Dataset& train, const Dataset& test,
                            const PipelineOptions& base, std::span<const AblationMode> modes,
                            std::span<const std::size_t> k_values);

/// Options for one ablation mode, derived from `base`.
PipelineOptions ablation_options(const PipelineOptions& base, AblationMode mode, std::size_t k);

}  // namespace pqnet
