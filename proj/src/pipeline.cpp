#include "pqnet/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pqnet/modelio.hpp"

namespace pqnet {

// ---------------------------------------------------------------------------
// Layer geometry and reconstruction

LayerGeometry LayerGeometry::of(const Layer& layer) {
    LayerGeometry g;
    if (const auto* l = std::get_if<Linear>(&layer)) {
        g.kind = LayerKind::Linear;
        g.c_in = l->c_in;
        g.c_out = l->c_out;
    } else if (const auto* c = std::get_if<Conv2d>(&layer)) {
        g.kind = LayerKind::Conv;
        g.c_in = c->shape.c_in;
        g.c_out = c->shape.c_out;
        g.conv = c->shape;
    } else {
        throw ArgumentError("only linear and conv layers carry quantizable weights");
    }
    return g;
}

Shape LayerGeometry::weight_shape() const {
    return kind == LayerKind::Conv ? conv.weight_shape() : Shape{c_in, c_out};
}

Tensor LayerGeometry::to_matrix(const Tensor& weight) const {
    if (kind == LayerKind::Conv) return weight_to_matrix(weight, conv);
    if (weight.shape() != Shape{c_in, c_out}) {
        throw ShapeError("linear weight " + shape_str(weight.shape()) + " expected [" +
                         std::to_string(c_in) + "x" + std::to_string(c_out) + "]");
    }
    return weight;
}

Tensor LayerGeometry::from_matrix(const Tensor& matrix) const {
    if (kind == LayerKind::Conv) return matrix_to_weight(matrix, conv);
    if (matrix.shape() != Shape{c_in, c_out}) {
        throw ShapeError("linear matrix " + shape_str(matrix.shape()) + " expected [" +
                         std::to_string(c_in) + "x" + std::to_string(c_out) + "]");
    }
    return matrix;
}

Tensor reconstruct_layer(const QuantizedLayer& q, std::size_t* index_reads) {
    const std::size_t rows = q.geometry.rows(), cols = q.geometry.cols();
    const std::size_t d = q.d(), k = q.k();
    if (d == 0 || rows % d != 0 || q.assignments.size() * d != rows * cols) {
        throw CorruptionError("layer " + q.id + ": codebook d=" + std::to_string(d) + " and " +
                              std::to_string(q.assignments.size()) +
                              " assignments do not cover a " + std::to_string(rows) + "x" +
                              std::to_string(cols) + " matrix");
    }
    const std::size_t m = rows / d;
    Tensor matrix({rows, cols});
    for (std::size_t j = 0; j < cols; ++j) {
        for (std::size_t t = 0; t < m; ++t) {
            const std::uint32_t c = q.assignments.indices[j * m + t];
            if (index_reads) ++*index_reads;
            if (c >= k) {
                throw CorruptionError("layer " + q.id + ": index " + std::to_string(c) +
                                      " >= k=" + std::to_string(k));
            }
            for (std::size_t i = 0; i < d; ++i)
                matrix(t * d + i, j) = static_cast<float>(q.codebook.centroids(c, i));
        }
    }
    return q.geometry.from_matrix(matrix);
}

DTensor codeword_gradients(const QuantizedLayer& q, const Tensor& weight_grad) {
    const Tensor gm = q.geometry.to_matrix(weight_grad);
    const Tensor per_subvector = split_columns(gm, q.m());
    const std::size_t k = q.k(), d = q.d();
    DTensor out({k, d});
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t p = 0; p < per_subvector.rows(); ++p) {
        const auto c = q.assignments.indices[p];
        ++counts[c];
        for (std::size_t i = 0; i < d; ++i) out(c, i) += per_subvector(p, i);
    }
    for (std::size_t c = 0; c < k; ++c) {
        if (counts[c] == 0) continue;
        for (std::size_t i = 0; i < d; ++i) out(c, i) /= static_cast<double>(counts[c]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Plans and configs

std::optional<Regime> parse_regime(const std::string& s) {
    if (s == "small") return Regime::Small;
    if (s == "large") return Regime::Large;
    return std::nullopt;
}

const char* to_string(Regime r) { return r == Regime::Small ? "small" : "large"; }

std::vector<LayerPlan> CompressionPlan::resolve(const Network& net) const {
    std::string first_conv;
    for (const auto& id : net.quantizable_ids()) {
        if (std::holds_alternative<Conv2d>(net.at(id).layer)) {
            first_conv = id;
            break;
        }
    }
    std::vector<LayerPlan> out;
    for (const auto& id : net.quantizable_ids()) {
        if (only && std::find(only->begin(), only->end(), id) == only->end()) continue;
        if (skip.count(id)) continue;
        if (skip_first_conv && id == first_conv) continue;

        const LayerNode& node = net.at(id);
        const LayerGeometry geom = LayerGeometry::of(node.layer);
        const bool is_classifier = id == net.classifier.id;
        const std::size_t scale = regime == Regime::Small ? 1 : 2;

        LayerPlan lp{id, 0, 0};
        if (is_classifier) {
            lp.d = classifier_d;
            lp.k_requested = classifier_k;
        } else if (geom.kind == LayerKind::Conv && geom.conv.k > 1) {
            lp.d = scale * geom.conv.k * geom.conv.k;
            lp.k_requested = k;
        } else {
            lp.d = 4 * scale;
            lp.k_requested = k;
        }
        if (auto it = overrides.find(id); it != overrides.end()) {
            if (it->second.d) lp.d = *it->second.d;
            if (it->second.k) lp.k_requested = *it->second.k;
        }
        if (lp.d == 0 || geom.rows() % lp.d != 0) {
            throw ShapeError("layer " + id + ": subvector size d=" + std::to_string(lp.d) +
                             " does not divide column length " + std::to_string(geom.rows()) +
                             "; pick another regime or override d");
        }
        if (exact) lp.k_requested = geom.rows() / lp.d * geom.cols();
        if (lp.k_requested == 0 || lp.k_requested > kMaxCodewords) {
            throw ArgumentError("layer " + id + ": k=" + std::to_string(lp.k_requested) +
                                " outside [1, " + std::to_string(kMaxCodewords) + "]");
        }
        out.push_back(lp);
    }
    return out;
}

FinetuneConfig FinetuneConfig::imagenet_scale() {
    FinetuneConfig ft;
    ft.layer_iterations = 2500;
    ft.batch_size = 128;
    ft.global_epochs = 9;
    ft.calibration_batch = 1024;
    return ft;
}

void FinetuneConfig::validate() const {
    if (batch_size == 0) throw ArgumentError("finetune batch size must be positive");
    if (calibration_batch == 0) throw ArgumentError("calibration batch must be positive");
}

EMConfig desk_em_config() {
    EMConfig em;
    em.n_iter = 100;
    em.sample_rows = 1024;
    return em;
}

double LayerReport::relative_activation_error_em() const {
    return output_energy > 0.0 ? activation_error_em / output_energy : 0.0;
}

// ---------------------------------------------------------------------------
// Student

QuantizedLayer* CompressedStudent::find(const std::string& id) {
    for (auto& q : layers)
        if (q.id == id) return &q;
    return nullptr;
}

void CompressedStudent::install(const QuantizedLayer& q) {
    Tensor w = reconstruct_layer(q);
    std::visit(
        [&](auto& l) {
            using L = std::remove_cvref_t<decltype(l)>;
            if constexpr (std::is_same_v<L, Linear> || std::is_same_v<L, Conv2d>) {
                l.weight = std::move(w);
            } else {
                throw ArgumentError("layer " + q.id + " has no quantizable weight");
            }
        },
        net.at(q.id).layer);
}

void CompressedStudent::install() {
    for (const auto& q : layers) install(q);
}

TeacherTargets::TeacherTargets(const Network& teacher, const Dataset& data,
                               std::size_t batch_size) {
    const std::size_t n = data.size(), classes = teacher.num_classes();
    probs_ = Tensor({n, classes});
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t end = std::min(n, start + batch_size);
        idx.resize(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const Tensor p = softmax(predict(teacher, data.images(idx)));
        std::copy(p.data().begin(), p.data().end(), probs_.data().begin() + start * classes);
    }
}

Tensor TeacherTargets::rows(std::span<const std::size_t> indices) const {
    return gather_rows(probs_, indices);
}

// ---------------------------------------------------------------------------
// Finetuning

namespace {

struct BatchLoss {
    double loss;
    Tensor grad_logits;
};

BatchLoss batch_loss(const Tensor& logits, std::span<const std::size_t> idx,
                     const TeacherTargets* targets, const Dataset& data,
                     FinetuneObjective objective) {
    if (objective == FinetuneObjective::Distillation) {
        if (!targets) throw ArgumentError("distillation needs teacher targets");
        const Tensor t = targets->rows(idx);
        return {kl_loss(softmax(logits), t), kl_loss_grad(logits, t)};
    }
    const auto labels = labels_of(data, idx);
    return {cross_entropy(logits, labels), cross_entropy_grad(logits, labels)};
}

void check_finite(double loss, const std::string& where) {
    if (!std::isfinite(loss)) throw TrainingError("non-finite loss during " + where);
}

}  // namespace

double finetune_layer_codebook(CompressedStudent& student, const std::string& layer_id,
                               const TeacherTargets* targets, const Dataset& data,
                               const FinetuneConfig& ft, Rng& rng) {
    ft.validate();
    QuantizedLayer* q = student.find(layer_id);
    if (!q) throw ArgumentError("layer " + layer_id + " is not quantized");
    const std::string weight_key = layer_id + ".weight";
    const std::size_t batch = std::min(ft.batch_size, data.size());
    DTensor velocity;
    double loss = 0.0;
    for (std::size_t it = 0; it < ft.layer_iterations; ++it) {
        const auto idx = sample_row_indices(data.size(), batch, rng);
        const Tensor x = data.images(idx);
        Tape tape;
        const Tensor logits = forward(student.net, x, &tape);
        auto [l, grad_logits] = batch_loss(logits, idx, targets, data, ft.objective);
        check_finite(l, "finetuning of " + layer_id);
        loss = l;
        const Gradients g = backward(student.net, tape, grad_logits);
        sgd_step(q->codebook.centroids, codeword_gradients(*q, g.params.at(weight_key)), velocity,
                 ft.sgd);
        student.install(*q);
    }
    return loss;
}

std::vector<double> global_finetune(CompressedStudent& student, const TeacherTargets* targets,
                                    const Dataset& data, const FinetuneConfig& ft, Rng& rng) {
    ft.validate();
    std::vector<double> epoch_losses;
    if (ft.global_epochs == 0 || student.layers.empty()) return epoch_losses;

    std::map<std::string, DTensor> velocity;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t step = std::max<std::size_t>(1, ft.global_epochs / 3);

    student.net.mode = Mode::BnTrain;
    for (std::size_t epoch = 0; epoch < ft.global_epochs; ++epoch) {
        SgdConfig sgd = ft.sgd;
        sgd.lr = ft.sgd.lr * std::pow(0.1, static_cast<double>(epoch / step));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.uniform_index(i)]);

        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += ft.batch_size) {
            const std::size_t end = std::min(order.size(), start + ft.batch_size);
            if (end - start < 2) continue;  // batch statistics need two samples
            std::span<const std::size_t> idx(order.data() + start, end - start);
            const Tensor x = data.images(idx);
            Tape tape;
            const Tensor logits = forward(student.net, x, &tape);
            auto [l, grad_logits] = batch_loss(logits, idx, targets, data, ft.objective);
            check_finite(l, "global finetuning");
            total += l;
            ++batches;
            const Gradients g = backward(student.net, tape, grad_logits);
            for (auto& q : student.layers) {
                sgd_step(q.codebook.centroids, codeword_gradients(q, g.params.at(q.id + ".weight")),
                         velocity[q.id], sgd);
                student.install(q);
            }
        }
        epoch_losses.push_back(batches ? total / static_cast<double>(batches) : 0.0);
    }
    student.net.mode = Mode::Eval;
    return epoch_losses;
}

// ---------------------------------------------------------------------------
// Sequential quantization

namespace {

DTensor to_double(const Tensor& t) { return t.cast<double>(); }

// ‖x(W − Ŵ)‖² restricted to each group's own rows and columns.
double grouped_activation_error(const LayerGeometry& geom, const DTensor& w, const DTensor& w_hat,
                                const DTensor& xr, double* energy) {
    const std::size_t groups = geom.kind == LayerKind::Conv ? geom.conv.groups : 1;
    const std::size_t rows_per_group = xr.rows() / groups;
    const std::size_t cols_per_group = geom.cols() / groups;
    const std::size_t len = geom.rows();
    double err = 0.0, out = 0.0;
    for (std::size_t g = 0; g < groups; ++g) {
        for (std::size_t r = 0; r < rows_per_group; ++r) {
            const auto row = xr.row(g * rows_per_group + r);
            for (std::size_t o = g * cols_per_group; o < (g + 1) * cols_per_group; ++o) {
                double y = 0.0, dy = 0.0;
                for (std::size_t i = 0; i < len; ++i) {
                    y += row[i] * w(i, o);
                    dy += row[i] * (w(i, o) - w_hat(i, o));
                }
                err += dy * dy;
                out += y * y;
            }
        }
    }
    if (energy) *energy = out;
    return err;
}

double squared_distance(const DTensor& a, const DTensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

}  // namespace

Rng global_finetune_rng(std::uint64_t seed) { return Rng(seed ^ 0x5851f42d4c957f2dULL); }

PipelineResult quantize_network(const Network& teacher, const Dataset& data,
                                const PipelineOptions& options) {
    teacher.validate();
    options.ft.validate();
    if (data.size() == 0) throw ArgumentError("quantize_network: dataset is empty");
    if (data.sample_shape() != teacher.input_shape) {
        throw ShapeError("dataset samples " + shape_str(data.sample_shape()) +
                         " do not match network input " + shape_str(teacher.input_shape));
    }

    PipelineResult result;
    CompressedStudent& student = result.student;
    student.net = teacher;
    student.net.mode = Mode::Eval;
    student.seed = options.seed;
    result.report.seed = options.seed;
    result.report.activation_aware = options.activation_aware;

    const auto plans = options.plan.resolve(teacher);
    std::optional<TeacherTargets> targets;
    if (options.ft.objective == FinetuneObjective::Distillation && !plans.empty()) {
        targets.emplace(teacher, data);
    }
    const TeacherTargets* tp = targets ? &*targets : nullptr;

    Rng master(options.seed);
    for (const auto& lp : plans) {
        if (options.on_layer_start) options.on_layer_start(lp.id, student.net);
        Rng layer_rng = master.fork();

        const auto calib = sample_row_indices(
            data.size(), std::min(options.ft.calibration_batch, data.size()), layer_rng);
        ActivationTrace trace;
        predict(student.net, data.images(calib), &trace);
        const Tensor& input = trace.at(lp.id);

        const LayerNode& node = student.net.at(lp.id);
        const LayerGeometry geom = LayerGeometry::of(node.layer);
        const Tensor& weight = std::holds_alternative<Conv2d>(node.layer)
                                   ? std::get<Conv2d>(node.layer).weight
                                   : std::get<Linear>(node.layer).weight;
        const DTensor wr = to_double(geom.to_matrix(weight));
        const DTensor xr = to_double(geom.kind == LayerKind::Conv
                                         ? unfold_activations(input, geom.conv)
                                         : input);
        const std::size_t m = geom.rows() / lp.d;
        const DTensor subvectors = split_columns(wr, m);

        EMConfig em = options.em;
        em.k_requested = lp.k_requested;
        em.seed = layer_rng.next_u64();
        em.clamp_k = options.em.clamp_k && options.plan.clamp_k && !options.plan.exact;
        std::optional<DTensor> unrolled;
        if (options.activation_aware) unrolled = unroll(xr, m);
        KMeansResult km = weighted_kmeans(subvectors, unrolled, em);

        student.layers.push_back({lp.id, geom, std::move(km.codebook), std::move(km.assignments)});
        QuantizedLayer& q = student.layers.back();
        student.install(q);

        LayerReport rep;
        rep.id = lp.id;
        rep.d = lp.d;
        rep.k = q.k();
        rep.m = m;
        rep.subvectors = q.assignments.size();
        rep.resolution_rounds = km.stats.max_resolution_rounds;
        rep.clusters_resolved = km.stats.empty_clusters_resolved;
        {
            const DTensor w_hat = assemble(q.codebook, q.assignments, geom.rows(), geom.cols());
            rep.pq_error_em = squared_distance(wr, w_hat);
            rep.activation_error_em =
                grouped_activation_error(geom, wr, w_hat, xr, &rep.output_energy);
        }

        if (options.ft.layer_iterations > 0) {
            Rng ft_rng = layer_rng.fork();
            rep.final_loss = finetune_layer_codebook(student, lp.id, tp, data, options.ft, ft_rng);
        }
        {
            QuantizedLayer& qf = *student.find(lp.id);
            const DTensor w_hat = assemble(qf.codebook, qf.assignments, geom.rows(), geom.cols());
            rep.pq_error_ft = squared_distance(wr, w_hat);
            rep.activation_error_ft = grouped_activation_error(geom, wr, w_hat, xr, nullptr);
        }
        result.report.layers.push_back(rep);
    }

    if (options.global_finetune) {
        Rng grng = global_finetune_rng(options.seed);
        result.report.global_losses = global_finetune(student, tp, data, options.ft, grng);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Ablation

std::optional<AblationMode> parse_ablation_mode(const std::string& s) {
    if (s == "act_distill") return AblationMode::ActDistill;
    if (s == "noact_distill") return AblationMode::NoActDistill;
    if (s == "act_labels") return AblationMode::ActLabels;
    return std::nullopt;
}

const char* to_string(AblationMode m) {
    switch (m) {
        case AblationMode::ActDistill: return "act_distill";
        case AblationMode::NoActDistill: return "noact_distill";
        case AblationMode::ActLabels: return "act_labels";
    }
    return "unknown";
}

PipelineOptions ablation_options(const PipelineOptions& base, AblationMode mode, std::size_t k) {
    PipelineOptions opts = base;
    opts.plan.k = k;
    opts.activation_aware = mode != AblationMode::NoActDistill;
    opts.ft.objective =
        mode == AblationMode::ActLabels ? FinetuneObjective::Labels : FinetuneObjective::Distillation;
    return opts;
}

AblationReport ablation_run(const Network& teacher, const Dataset& train, const Dataset& test,
                            const PipelineOptions& base, std::span<const AblationMode> modes,
                            std::span<const std::size_t> k_values) {
    AblationReport report;
    report.teacher_accuracy = evaluate(teacher, test);
    for (const auto mode : modes) {
        for (const auto k : k_values) {
            PipelineOptions opts = ablation_options(base, mode, k);
            const bool run_global = opts.global_finetune;
            opts.global_finetune = false;
            PipelineResult res = quantize_network(teacher, train, opts);

            AblationRow row{mode, k};
            for (const auto& l : res.report.layers)
                row.relative_activation_error_em += l.relative_activation_error_em();
            row.accuracy_before_global = evaluate(res.student.net, test);
            if (run_global) {
                std::optional<TeacherTargets> targets;
                if (opts.ft.objective == FinetuneObjective::Distillation) targets.emplace(teacher, train);
                Rng grng = global_finetune_rng(opts.seed);
                global_finetune(res.student, targets ? &*targets : nullptr, train, opts.ft, grng);
            }
            row.accuracy = evaluate(res.student.net, test);
            row.compressed_bytes = footprint(compress(res.student)).total_bytes();
            report.rows.push_back(row);
        }
    }
    return report;
}

}  // namespace pqnet
