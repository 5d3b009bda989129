#include <functional>

#include "doctest.h"
#include "fixtures.hpp"
#include "pqnet/half.hpp"
#include "support.hpp"

using namespace pqnet;

namespace {

PipelineOptions quick_options(std::uint64_t seed) {
    PipelineOptions o;
    o.plan.k = 16;
    o.plan.classifier_k = 4;
    o.em.n_iter = 20;
    o.ft.layer_iterations = 10;
    o.ft.global_epochs = 1;
    o.seed = seed;
    return o;
}

std::size_t hash_tensor(const Tensor& t) {
    std::size_t h = 0;
    for (float v : t.data()) h = h * 1000003u ^ std::hash<float>{}(v);
    return h;
}

}  // namespace

TEST_CASE("plan resolution") {
    const Network net = parse_architecture(toy_resnet_architecture());
    CompressionPlan plan;
    auto plans = plan.resolve(net);
    REQUIRE(!plans.empty());
    CHECK(plans.front().id == "b1.main.0");  // first conv skipped
    for (const auto& p : plans) {
        if (p.id == "classifier") {
            CHECK(p.d == 4);
            CHECK(p.k_requested == 2048);
        } else if (p.id == "b3.short.0") {
            CHECK(p.d == 4);
        } else {
            CHECK(p.d == 9);
        }
    }
    plan.regime = Regime::Large;
    for (const auto& p : plan.resolve(net)) {
        if (p.id == "b3.short.0") CHECK(p.d == 8);
        else if (p.id != "classifier") CHECK(p.d == 18);
    }
    // Main branch layers come before the shortcut.
    std::vector<std::string> ids;
    for (const auto& p : plans) ids.push_back(p.id);
    CHECK(ids == std::vector<std::string>{"b1.main.0", "b1.main.3", "b3.main.0", "b3.main.3", "b3.short.0",
                                          "classifier"});

    CompressionPlan bad;
    bad.overrides["b1.main.0"].d = 7;
    CHECK_THROWS_WITH_AS(bad.resolve(net), doctest::Contains("b1.main.0"), ShapeError);

    CompressionPlan exact;
    exact.exact = true;
    for (const auto& p : exact.resolve(net)) {
        const auto g = LayerGeometry::of(net.at(p.id).layer);
        CHECK(p.k_requested == g.rows() / p.d * g.cols());
    }
    CHECK(parse_regime("small") == Regime::Small);
    CHECK(!parse_regime("medium"));
}

TEST_CASE("reconstruct_layer") {
    Rng rng(1);
    QuantizedLayer q;
    q.id = "l";
    q.geometry.kind = LayerKind::Conv;
    q.geometry.conv = {4, 2, 3, 1, 1, 1};
    q.geometry.c_in = 2;
    q.geometry.c_out = 4;
    q.codebook.centroids = gaussian_noise<double>({1, 9}, 1.0, rng);
    q.assignments.indices.assign(8, 0);
    std::size_t reads = 0;
    const Tensor w = reconstruct_layer(q, &reads);
    CHECK(reads == 8);
    CHECK(w.shape() == Shape{4, 2, 3, 3});
    for (std::size_t f = 0; f < 8; ++f)
        for (std::size_t i = 0; i < 9; ++i) CHECK(w[f * 9 + i] == static_cast<float>(q.codebook.centroids[i]));

    // Exact codebook reproduces the weight.
    const Tensor orig = gaussian_noise<float>({4, 2, 3, 3}, 1.0, rng);
    const Tensor sub = split_columns(q.geometry.to_matrix(orig), 2);
    q.codebook.centroids = sub.cast<double>();
    for (std::uint32_t i = 0; i < 8; ++i) q.assignments.indices[i] = i;
    CHECK(reconstruct_layer(q) == orig);

    q.assignments.indices[3] = 8;
    CHECK_THROWS_AS(reconstruct_layer(q), CorruptionError);
}

TEST_CASE("codeword gradient averaging") {
    QuantizedLayer q;
    q.geometry = {LayerKind::Linear, 2, 2, {}};
    q.codebook.centroids = DTensor::matrix({{1.0, -1.0}});
    q.assignments.indices = {0, 0};
    const Tensor g = Tensor::matrix({{0.2f, 0.6f}, {-0.4f, 1.0f}});  // columns are g1, g2
    const DTensor avg = codeword_gradients(q, g);
    CHECK(avg(0, 0) == doctest::Approx((0.2 + 0.6) / 2));
    CHECK(avg(0, 1) == doctest::Approx((-0.4 + 1.0) / 2));
    DTensor vel;
    sgd_step(q.codebook.centroids, avg, vel, SgdConfig{0.1, 0.0, 0.0});
    CHECK(q.codebook.centroids(0, 0) == doctest::Approx(1.0 - 0.1 * 0.4));
    CHECK(q.codebook.centroids(0, 1) == doctest::Approx(-1.0 - 0.1 * 0.3));
}

TEST_CASE("codeword gradient matches finite differences") {
    const auto& fx = fixtures::toy_teacher();
    PipelineOptions o = quick_options(3);
    o.ft.layer_iterations = 0;
    o.global_finetune = false;
    const PipelineResult res = quantize_network(fx.teacher, fx.train, o);
    Rng rng(2);
    const auto idx = sample_row_indices(fx.train.size(), 8, rng);
    const Tensor x = fx.train.images(idx);
    const Tensor t = oracle::random_probs(8, 2, rng);
    const CompressedStudent& s = res.student;
    oracle::DoubleParams params = oracle::double_params(s.net);
    const DTensor xd = x.cast<double>();
    for (const auto& q : s.layers) {
        Network work = s.net;
        Tape tape;
        const Tensor logits = forward(work, x, &tape);
        const Gradients g = backward(work, tape, kl_loss_grad(logits, t));
        const DTensor avg = codeword_gradients(q, g.params.at(q.id + ".weight"));
        const auto counts = q.assignments.counts(q.k());

        // Weight as an exact double function of the codebook.
        Codebook cb = q.codebook;
        DTensor& w = params.at(q.id + ".weight");
        const auto rebuild = [&] {
            const DTensor mat = assemble(cb, q.assignments, q.geometry.rows(), q.geometry.cols());
            if (q.geometry.kind == LayerKind::Linear) {
                w = mat;
            } else {
                for (std::size_t o2 = 0; o2 < mat.cols(); ++o2)
                    for (std::size_t r = 0; r < mat.rows(); ++r) w[o2 * mat.rows() + r] = mat(r, o2);
            }
        };
        std::vector<double> an, fd;
        const double h = 1e-6;
        for (std::size_t c = 0; c < q.k(); ++c) {
            for (std::size_t i = 0; i < q.d(); ++i) {
                // The update averages; the derivative sums over members.
                an.push_back(avg(c, i) * double(counts[c]));
                const double v = cb.centroids(c, i);
                cb.centroids(c, i) = v + h;
                rebuild();
                const double lp = oracle::kl_double(s.net, params, xd, t);
                cb.centroids(c, i) = v - h;
                rebuild();
                const double lm = oracle::kl_double(s.net, params, xd, t);
                cb.centroids(c, i) = v;
                fd.push_back((lp - lm) / (2 * h));
            }
        }
        rebuild();
        INFO("layer " << q.id);
        CHECK(oracle::rel_error(fd, an) <= 1e-3);
    }
}

TEST_CASE("empty plan leaves the teacher untouched") {
    const auto& fx = fixtures::toy_teacher();
    PipelineOptions o = quick_options(1);
    o.plan.only = std::vector<std::string>{};
    const PipelineResult res = quantize_network(fx.teacher, fx.train, o);
    CHECK(res.student.layers.empty());
    const Tensor x = fx.test.images(std::vector<std::size_t>{0, 1, 2, 3, 4});
    CHECK(predict(res.student.net, x) == predict(fx.teacher, x));
}

TEST_CASE("exact codebooks reproduce the teacher") {
    const auto& fx = fixtures::toy_teacher();
    PipelineOptions o = quick_options(2);
    o.plan.exact = true;
    o.ft.layer_iterations = 0;
    o.global_finetune = false;
    const PipelineResult res = quantize_network(fx.teacher, fx.train, o);
    CHECK(res.student.layers.size() == 3);
    std::vector<std::size_t> all(fx.test.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    const Tensor x = fx.test.images(all);
    CHECK(max_abs_diff(predict(res.student.net, x), predict(fx.teacher, x)) <= 1e-4f);
    for (const auto& l : res.report.layers) CHECK(l.activation_error_em <= 1e-8 * (1.0 + l.output_energy));
}

TEST_CASE("sequential order and fixed assignments") {
    const auto& fx = fixtures::toy_teacher();
    PipelineOptions o = quick_options(4);
    std::map<std::string, std::size_t> teacher_hash;
    for (const auto& [k, t] : fx.teacher.tensors()) teacher_hash[k] = hash_tensor(*t);
    std::vector<std::string> seen;
    o.on_layer_start = [&](const std::string& id, const Network& net) {
        seen.push_back(id);
        // Layers after `id` (and `id` itself) still carry teacher weights.
        const auto ids = net.quantizable_ids();
        bool later = false;
        for (const auto& other : ids) {
            later |= other == id;
            if (later) CHECK(hash_tensor(*net.tensors().at(other + ".weight")) == teacher_hash.at(other + ".weight"));
        }
    };
    PipelineResult res = quantize_network(fx.teacher, fx.train, o);
    CHECK(seen == std::vector<std::string>{"b1.0", "b2.0", "classifier"});

    // Finetuning never touches assignments.
    std::vector<std::vector<std::uint32_t>> before;
    for (const auto& q : res.student.layers) before.push_back(q.assignments.indices);
    const TeacherTargets targets(fx.teacher, fx.train);
    Rng rng(5);
    finetune_layer_codebook(res.student, "b2.0", &targets, fx.train, o.ft, rng);
    global_finetune(res.student, &targets, fx.train, o.ft, rng);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(res.student.layers[i].assignments.indices == before[i]);
}

TEST_CASE("layer finetuning updates only its own codewords") {
    const auto& fx = fixtures::toy_teacher();
    PipelineOptions o = quick_options(6);
    o.ft.layer_iterations = 0;
    o.global_finetune = false;
    PipelineResult res = quantize_network(fx.teacher, fx.train, o);
    const auto before = res.student.layers;
    const TeacherTargets targets(fx.teacher, fx.train);
    FinetuneConfig ft = o.ft;
    ft.layer_iterations = 5;
    Rng rng(1);
    finetune_layer_codebook(res.student, "b2.0", &targets, fx.train, ft, rng);
    CHECK(res.student.layers[0].codebook.centroids == before[0].codebook.centroids);
    CHECK(!(res.student.layers[1].codebook.centroids == before[1].codebook.centroids));
    CHECK(res.student.layers[2].codebook.centroids == before[2].codebook.centroids);
}

TEST_CASE("zero gradient leaves codewords unchanged") {
    const auto& fx = fixtures::toy_teacher();
    PipelineOptions o = quick_options(7);
    o.ft.layer_iterations = 0;
    o.global_finetune = false;
    PipelineResult res = quantize_network(fx.teacher, fx.train, o);
    // Targets are the student's own outputs.
    const TeacherTargets self(res.student.net, fx.train);
    FinetuneConfig ft = o.ft;
    ft.layer_iterations = 5;
    ft.sgd.weight_decay = 0.0;
    const DTensor before = res.student.layers[1].codebook.centroids;
    Rng rng(1);
    finetune_layer_codebook(res.student, "b2.0", &self, fx.train, ft, rng);
    CHECK(max_abs_diff(res.student.layers[1].codebook.centroids, before) <= 1e-7);
}

TEST_CASE("global finetuning") {
    const auto& fx = fixtures::toy_teacher();
    PipelineOptions o = quick_options(8);
    o.global_finetune = false;
    PipelineResult res = quantize_network(fx.teacher, fx.train, o);
    const TeacherTargets targets(fx.teacher, fx.train);

    SUBCASE("zero epochs") {
        FinetuneConfig ft = o.ft;
        ft.global_epochs = 0;
        const auto saved = save_dense(res.student.net);
        Rng rng(1);
        CHECK(global_finetune(res.student, &targets, fx.train, ft, rng).empty());
        CHECK(save_dense(res.student.net) == saved);
    }
    SUBCASE("batchnorm statistics follow shifted data") {
        Tensor shifted = fx.train.all_images();
        for (auto& v : shifted.data()) v = v * 2.0f + 3.0f;
        const InMemoryDataset moved(shifted, std::nullopt);
        const TeacherTargets moved_targets(fx.teacher, moved);
        const Tensor mean_before = std::get<BatchNorm2d>(res.student.net.at("b1.1").layer).running_mean;
        Rng rng(2);
        global_finetune(res.student, &moved_targets, moved, o.ft, rng);
        const Tensor& mean_after = std::get<BatchNorm2d>(res.student.net.at("b1.1").layer).running_mean;
        CHECK(max_abs_diff(mean_before, mean_after) > 1e-3f);
        CHECK(res.student.net.mode == Mode::Eval);
    }
}

TEST_CASE("label-free quantization") {
    const auto& fx = fixtures::toy_teacher();
    const CountingDataset counted(fx.train);
    PipelineOptions o = quick_options(9);
    PipelineResult res = quantize_network(fx.teacher, counted, o);
    const TeacherTargets targets(fx.teacher, counted);
    Rng rng(3);
    global_finetune(res.student, &targets, counted, o.ft, rng);
    CHECK(counted.image_reads() > 0);
    CHECK(counted.label_reads() == 0);

    o.ft.objective = FinetuneObjective::Labels;
    quantize_network(fx.teacher, counted, o);
    CHECK(counted.label_reads() > 0);
}

TEST_CASE("pipeline is deterministic") {
    const auto& fx = fixtures::toy_teacher();
    const PipelineOptions o = quick_options(10);
    const auto a = save_compressed(compress(quantize_network(fx.teacher, fx.train, o).student));
    const auto b = save_compressed(compress(quantize_network(fx.teacher, fx.train, o).student));
    CHECK(a == b);
}

TEST_CASE("ablation") {
    const auto& fx = fixtures::toy_teacher();
    PipelineOptions base = quick_options(11);
    const std::vector<AblationMode> modes{AblationMode::ActDistill, AblationMode::NoActDistill,
                                          AblationMode::ActLabels};
    const std::vector<std::size_t> ks{8, 16};
    const AblationReport rep = ablation_run(fx.teacher, fx.train, fx.test, base, modes, ks);
    CHECK(rep.rows.size() == 6);
    CHECK(rep.teacher_accuracy == evaluate(fx.teacher, fx.test));

    // The act_distill row is the default pipeline.
    base.plan.k = 16;
    const PipelineResult res = quantize_network(fx.teacher, fx.train, base);
    const auto& row = rep.rows[1];
    CHECK(row.mode == AblationMode::ActDistill);
    CHECK(row.accuracy == evaluate(res.student.net, fx.test));
    CHECK(row.compressed_bytes == footprint(compress(res.student)).total_bytes());
    CHECK(parse_ablation_mode("noact_distill") == AblationMode::NoActDistill);
    CHECK(!parse_ablation_mode("act"));
}

TEST_CASE("activation-aware EM wins on anisotropic activations") {
    int wins = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        Network net = parse_architecture("input 16\nclassifier 16 16 nobias\n");
        net.init_parameters(rng);
        Tensor x = gaussian_noise<float>({256, 16}, 1.0, rng);
        for (std::size_t b = 0; b < 256; ++b)
            for (std::size_t c = 0; c < 16; ++c) x(b, c) *= static_cast<float>(std::pow(0.5, double(c % 4)));
        const InMemoryDataset data(x, std::nullopt);
        PipelineOptions o;
        o.plan.classifier_k = 8;
        o.ft.layer_iterations = 0;
        o.global_finetune = false;
        o.seed = seed;
        const double act = quantize_network(net, data, o).report.layers[0].activation_error_em;
        o.activation_aware = false;
        const double plain = quantize_network(net, data, o).report.layers[0].activation_error_em;
        wins += act < plain;
    }
    CHECK(wins >= 8);
}
