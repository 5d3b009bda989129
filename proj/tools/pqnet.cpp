// pqnet command-line driver.

#include <cstdio>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "pqnet/modelio.hpp"
#include "pqnet/pipeline.hpp"

using namespace pqnet;

namespace {

struct ArchOption {
    std::string value = "toy-cnn";

    Network build() const {
        if (value == "toy-cnn") return parse_architecture(toy_cnn_architecture());
        if (value == "toy-resnet") return parse_architecture(toy_resnet_architecture());
        return load_architecture(value);
    }
};

void add_arch(CLI::App* cmd, ArchOption& arch) {
    cmd->add_option("--arch", arch.value, "Architecture file, or toy-cnn / toy-resnet")
        ->capture_default_str();
}

void kv(const std::string& key, const auto& value) { std::cout << key << '=' << value << '\n'; }

std::string join(const std::vector<std::string>& parts, char sep) {
    std::string out;
    for (const auto& p : parts) out += (out.empty() ? "" : std::string(1, sep)) + p;
    return out;
}

Network load_teacher(const ArchOption& arch, const std::string& path) {
    Network net = arch.build();
    load_dense(read_file(path), net);
    return net;
}

// ---------------------------------------------------------------------------

struct MakeData {
    std::string kind = "stripes";
    std::size_t n = 512;
    std::size_t dims = 8;
    double noise = 0.35;
    std::uint64_t seed = 0;
    std::string out;

    void attach(CLI::App& app) {
        auto* c = app.add_subcommand("make-data", "Write a synthetic labeled dataset");
        c->add_option("--kind", kind, "stripes (2-class 8x8 images) or blobs")
            ->check(CLI::IsMember({"stripes", "blobs"}))
            ->capture_default_str();
        c->add_option("--n", n, "Number of samples")->capture_default_str()->check(CLI::PositiveNumber);
        c->add_option("--dims", dims, "Blob dimensionality")->capture_default_str();
        c->add_option("--noise", noise, "Stripe pixel noise")->capture_default_str();
        c->add_option("--seed", seed)->capture_default_str();
        c->add_option("--out", out)->required();
        c->callback([this] { run(); });
    }

    void run() const {
        Rng rng(seed);
        const InMemoryDataset data = kind == "stripes" ? make_stripes(n, rng, noise) : make_blobs(n, dims, rng);
        write_file(out, save_dataset(data));
        kv("samples", data.size());
        kv("sample_shape", shape_str(data.sample_shape()));
        kv("seed", seed);
        kv("out", out);
    }
};

struct TrainToy {
    ArchOption arch;
    std::string data_path;
    std::string test_path;
    TrainConfig cfg;
    std::uint64_t seed = 0;
    std::string out;

    void attach(CLI::App& app) {
        auto* c = app.add_subcommand("train-toy", "Train a dense teacher with cross-entropy");
        add_arch(c, arch);
        c->add_option("--data", data_path, "Labeled training set")->required()->check(CLI::ExistingFile);
        c->add_option("--test", test_path, "Labeled test set")->check(CLI::ExistingFile);
        c->add_option("--epochs", cfg.epochs)->capture_default_str();
        c->add_option("--batch", cfg.batch_size)->capture_default_str()->check(CLI::PositiveNumber);
        c->add_option("--lr", cfg.sgd.lr)->capture_default_str();
        c->add_option("--momentum", cfg.sgd.momentum)->capture_default_str();
        c->add_option("--weight-decay", cfg.sgd.weight_decay)->capture_default_str();
        c->add_option("--seed", seed)->capture_default_str();
        c->add_option("--out", out)->required();
        c->callback([this] { run(); });
    }

    void run() const {
        const InMemoryDataset data = load_dataset(read_file(data_path));
        if (!data.has_labels()) throw ArgumentError("training set has no labels");
        Network net = arch.build();
        Rng rng(seed);
        net.init_parameters(rng);
        net = train_toy_teacher(std::move(net), data, cfg, rng);
        write_file(out, save_dense(net));
        kv("train_accuracy", evaluate(net, data));
        if (!test_path.empty()) kv("test_accuracy", evaluate(net, load_dataset(read_file(test_path))));
        kv("parameters", net.parameter_count());
        kv("epochs", cfg.epochs);
        kv("batch", cfg.batch_size);
        kv("lr", cfg.sgd.lr);
        kv("momentum", cfg.sgd.momentum);
        kv("weight_decay", cfg.sgd.weight_decay);
        kv("seed", seed);
        kv("out", out);
    }
};

// Flags shared by quantize and ablate.
struct PipelineFlags {
    std::string regime = "small";
    std::size_t k = 256;
    std::size_t classifier_k = 2048;
    std::size_t classifier_d = 4;
    bool exact = false;
    bool keep_first_conv = false;
    std::size_t em_iters = 100;
    std::size_t em_sample_rows = 1024;
    std::size_t layer_iters = 100;
    std::size_t global_epochs = 3;
    std::size_t batch = 32;
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::size_t calib_batch = 128;
    std::uint64_t seed = 0;

    void attach(CLI::App* c) {
        c->add_option("--regime", regime, "Block-size regime")
            ->check(CLI::IsMember({"small", "large"}))
            ->capture_default_str();
        c->add_option("--k", k, "Codewords per layer")->capture_default_str()->check(CLI::Range(1, 65535));
        c->add_option("--classifier-k", classifier_k)->capture_default_str()->check(CLI::Range(1, 65535));
        c->add_option("--classifier-d", classifier_d)->capture_default_str()->check(CLI::PositiveNumber);
        c->add_flag("--exact", exact, "One codeword per subvector (lossless codebooks)");
        c->add_flag("--keep-first-conv", keep_first_conv, "Quantize the first convolution too");
        c->add_option("--em-iters", em_iters)->capture_default_str();
        c->add_option("--em-sample-rows", em_sample_rows)->capture_default_str()->check(CLI::PositiveNumber);
        c->add_option("--layer-iters", layer_iters, "Per-layer codeword finetuning steps")->capture_default_str();
        c->add_option("--global-epochs", global_epochs)->capture_default_str();
        c->add_option("--batch", batch)->capture_default_str()->check(CLI::PositiveNumber);
        c->add_option("--lr", lr)->capture_default_str();
        c->add_option("--momentum", momentum)->capture_default_str();
        c->add_option("--weight-decay", weight_decay)->capture_default_str();
        c->add_option("--calib-batch", calib_batch)->capture_default_str()->check(CLI::PositiveNumber);
        c->add_option("--seed", seed, "Single source of randomness")->capture_default_str();
    }

    PipelineOptions options() const {
        PipelineOptions o;
        o.plan.regime = *parse_regime(regime);
        o.plan.k = k;
        o.plan.classifier_k = classifier_k;
        o.plan.classifier_d = classifier_d;
        o.plan.exact = exact;
        o.plan.skip_first_conv = !keep_first_conv;
        o.em.n_iter = em_iters;
        o.em.sample_rows = em_sample_rows;
        o.ft.layer_iterations = layer_iters;
        o.ft.global_epochs = global_epochs;
        o.ft.batch_size = batch;
        o.ft.sgd = {lr, weight_decay, momentum};
        o.ft.calibration_batch = calib_batch;
        o.seed = seed;
        o.em.seed = seed;
        return o;
    }

    std::string command_flags() const {
        std::ostringstream os;
        os << "--regime " << regime << " --k " << k << " --classifier-k " << classifier_k
           << " --classifier-d " << classifier_d << (exact ? " --exact" : "")
           << (keep_first_conv ? " --keep-first-conv" : "") << " --em-iters " << em_iters
           << " --em-sample-rows " << em_sample_rows << " --layer-iters " << layer_iters
           << " --global-epochs " << global_epochs << " --batch " << batch << " --lr " << lr
           << " --momentum " << momentum << " --weight-decay " << weight_decay << " --calib-batch "
           << calib_batch << " --seed " << seed;
        return os.str();
    }
};

struct Quantize {
    ArchOption arch;
    std::string teacher_path;
    std::string data_path;
    std::string objective = "distill";
    bool no_act = false;
    PipelineFlags flags;
    std::string out;

    void attach(CLI::App& app) {
        auto* c = app.add_subcommand("quantize", "Compress a dense teacher");
        add_arch(c, arch);
        c->add_option("--teacher", teacher_path, "Dense model bundle")->required()->check(CLI::ExistingFile);
        c->add_option("--data", data_path, "Calibration images")->required()->check(CLI::ExistingFile);
        c->add_option("--objective", objective, "Finetuning target")
            ->check(CLI::IsMember({"distill", "labels"}))
            ->capture_default_str();
        c->add_flag("--no-act", no_act, "Plain weight-space PQ instead of activation-aware EM");
        flags.attach(c);
        c->add_option("--out", out, "Compressed model file")->required();
        c->callback([this] { run(); });
    }

    void run() const {
        const Network teacher = load_teacher(arch, teacher_path);
        const InMemoryDataset data = load_dataset(read_file(data_path));
        PipelineOptions o = flags.options();
        o.activation_aware = !no_act;
        o.ft.objective = objective == "labels" ? FinetuneObjective::Labels : FinetuneObjective::Distillation;
        const PipelineResult res = quantize_network(teacher, data, o);
        const CompressedModel model = compress(res.student);
        write_file(out, save_compressed(model));

        std::cout << std::left << std::setw(16) << "layer" << std::right << std::setw(4) << "d"
                  << std::setw(7) << "k" << std::setw(8) << "M" << std::setw(14) << "act_err_em"
                  << std::setw(14) << "rel_err_em" << std::setw(14) << "act_err_ft" << '\n';
        for (const auto& l : res.report.layers) {
            std::cout << std::left << std::setw(16) << l.id << std::right << std::setw(4) << l.d
                      << std::setw(7) << l.k << std::setw(8) << l.subvectors << std::setw(14)
                      << std::setprecision(6) << l.activation_error_em << std::setw(14)
                      << l.relative_activation_error_em() << std::setw(14) << l.activation_error_ft
                      << '\n';
        }
        for (const auto& l : res.report.layers) {
            const std::string p = "layer." + l.id + ".";
            kv(p + "d", l.d);
            kv(p + "k", l.k);
            kv(p + "subvectors", l.subvectors);
            kv(p + "pq_error_em", l.pq_error_em);
            kv(p + "activation_error_em", l.activation_error_em);
            kv(p + "relative_activation_error_em", l.relative_activation_error_em());
            kv(p + "activation_error_ft", l.activation_error_ft);
            kv(p + "empty_clusters_resolved", l.clusters_resolved);
        }
        for (std::size_t e = 0; e < res.report.global_losses.size(); ++e)
            kv("global_loss." + std::to_string(e), res.report.global_losses[e]);
        const FootprintReport fp = footprint(model);
        kv("compressed_bytes", fp.total_bytes());
        kv("dense_bytes", fp.dense_bytes());
        kv("compression_ratio", fp.compression_ratio());
        kv("objective", objective);
        kv("activation_aware", no_act ? 0 : 1);
        kv("seed", flags.seed);
        kv("command", "pqnet quantize --arch " + arch.value + " --teacher " + teacher_path + " --data " +
                          data_path + " --objective " + objective + (no_act ? " --no-act " : " ") +
                          flags.command_flags() + " --out " + out);
    }
};

bool parse_layer_spec(const std::string& s, std::size_t& c_out, std::size_t& c_in, std::size_t& k) {
    std::size_t kh = 0, kw = 0;
    char x1, x2, x3;
    std::istringstream is(s);
    if (!(is >> c_out >> x1 >> c_in >> x2 >> kh >> x3 >> kw) || x1 != 'x' || x2 != 'x' || x3 != 'x') return false;
    std::string rest;
    if (is >> rest || kh != kw) return false;
    k = kh;
    return true;
}

struct Footprint {
    std::string model_path;
    std::string layer;
    std::size_t k = 256;
    std::size_t d = 9;

    void attach(CLI::App& app) {
        auto* c = app.add_subcommand("footprint", "Storage cost of a compressed model or one layer");
        auto* m = c->add_option("--model", model_path, "Compressed model file")->check(CLI::ExistingFile);
        auto* l = c->add_option("--layer", layer, "Single conv layer C_outxC_inxKxK, e.g. 128x128x3x3");
        m->excludes(l);
        c->add_option("--k", k, "Codewords for --layer")->capture_default_str()->check(CLI::Range(1, 65535));
        c->add_option("--d", d, "Subvector size for --layer")->capture_default_str()->check(CLI::PositiveNumber);
        c->callback([this] { run(); });
    }

    void run() const {
        FootprintReport fp;
        if (!layer.empty()) {
            std::size_t c_out = 0, c_in = 0, kk = 0;
            if (!parse_layer_spec(layer, c_out, c_in, kk)) {
                throw ArgumentError("--layer expects C_outxC_inxKxK, got '" + layer + "'");
            }
            const std::size_t len = c_in * kk * kk;
            if (len % d != 0) {
                throw ArgumentError("d=" + std::to_string(d) + " does not divide column length " +
                                    std::to_string(len));
            }
            LayerFootprint f = layer_footprint(len / d * c_out, k, d);
            f.id = layer;
            fp.entries.push_back(f);
        } else if (!model_path.empty()) {
            fp = footprint(load_compressed(read_file(model_path)));
        } else {
            throw ArgumentError("give --model or --layer");
        }
        std::cout << std::left << std::setw(28) << "entry" << std::right << std::setw(12) << "index_B"
                  << std::setw(12) << "centroid_B" << std::setw(12) << "raw_B" << std::setw(12) << "total_B"
                  << '\n';
        for (const auto& e : fp.entries) {
            std::cout << std::left << std::setw(28) << e.id << std::right << std::setw(12) << e.index_bytes
                      << std::setw(12) << e.centroid_bytes << std::setw(12) << e.raw_bytes << std::setw(12)
                      << e.total() << '\n';
        }
        std::cout << std::left << std::setw(28) << "total" << std::right << std::setw(12) << fp.index_bytes()
                  << std::setw(12) << fp.centroid_bytes() << std::setw(12) << fp.raw_bytes() << std::setw(12)
                  << fp.total_bytes() << '\n';
        for (const auto& e : fp.entries) {
            kv("entry." + e.id + ".index_bytes", e.index_bytes);
            kv("entry." + e.id + ".centroid_bytes", e.centroid_bytes);
            kv("entry." + e.id + ".raw_bytes", e.raw_bytes);
        }
        kv("index_bytes", fp.index_bytes());
        kv("centroid_bytes", fp.centroid_bytes());
        kv("raw_bytes", fp.raw_bytes());
        kv("total_bytes", fp.total_bytes());
        kv("total_kb", kilobytes(fp.total_bytes()));
        kv("dense_bytes", fp.dense_bytes());
        kv("compression_ratio", fp.compression_ratio());
    }
};

struct Eval {
    ArchOption arch;
    std::string model_path;
    std::string dense_path;
    std::string data_path;

    void attach(CLI::App& app) {
        auto* c = app.add_subcommand("eval", "Top-1 accuracy of a dense or compressed model");
        add_arch(c, arch);
        auto* m = c->add_option("--model", model_path, "Compressed model file")->check(CLI::ExistingFile);
        auto* d = c->add_option("--dense", dense_path, "Dense model bundle")->check(CLI::ExistingFile);
        m->excludes(d);
        c->add_option("--data", data_path, "Labeled dataset")->required()->check(CLI::ExistingFile);
        c->callback([this] { run(); });
    }

    void run() const {
        const InMemoryDataset data = load_dataset(read_file(data_path));
        if (!data.has_labels()) throw ArgumentError("evaluation set has no labels");
        Network net;
        if (!model_path.empty()) {
            net = materialize(load_compressed(read_file(model_path)), arch.build()).net;
        } else if (!dense_path.empty()) {
            net = load_teacher(arch, dense_path);
        } else {
            throw ArgumentError("give --model or --dense");
        }
        kv("samples", data.size());
        kv("accuracy", evaluate(net, data));
    }
};

struct Ablate {
    ArchOption arch;
    std::string teacher_path;
    std::string train_path;
    std::string test_path;
    std::vector<std::string> modes{"act_distill", "noact_distill", "act_labels"};
    std::vector<std::size_t> ks{256};
    PipelineFlags flags;

    void attach(CLI::App& app) {
        auto* c = app.add_subcommand("ablate", "Compare activation-aware EM and distillation variants");
        add_arch(c, arch);
        c->add_option("--teacher", teacher_path)->required()->check(CLI::ExistingFile);
        c->add_option("--train", train_path, "Calibration / finetuning set")->required()->check(CLI::ExistingFile);
        c->add_option("--test", test_path, "Labeled test set")->required()->check(CLI::ExistingFile);
        c->add_option("--modes", modes, "act_distill, noact_distill, act_labels")
            ->delimiter(',')
            ->check(CLI::IsMember({"act_distill", "noact_distill", "act_labels"}))
            ->capture_default_str();
        c->add_option("--ks", ks, "Comma-separated codebook sizes")->delimiter(',')->capture_default_str();
        flags.attach(c);
        c->callback([this] { run(); });
    }

    void run() const {
        const Network teacher = load_teacher(arch, teacher_path);
        const InMemoryDataset train = load_dataset(read_file(train_path));
        const InMemoryDataset test = load_dataset(read_file(test_path));
        std::vector<AblationMode> ms;
        for (const auto& m : modes) ms.push_back(*parse_ablation_mode(m));
        const AblationReport rep = ablation_run(teacher, train, test, flags.options(), ms, ks);

        std::cout << std::left << std::setw(16) << "mode" << std::right << std::setw(7) << "k" << std::setw(14)
                  << "rel_err_em" << std::setw(12) << "acc_layer" << std::setw(12) << "acc_final"
                  << std::setw(12) << "bytes" << '\n';
        for (const auto& r : rep.rows) {
            std::cout << std::left << std::setw(16) << to_string(r.mode) << std::right << std::setw(7) << r.k
                      << std::setw(14) << std::setprecision(6) << r.relative_activation_error_em
                      << std::setw(12) << r.accuracy_before_global << std::setw(12) << r.accuracy
                      << std::setw(12) << r.compressed_bytes << '\n';
        }
        kv("teacher_accuracy", rep.teacher_accuracy);
        for (const auto& r : rep.rows) {
            const std::string p = std::string("row.") + to_string(r.mode) + ".k" + std::to_string(r.k) + ".";
            kv(p + "relative_activation_error_em", r.relative_activation_error_em);
            kv(p + "accuracy_before_global", r.accuracy_before_global);
            kv(p + "accuracy", r.accuracy);
            kv(p + "compressed_bytes", r.compressed_bytes);
        }
        std::vector<std::string> k_str;
        for (auto k : ks) k_str.push_back(std::to_string(k));
        kv("seed", flags.seed);
        kv("command", "pqnet ablate --arch " + arch.value + " --teacher " + teacher_path + " --train " +
                          train_path + " --test " + test_path + " --modes " + join(modes, ',') + " --ks " +
                          join(k_str, ',') + " " + flags.command_flags());
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Activation-aware product quantization of small CNNs"};
    app.require_subcommand(1);
    MakeData make_data;
    TrainToy train_toy;
    Quantize quantize;
    Footprint fp;
    Eval eval;
    Ablate ablate;
    make_data.attach(app);
    train_toy.attach(app);
    quantize.attach(app);
    fp.attach(app);
    eval.attach(app);
    ablate.attach(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        std::cerr << "pqnet: usage error: " << msg << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        std::cerr << "pqnet: error: " << msg << '\n';
        return 1;
    }
    return 0;
}
