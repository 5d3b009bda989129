#include "pqnet/modelio.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "pqnet/half.hpp"

namespace pqnet {

namespace {

constexpr char kTensorMagic[4] = {'P', 'Q', 'T', 'N'};
constexpr char kBundleMagic[4] = {'P', 'Q', 'T', 'B'};
constexpr char kModelMagic[4] = {'P', 'Q', 'N', 'M'};
constexpr std::size_t kMaxRank = 8;

enum RecordKind : std::uint8_t { kQuantized = 0, kRaw = 1 };

class Writer {
public:
    explicit Writer(Bytes& out) : out_(out) {}

    void magic(const char (&m)[4]) { out_.insert(out_.end(), m, m + 4); }
    void u8(std::uint8_t v) { out_.push_back(v); }
    void u16(std::uint16_t v) { uint(v, 2); }
    void u32(std::uint32_t v) { uint(v, 4); }
    void u64(std::uint64_t v) { uint(v, 8); }
    void bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
    void string(const std::string& s) {
        if (s.size() > std::numeric_limits<std::uint16_t>::max()) {
            throw ArgumentError("id longer than 65535 bytes");
        }
        u16(static_cast<std::uint16_t>(s.size()));
        out_.insert(out_.end(), s.begin(), s.end());
    }

private:
    void uint(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    Bytes& out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

    bool done() const { return pos_ == in_.size(); }
    std::size_t remaining() const { return in_.size() - pos_; }

    void magic(const char (&m)[4], const char* what) {
        const std::size_t avail = std::min<std::size_t>(4, remaining());
        if (std::memcmp(in_.data() + pos_, m, avail) != 0) {
            throw ParseError(ParseErrorKind::BadMagic, std::string("not a ") + what);
        }
        need(4);
        pos_ += 4;
    }
    void version() {
        const auto v = u16();
        if (v != kFormatVersion) {
            throw ParseError(ParseErrorKind::VersionMismatch,
                             "version " + std::to_string(v) + ", expected " +
                                 std::to_string(kFormatVersion));
        }
    }
    std::uint8_t u8() { return static_cast<std::uint8_t>(uint(1)); }
    std::uint16_t u16() { return static_cast<std::uint16_t>(uint(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
    std::uint64_t u64() { return uint(8); }
    std::span<const std::uint8_t> bytes(std::size_t n) {
        need(n);
        auto s = in_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    std::string string() {
        const auto n = u16();
        auto b = bytes(n);
        return std::string(b.begin(), b.end());
    }
    void need(std::size_t n) const {
        if (remaining() < n) {
            throw ParseError(ParseErrorKind::Truncated,
                             "needs " + std::to_string(n) + " bytes at offset " +
                                 std::to_string(pos_) + ", " + std::to_string(remaining()) +
                                 " left");
        }
    }

private:
    std::uint64_t uint(int n) {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }
    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

[[noreturn]] void malformed(const std::string& msg) {
    throw ParseError(ParseErrorKind::Malformed, msg);
}

// a·b, or nullopt on overflow.
std::optional<std::size_t> checked_mul(std::size_t a, std::size_t b) {
    if (a != 0 && b > std::numeric_limits<std::size_t>::max() / a) return std::nullopt;
    return a * b;
}

void write_blob_body(Writer& w, const TensorBlob& blob) {
    if (blob.shape.size() > kMaxRank) throw ArgumentError("tensor rank above 8");
    w.u8(static_cast<std::uint8_t>(blob.shape.size()));
    for (auto d : blob.shape) {
        if (d > std::numeric_limits<std::uint32_t>::max()) throw ArgumentError("dimension too large");
        w.u32(static_cast<std::uint32_t>(d));
    }
    w.u8(static_cast<std::uint8_t>(blob.dtype));
    if (blob.payload.size() != blob.numel() * dtype_size(blob.dtype)) {
        throw ArgumentError("tensor payload length does not match its shape");
    }
    w.bytes(blob.payload);
}

TensorBlob read_blob_body(Reader& r) {
    TensorBlob blob;
    const auto rank = r.u8();
    if (rank > kMaxRank) malformed("tensor rank " + std::to_string(rank));
    std::size_t numel = 1;
    for (std::uint8_t i = 0; i < rank; ++i) {
        const std::size_t d = r.u32();
        blob.shape.push_back(d);
        auto n = checked_mul(numel, d);
        if (!n) malformed("tensor element count overflows");
        numel = *n;
    }
    const auto dt = r.u8();
    if (dt > static_cast<std::uint8_t>(DType::U8)) malformed("unknown dtype " + std::to_string(dt));
    blob.dtype = static_cast<DType>(dt);
    auto len = checked_mul(numel, dtype_size(blob.dtype));
    if (!len) malformed("tensor payload length overflows");
    auto b = r.bytes(*len);
    blob.payload.assign(b.begin(), b.end());
    return blob;
}

std::uint32_t float_bits(float f) { return std::bit_cast<std::uint32_t>(f); }

}  // namespace

std::size_t dtype_size(DType dtype) {
    switch (dtype) {
        case DType::F32: return 4;
        case DType::F16: return 2;
        case DType::U8: return 1;
    }
    throw ArgumentError("unknown dtype");
}

// ---------------------------------------------------------------------------
// Tensors

TensorBlob TensorBlob::from_tensor(const Tensor& t, DType dtype) {
    TensorBlob blob;
    blob.shape = t.shape();
    blob.dtype = dtype;
    Bytes& p = blob.payload;
    p.reserve(t.size() * dtype_size(dtype));
    for (float v : t.data()) {
        switch (dtype) {
            case DType::F32: {
                const auto bits = float_bits(v);
                for (int i = 0; i < 4; ++i) p.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
                break;
            }
            case DType::F16: {
                const auto h = float_to_half(v);
                p.push_back(static_cast<std::uint8_t>(h));
                p.push_back(static_cast<std::uint8_t>(h >> 8));
                break;
            }
            case DType::U8:
                if (!(v >= 0.0f && v <= 255.0f) || v != std::floor(v)) {
                    throw ArgumentError("value " + std::to_string(v) + " is not a u8");
                }
                p.push_back(static_cast<std::uint8_t>(v));
                break;
        }
    }
    return blob;
}

Tensor TensorBlob::to_tensor() const {
    Tensor t(shape);
    const std::uint8_t* p = payload.data();
    for (std::size_t i = 0; i < t.size(); ++i) {
        switch (dtype) {
            case DType::F32: {
                std::uint32_t bits = 0;
                for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[4 * i + b]) << (8 * b);
                t[i] = std::bit_cast<float>(bits);
                break;
            }
            case DType::F16:
                t[i] = half_to_float(static_cast<std::uint16_t>(p[2 * i] | (p[2 * i + 1] << 8)));
                break;
            case DType::U8:
                t[i] = static_cast<float>(p[i]);
                break;
        }
    }
    return t;
}

Bytes encode_tensor(const TensorBlob& blob) {
    Bytes out;
    Writer w(out);
    w.magic(kTensorMagic);
    w.u16(kFormatVersion);
    write_blob_body(w, blob);
    return out;
}

TensorBlob decode_tensor(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    r.magic(kTensorMagic, "tensor file");
    r.version();
    TensorBlob blob = read_blob_body(r);
    if (!r.done()) malformed(std::to_string(r.remaining()) + " trailing bytes after tensor");
    return blob;
}

Bytes read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArgumentError("cannot open " + path.string());
    return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ArgumentError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ArgumentError("write failed for " + path.string());
}

void save_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype) {
    write_file(path, encode_tensor(TensorBlob::from_tensor(t, dtype)));
}

Tensor load_tensor(const std::filesystem::path& path) {
    return decode_tensor(read_file(path)).to_tensor();
}

// ---------------------------------------------------------------------------
// Bundles, dense models and datasets

const TensorBlob* TensorBundle::find(const std::string& key) const {
    for (const auto& [k, b] : entries)
        if (k == key) return &b;
    return nullptr;
}

Bytes encode_bundle(const TensorBundle& bundle) {
    Bytes out;
    Writer w(out);
    w.magic(kBundleMagic);
    w.u16(kFormatVersion);
    for (const auto& [key, blob] : bundle.entries) {
        w.string(key);
        const Bytes t = encode_tensor(blob);
        w.bytes(t);
    }
    return out;
}

TensorBundle decode_bundle(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    r.magic(kBundleMagic, "tensor bundle");
    r.version();
    TensorBundle bundle;
    std::set<std::string> seen;
    while (!r.done()) {
        std::string key = r.string();
        if (!seen.insert(key).second) malformed("duplicate bundle key '" + key + "'");
        r.magic(kTensorMagic, "tensor record");
        r.version();
        bundle.entries.emplace_back(std::move(key), read_blob_body(r));
    }
    return bundle;
}

Bytes save_dense(const Network& net) {
    TensorBundle bundle;
    for (const auto& [key, t] : net.tensors()) bundle.entries.emplace_back(key, TensorBlob::from_tensor(*t));
    return encode_bundle(bundle);
}

void load_dense(std::span<const std::uint8_t> bytes, Network& skeleton) {
    const TensorBundle bundle = decode_bundle(bytes);
    auto tensors = skeleton.tensors();
    for (const auto& [key, blob] : bundle.entries) {
        if (!tensors.count(key)) malformed("bundle tensor '" + key + "' has no matching layer");
    }
    for (auto& [key, t] : tensors) {
        const TensorBlob* blob = bundle.find(key);
        if (!blob) malformed("bundle lacks tensor '" + key + "'");
        if (blob->shape != t->shape()) {
            throw ShapeError("tensor " + key + ": file has " + shape_str(blob->shape) +
                             ", architecture expects " + shape_str(t->shape()));
        }
        *t = blob->to_tensor();
    }
}

Bytes save_dataset(const InMemoryDataset& data) {
    TensorBundle bundle;
    bundle.entries.emplace_back("images", TensorBlob::from_tensor(data.all_images()));
    if (const auto& labels = data.labels()) {
        Tensor l({labels->size()});
        for (std::size_t i = 0; i < labels->size(); ++i) {
            if ((*labels)[i] > 255) throw ArgumentError("labels above 255 cannot be stored as u8");
            l[i] = static_cast<float>((*labels)[i]);
        }
        bundle.entries.emplace_back("labels", TensorBlob::from_tensor(l, DType::U8));
    }
    return encode_bundle(bundle);
}

InMemoryDataset load_dataset(std::span<const std::uint8_t> bytes) {
    const TensorBundle bundle = decode_bundle(bytes);
    const TensorBlob* images = bundle.find("images");
    if (!images) malformed("dataset lacks 'images'");
    if (images->shape.size() < 2) malformed("dataset images need a batch axis");
    std::optional<std::vector<int>> labels;
    if (const TensorBlob* l = bundle.find("labels")) {
        const Tensor t = l->to_tensor();
        if (t.rank() != 1 || t.size() != images->shape[0]) malformed("labels do not match images");
        labels.emplace();
        for (float v : t.data()) labels->push_back(static_cast<int>(v));
    }
    return InMemoryDataset(images->to_tensor(), std::move(labels));
}

// ---------------------------------------------------------------------------
// Architecture grammar

namespace {

struct ArchParser {
    Network net;
    std::map<std::string, std::size_t> line_of;
    std::size_t line = 0;
    bool have_input = false;
    bool have_classifier = false;
    enum class State { None, Plain, Main, Shortcut } state = State::None;

    [[noreturn]] void fail(const std::string& msg) const { throw ConfigError(line, msg); }

    std::size_t number(const std::string& tok) const {
        std::size_t pos = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(tok, &pos);
        } catch (const std::exception&) {
            fail("expected a number, got '" + tok + "'");
        }
        if (pos != tok.size() || tok.front() == '-') fail("expected a number, got '" + tok + "'");
        return static_cast<std::size_t>(v);
    }

    bool flag(const std::string& tok) const {
        if (tok == "bias" || tok == "1") return true;
        if (tok == "nobias" || tok == "0") return false;
        fail("expected bias or nobias, got '" + tok + "'");
    }

    void arity(const std::vector<std::string>& t, std::size_t n) const {
        if (t.size() != n) {
            fail("'" + t[0] + (t.size() > 1 && t[0] == "layer" ? " " + t[1] : "") + "' takes " +
                 std::to_string(n - 1) + " fields, got " + std::to_string(t.size() - 1));
        }
    }

    Linear linear(std::size_t c_in, std::size_t c_out, bool bias) const {
        if (c_in == 0 || c_out == 0) fail("linear sizes must be positive");
        Linear l;
        l.c_in = c_in;
        l.c_out = c_out;
        l.has_bias = bias;
        l.weight = Tensor({c_in, c_out});
        if (bias) l.bias = Tensor({c_out});
        return l;
    }

    Layer layer(const std::vector<std::string>& t) const {
        if (t.size() < 2) fail("'layer' needs a type");
        const std::string& type = t[1];
        if (type == "conv") {
            arity(t, 9);
            Conv2d c;
            c.shape = {number(t[3]), number(t[2]), number(t[4]),
                       number(t[5]), number(t[6]), number(t[7])};
            try {
                c.shape.validate();
            } catch (const Error& e) {
                fail(e.what());
            }
            c.has_bias = flag(t[8]);
            c.weight = Tensor(c.shape.weight_shape());
            if (c.has_bias) c.bias = Tensor({c.shape.c_out});
            return c;
        }
        if (type == "linear") {
            arity(t, 5);
            return linear(number(t[2]), number(t[3]), flag(t[4]));
        }
        if (type == "bn") {
            arity(t, 3);
            BatchNorm2d b;
            b.channels = number(t[2]);
            if (b.channels == 0) fail("bn channels must be positive");
            b.gamma = Tensor({b.channels}, 1.0f);
            b.beta = Tensor({b.channels});
            b.running_mean = Tensor({b.channels});
            b.running_var = Tensor({b.channels}, 1.0f);
            return b;
        }
        if (type != "relu" && type != "gap" && type != "flatten") {
            fail("unknown layer type '" + type + "'");
        }
        arity(t, 2);
        if (type == "relu") return ReLU{};
        if (type == "gap") return GlobalAvgPool{};
        return Flatten{};
    }

    void add(Layer l) {
        if (have_classifier) fail("layers after the classifier");
        Block& b = net.blocks.back();
        std::string id = "b" + std::to_string(net.blocks.size() - 1) + ".";
        switch (state) {
            case State::None: fail("layer outside a block; start one with 'block' or 'residual'");
            case State::Plain: id += std::to_string(b.main.size()); break;
            case State::Main: id += "main." + std::to_string(b.main.size()); break;
            case State::Shortcut: id += "short." + std::to_string(b.shortcut.size()); break;
        }
        line_of[id] = line;
        (state == State::Shortcut ? b.shortcut : b.main).push_back({id, std::move(l)});
    }

    void open(Block::Kind kind) {
        if (state == State::Main || state == State::Shortcut) fail("residual block not closed with 'end'");
        if (have_classifier) fail("blocks after the classifier");
        net.blocks.push_back({kind, {}, {}});
        state = kind == Block::Kind::Plain ? State::Plain : State::Main;
    }

    void statement(const std::vector<std::string>& t) {
        const std::string& kw = t[0];
        if (kw == "input") {
            if (have_input) fail("duplicate 'input'");
            if (t.size() != 2 && t.size() != 4) fail("'input' takes N or C H W");
            for (std::size_t i = 1; i < t.size(); ++i) {
                const auto v = number(t[i]);
                if (v == 0) fail("input sizes must be positive");
                net.input_shape.push_back(v);
            }
            have_input = true;
        } else if (kw == "block") {
            arity(t, 1);
            open(Block::Kind::Plain);
        } else if (kw == "residual") {
            arity(t, 1);
            open(Block::Kind::Residual);
        } else if (kw == "shortcut") {
            arity(t, 1);
            if (state != State::Main) fail("'shortcut' outside a residual block");
            state = State::Shortcut;
        } else if (kw == "end") {
            arity(t, 1);
            if (state != State::Main && state != State::Shortcut) fail("'end' without 'residual'");
            state = State::None;
        } else if (kw == "layer") {
            add(layer(t));
        } else if (kw == "classifier") {
            arity(t, 4);
            if (have_classifier) fail("duplicate 'classifier'");
            if (state == State::Main || state == State::Shortcut) fail("residual block not closed with 'end'");
            net.classifier = {"classifier", linear(number(t[1]), number(t[2]), flag(t[3]))};
            line_of["classifier"] = line;
            have_classifier = true;
            state = State::None;
        } else {
            fail("unknown keyword '" + kw + "'");
        }
    }

    Network run(const std::string& text) {
        std::istringstream in(text);
        std::string raw;
        while (std::getline(in, raw)) {
            ++line;
            if (auto hash = raw.find('#'); hash != std::string::npos) raw.resize(hash);
            std::istringstream ls(raw);
            std::vector<std::string> tokens;
            for (std::string tok; ls >> tok;) tokens.push_back(tok);
            if (!tokens.empty()) statement(tokens);
        }
        ++line;
        if (state == State::Main || state == State::Shortcut) fail("residual block not closed with 'end'");
        if (!have_input) fail("missing 'input'");
        if (!have_classifier) fail("missing 'classifier'");
        try {
            net.validate();
        } catch (const ShapeError& e) {
            // Messages read "layer <id>: ..."; point at that layer's line.
            const std::string msg = e.what();
            std::size_t at = line;
            for (const auto& [id, l] : line_of) {
                if (msg.rfind("layer " + id + ":", 0) == 0) at = l;
            }
            throw ConfigError(at, msg);
        }
        return std::move(net);
    }
};

std::string bias_word(bool b) { return b ? "bias" : "nobias"; }

std::string format_layer(const Layer& layer) {
    std::ostringstream os;
    std::visit(
        [&](const auto& l) {
            using L = std::remove_cvref_t<decltype(l)>;
            if constexpr (std::is_same_v<L, Conv2d>) {
                os << "layer conv " << l.shape.c_in << ' ' << l.shape.c_out << ' ' << l.shape.k << ' '
                   << l.shape.stride << ' ' << l.shape.padding << ' ' << l.shape.groups << ' '
                   << bias_word(l.has_bias);
            } else if constexpr (std::is_same_v<L, Linear>) {
                os << "layer linear " << l.c_in << ' ' << l.c_out << ' ' << bias_word(l.has_bias);
            } else if constexpr (std::is_same_v<L, BatchNorm2d>) {
                os << "layer bn " << l.channels;
            } else if constexpr (std::is_same_v<L, ReLU>) {
                os << "layer relu";
            } else if constexpr (std::is_same_v<L, GlobalAvgPool>) {
                os << "layer gap";
            } else {
                os << "layer flatten";
            }
        },
        layer);
    return os.str();
}

}  // namespace

Network parse_architecture(const std::string& text) { return ArchParser{}.run(text); }

Network load_architecture(const std::filesystem::path& path) {
    const Bytes b = read_file(path);
    return parse_architecture(std::string(b.begin(), b.end()));
}

std::string format_architecture(const Network& net) {
    std::ostringstream os;
    os << "input";
    for (auto d : net.input_shape) os << ' ' << d;
    os << '\n';
    for (const auto& b : net.blocks) {
        const bool residual = b.kind == Block::Kind::Residual;
        os << (residual ? "residual\n" : "block\n");
        for (const auto& n : b.main) os << "  " << format_layer(n.layer) << '\n';
        if (residual) {
            if (!b.shortcut.empty()) os << "shortcut\n";
            for (const auto& n : b.shortcut) os << "  " << format_layer(n.layer) << '\n';
            os << "end\n";
        }
    }
    const auto& c = std::get<Linear>(net.classifier.layer);
    os << "classifier " << c.c_in << ' ' << c.c_out << ' ' << bias_word(c.has_bias) << '\n';
    return os.str();
}

std::string toy_cnn_architecture() {
    return R"(# three 3x3 convolutions on 8x8 grayscale images
input 1 8 8
block
  layer conv 1 8 3 1 1 1 nobias
  layer bn 8
  layer relu
block
  layer conv 8 16 3 2 1 1 nobias
  layer bn 16
  layer relu
block
  layer conv 16 16 3 1 1 2 nobias
  layer bn 16
  layer relu
  layer gap
classifier 16 2 bias
)";
}

std::string toy_resnet_architecture() {
    return R"(input 1 8 8
block
  layer conv 1 8 3 1 1 1 nobias
  layer bn 8
  layer relu
residual
  layer conv 8 8 3 1 1 1 nobias
  layer bn 8
  layer relu
  layer conv 8 8 3 1 1 1 nobias
  layer bn 8
end
block
  layer relu
residual
  layer conv 8 16 3 2 1 1 nobias
  layer bn 16
  layer relu
  layer conv 16 16 3 1 1 2 nobias
  layer bn 16
shortcut
  layer conv 8 16 1 2 0 1 nobias
  layer bn 16
end
block
  layer relu
  layer gap
classifier 16 2 bias
)";
}

// ---------------------------------------------------------------------------
// Compressed models

CompressedModel compress(const CompressedStudent& student) {
    CompressedModel model;
    model.seed = student.seed;
    std::set<std::string> quantized;
    for (const auto& q : student.layers) {
        QuantizedRecord rec;
        rec.geometry = q.geometry;
        rec.d = q.d();
        rec.k = q.k();
        if (rec.k == 0 || rec.k > kMaxCodewords) {
            throw ArgumentError("layer " + q.id + ": k=" + std::to_string(rec.k) + " cannot be stored");
        }
        rec.indices = q.assignments.indices;
        rec.centroids.reserve(rec.k * rec.d);
        for (double c : q.codebook.centroids.data())
            rec.centroids.push_back(float_to_half(static_cast<float>(c)));
        model.records.push_back({q.id, std::move(rec)});
        quantized.insert(q.id + ".weight");
    }
    for (const auto& [key, t] : student.net.tensors()) {
        if (!quantized.count(key)) model.records.push_back({key, TensorBlob::from_tensor(*t)});
    }
    return model;
}

namespace {

void write_geometry(Writer& w, const LayerGeometry& g) {
    auto u32 = [&](std::size_t v) {
        if (v > std::numeric_limits<std::uint32_t>::max()) throw ArgumentError("geometry field too large");
        w.u32(static_cast<std::uint32_t>(v));
    };
    w.u8(static_cast<std::uint8_t>(g.kind));
    if (g.kind == LayerKind::Linear) {
        u32(g.c_in);
        u32(g.c_out);
    } else {
        u32(g.conv.c_out);
        u32(g.conv.c_in);
        u32(g.conv.k);
        u32(g.conv.stride);
        u32(g.conv.padding);
        u32(g.conv.groups);
    }
}

LayerGeometry read_geometry(Reader& r) {
    LayerGeometry g;
    const auto kind = r.u8();
    if (kind == static_cast<std::uint8_t>(LayerKind::Linear)) {
        g.kind = LayerKind::Linear;
        g.c_in = r.u32();
        g.c_out = r.u32();
        if (g.c_in == 0 || g.c_out == 0) malformed("linear layer with a zero dimension");
    } else if (kind == static_cast<std::uint8_t>(LayerKind::Conv)) {
        g.kind = LayerKind::Conv;
        ConvShape& s = g.conv;
        s.c_out = r.u32();
        s.c_in = r.u32();
        s.k = r.u32();
        s.stride = r.u32();
        s.padding = r.u32();
        s.groups = r.u32();
        try {
            s.validate();
        } catch (const Error& e) {
            malformed(std::string("conv geometry: ") + e.what());
        }
        if (!checked_mul(s.k, s.k) || !checked_mul(s.k * s.k, s.in_per_group())) {
            malformed("conv geometry overflows");
        }
        g.c_in = s.c_in;
        g.c_out = s.c_out;
    } else {
        malformed("unknown layer kind " + std::to_string(kind));
    }
    return g;
}

}  // namespace

Bytes save_compressed(const CompressedModel& model) {
    Bytes out;
    out.reserve(compressed_size(model));
    Writer w(out);
    w.magic(kModelMagic);
    w.u16(kFormatVersion);
    w.u64(model.seed);
    for (const auto& rec : model.records) {
        w.string(rec.id);
        if (const auto* q = std::get_if<QuantizedRecord>(&rec.body)) {
            const std::size_t m_total = q->geometry.rows() * q->geometry.cols() / std::max<std::size_t>(q->d, 1);
            if (q->d == 0 || q->d > 0xffff || q->geometry.rows() % q->d != 0 ||
                q->indices.size() != m_total || q->k == 0 || q->k > kMaxCodewords ||
                q->centroids.size() != q->k * q->d) {
                throw ArgumentError("record " + rec.id + " has inconsistent metadata");
            }
            w.u8(kQuantized);
            write_geometry(w, q->geometry);
            w.u16(static_cast<std::uint16_t>(q->d));
            w.u16(static_cast<std::uint16_t>(q->k));
            const auto width = q->index_width();
            w.u8(static_cast<std::uint8_t>(width));
            for (auto idx : q->indices) {
                if (idx >= q->k) throw CorruptionError("record " + rec.id + ": index >= k");
                if (width == 1) w.u8(static_cast<std::uint8_t>(idx));
                else w.u16(static_cast<std::uint16_t>(idx));
            }
            for (auto c : q->centroids) w.u16(c);
        } else {
            w.u8(kRaw);
            write_blob_body(w, std::get<TensorBlob>(rec.body));
        }
    }
    return out;
}

CompressedModel load_compressed(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    r.magic(kModelMagic, "compressed model file");
    r.version();
    CompressedModel model;
    model.seed = r.u64();
    std::set<std::string> ids;
    while (!r.done()) {
        ModelRecord rec;
        rec.id = r.string();
        if (rec.id.empty()) malformed("empty record id");
        if (!ids.insert(rec.id).second) malformed("duplicate record '" + rec.id + "'");
        const auto kind = r.u8();
        if (kind == kQuantized) {
            QuantizedRecord q;
            q.geometry = read_geometry(r);
            q.d = r.u16();
            q.k = r.u16();
            const auto width = r.u8();
            const std::size_t rows = q.geometry.rows();
            if (q.d == 0 || rows % q.d != 0) malformed("record " + rec.id + ": d does not divide rows");
            if (q.k == 0) malformed("record " + rec.id + ": k = 0");
            if (width != q.index_width()) {
                malformed("record " + rec.id + ": index width " + std::to_string(width) +
                          " for k=" + std::to_string(q.k));
            }
            const auto m_total = checked_mul(rows / q.d, q.geometry.cols());
            if (!m_total || !checked_mul(*m_total, width)) malformed("record " + rec.id + ": size overflows");
            auto raw = r.bytes(*m_total * width);
            q.indices.resize(*m_total);
            for (std::size_t i = 0; i < *m_total; ++i) {
                const std::uint32_t idx =
                    width == 1 ? raw[i] : static_cast<std::uint32_t>(raw[2 * i] | (raw[2 * i + 1] << 8));
                if (idx >= q.k) {
                    throw ParseError(ParseErrorKind::IndexOutOfRange,
                                     "record " + rec.id + ": index " + std::to_string(idx) +
                                         " >= k=" + std::to_string(q.k));
                }
                q.indices[i] = idx;
            }
            auto cb = r.bytes(q.k * q.d * 2);
            q.centroids.resize(q.k * q.d);
            for (std::size_t i = 0; i < q.centroids.size(); ++i) {
                const auto h = static_cast<std::uint16_t>(cb[2 * i] | (cb[2 * i + 1] << 8));
                if ((h & 0x7c00) == 0x7c00) malformed("record " + rec.id + ": non-finite centroid");
                q.centroids[i] = h;
            }
            rec.body = std::move(q);
        } else if (kind == kRaw) {
            rec.body = read_blob_body(r);
        } else {
            malformed("record " + rec.id + ": unknown kind " + std::to_string(kind));
        }
        model.records.push_back(std::move(rec));
    }
    return model;
}

std::size_t compressed_size(const CompressedModel& model) {
    std::size_t n = 4 + 2 + 8;
    for (const auto& rec : model.records) {
        n += 2 + rec.id.size() + 1;
        if (const auto* q = std::get_if<QuantizedRecord>(&rec.body)) {
            n += 1 + (q->geometry.kind == LayerKind::Linear ? 2 : 6) * 4;
            n += 2 + 2 + 1 + q->indices.size() * q->index_width() + q->k * q->d * 2;
        } else {
            const auto& b = std::get<TensorBlob>(rec.body);
            n += 1 + 4 * b.shape.size() + 1 + b.numel() * dtype_size(b.dtype);
        }
    }
    return n;
}

CompressedStudent materialize(const CompressedModel& model, Network skeleton,
                              std::size_t* index_reads) {
    CompressedStudent student;
    student.seed = model.seed;
    student.net = std::move(skeleton);
    student.net.mode = Mode::Eval;
    auto tensors = student.net.tensors();
    std::set<std::string> filled;
    for (const auto& rec : model.records) {
        if (const auto* q = std::get_if<QuantizedRecord>(&rec.body)) {
            const LayerNode* node = student.net.find(rec.id);
            if (!node) throw ShapeError("compressed layer " + rec.id + " is not in the architecture");
            const LayerGeometry expected = LayerGeometry::of(node->layer);
            if (!(expected == q->geometry)) {
                throw ShapeError("layer " + rec.id + ": stored geometry differs from the architecture");
            }
            QuantizedLayer ql;
            ql.id = rec.id;
            ql.geometry = q->geometry;
            ql.codebook.centroids = DTensor({q->k, q->d});
            for (std::size_t i = 0; i < q->centroids.size(); ++i)
                ql.codebook.centroids[i] = static_cast<double>(half_to_float(q->centroids[i]));
            ql.assignments.indices = q->indices;
            *tensors.at(rec.id + ".weight") = reconstruct_layer(ql, index_reads);
            filled.insert(rec.id + ".weight");
            student.layers.push_back(std::move(ql));
        } else {
            auto it = tensors.find(rec.id);
            if (it == tensors.end()) throw ShapeError("stored tensor " + rec.id + " is not in the architecture");
            const auto& blob = std::get<TensorBlob>(rec.body);
            if (blob.shape != it->second->shape()) {
                throw ShapeError("tensor " + rec.id + ": stored " + shape_str(blob.shape) +
                                 ", architecture expects " + shape_str(it->second->shape()));
            }
            *it->second = blob.to_tensor();
            filled.insert(rec.id);
        }
    }
    for (const auto& [key, t] : tensors) {
        if (!filled.count(key)) throw ShapeError("compressed model lacks tensor " + key);
    }
    return student;
}

Tensor forward_compressed(const CompressedStudent& loaded, const Tensor& x) {
    return predict(loaded.net, x);
}

CompressedStudent with_half_codebooks(CompressedStudent student) {
    for (auto& q : student.layers) {
        for (auto& c : q.codebook.centroids.storage())
            c = static_cast<double>(round_to_half(static_cast<float>(c)));
    }
    student.install();
    return student;
}

// ---------------------------------------------------------------------------
// Footprint

LayerFootprint layer_footprint(std::size_t subvectors, std::size_t k, std::size_t d) {
    LayerFootprint f;
    f.quantized = true;
    f.index_bytes = subvectors * (k <= 256 ? 1 : 2);
    f.centroid_bytes = k * d * 2;
    f.dense_bytes = subvectors * d * 4;
    return f;
}

std::size_t FootprintReport::index_bytes() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.index_bytes;
    return n;
}

std::size_t FootprintReport::centroid_bytes() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.centroid_bytes;
    return n;
}

std::size_t FootprintReport::raw_bytes() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.raw_bytes;
    return n;
}

std::size_t FootprintReport::total_bytes() const {
    return index_bytes() + centroid_bytes() + raw_bytes();
}

std::size_t FootprintReport::dense_bytes() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.dense_bytes;
    return n;
}

double FootprintReport::compression_ratio() const {
    const auto total = total_bytes();
    return total ? static_cast<double>(dense_bytes()) / static_cast<double>(total) : 0.0;
}

FootprintReport footprint(const CompressedModel& model) {
    FootprintReport report;
    for (const auto& rec : model.records) {
        LayerFootprint f;
        if (const auto* q = std::get_if<QuantizedRecord>(&rec.body)) {
            f = layer_footprint(q->indices.size(), q->k, q->d);
        } else {
            const auto& b = std::get<TensorBlob>(rec.body);
            f.raw_bytes = b.numel() * 4;
            f.dense_bytes = f.raw_bytes;
        }
        f.id = rec.id;
        report.entries.push_back(f);
    }
    return report;
}

}  // namespace pqnet
