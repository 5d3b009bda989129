#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "pqnet/data.hpp"
#include "pqnet/netgraph.hpp"
#include "pqnet/pipeline.hpp"

namespace pqnet {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::uint16_t kFormatVersion = 1;

enum class DType : std::uint8_t { F32 = 0, F16 = 1, U8 = 2 };

std::size_t dtype_size(DType dtype);

/// A tensor exactly as stored: shape, element type and little-endian payload.
struct TensorBlob {
    Shape shape;
    DType dtype = DType::F32;
    Bytes payload;

    /// U8 requires integral values in [0, 255].
    static TensorBlob from_tensor(const Tensor& t, DType dtype = DType::F32);
    Tensor to_tensor() const;
    std::size_t numel() const { return shape_numel(shape); }

    bool operator==(const TensorBlob&) const = default;
};

// "PQTN" tensor file.
Bytes encode_tensor(const TensorBlob& blob);
TensorBlob decode_tensor(std::span<const std::uint8_t> bytes);

Bytes read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

void save_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype = DType::F32);
Tensor load_tensor(const std::filesystem::path& path);

// "PQTB" bundle: named tensor files in insertion order.
struct TensorBundle {
    std::vector<std::pair<std::string, TensorBlob>> entries;

    const TensorBlob* find(const std::string& key) const;
};

Bytes encode_bundle(const TensorBundle& bundle);
TensorBundle decode_bundle(std::span<const std::uint8_t> bytes);

/// Dense model weights keyed "<layer id>.<tensor>".
Bytes save_dense(const Network& net);
/// Fill every tensor of `skeleton` from the bundle; shapes must match.
void load_dense(std::span<const std::uint8_t> bytes, Network& skeleton);

/// Dataset as a bundle with "images" (f32) and optional "labels" (u8).
Bytes save_dataset(const InMemoryDataset& data);
InMemoryDataset load_dataset(std::span<const std::uint8_t> bytes);

/// Parse the line-oriented architecture grammar:
///
///   input C H W | input N
///   block                    plain block; following layers belong to it
///   residual ... [shortcut ...] end
///   layer conv c_in c_out k stride padding groups bias|nobias
///   layer linear c_in c_out bias|nobias
///   layer bn channels
///   layer relu | layer gap | layer flatten
///   classifier c_in c_out bias|nobias
///
/// '#' starts a comment. Layer ids are b<i>.<j> in plain blocks and
/// b<i>.main.<j> / b<i>.short.<j> in residual blocks. Parameters are
/// allocated with zero weights and identity BatchNorm.
Network parse_architecture(const std::string& text);
Network load_architecture(const std::filesystem::path& path);
/// Inverse of parse_architecture up to whitespace and comments.
std::string format_architecture(const Network& net);

/// Three 3×3 conv layers on 8×8 single-channel images, two classes.
std::string toy_cnn_architecture();
/// Two residual blocks, one with a projection shortcut.
std::string toy_resnet_architecture();

// Compressed model.

struct QuantizedRecord {
    LayerGeometry geometry;
    std::size_t d = 0;
    std::size_t k = 0;
    std::vector<std::uint32_t> indices;
    std::vector<std::uint16_t> centroids;  // k·d binary16, row-major

    std::size_t index_width() const { return k <= 256 ? 1 : 2; }
    bool operator==(const QuantizedRecord&) const = default;
};

struct ModelRecord {
    std::string id;  // layer id for quantized weights, tensor key for raw ones
    std::variant<QuantizedRecord, TensorBlob> body;

    bool operator==(const ModelRecord&) const = default;
};

struct CompressedModel {
    std::uint64_t seed = 0;
    std::vector<ModelRecord> records;

    bool operator==(const CompressedModel&) const = default;
};

/// Quantized layers as codebooks (centroids rounded to binary16), every
/// other tensor raw in f32.
CompressedModel compress(const CompressedStudent& student);

Bytes save_compressed(const CompressedModel& model);
/// Throws ParseError classified by ParseErrorKind; never reads out of
/// bounds.
CompressedModel load_compressed(std::span<const std::uint8_t> bytes);
/// File length computed from metadata alone.
std::size_t compressed_size(const CompressedModel& model);

/// Rebuild a student on `skeleton`: quantized weights are reconstructed from
/// f16-decoded centroids, raw tensors are copied. `index_reads` counts every
/// index consumed.
CompressedStudent materialize(const CompressedModel& model, Network skeleton,
                              std::size_t* index_reads = nullptr);

/// Logits of a materialized student.
Tensor forward_compressed(const CompressedStudent& loaded, const Tensor& x);

/// Copy of `student` with every centroid rounded through binary16.
CompressedStudent with_half_codebooks(CompressedStudent student);

// Footprint accounting.

struct LayerFootprint {
    std::string id;
    bool quantized = false;
    std::size_t index_bytes = 0;
    std::size_t centroid_bytes = 0;
    std::size_t raw_bytes = 0;
    std::size_t dense_bytes = 0;  // same tensor as f32

    std::size_t total() const { return index_bytes + centroid_bytes + raw_bytes; }
};

struct FootprintReport {
    std::vector<LayerFootprint> entries;

    std::size_t index_bytes() const;
    std::size_t centroid_bytes() const;
    std::size_t raw_bytes() const;
    std::size_t total_bytes() const;
    std::size_t dense_bytes() const;
    /// dense / compressed; 0 for an empty report.
    double compression_ratio() const;
};

/// Quantized layer with `subvectors` indices and a k×d binary16 codebook.
LayerFootprint layer_footprint(std::size_t subvectors, std::size_t k, std::size_t d);
FootprintReport footprint(const CompressedModel& model);

/// Bytes / 1000.
inline double kilobytes(std::size_t bytes) { return static_cast<double>(bytes) / 1000.0; }

}  // namespace pqnet
