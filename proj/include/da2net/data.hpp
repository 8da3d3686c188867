#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "da2net/rng.hpp"
#include "da2net/tensor.hpp"

namespace da2 {

inline constexpr std::int64_t kImageExtent = 32;
inline constexpr std::int64_t kImageBytes = 3 * kImageExtent * kImageExtent;  // 3072
inline constexpr std::int64_t kCifar100RecordBytes = 2 + kImageBytes;        // 3074

/// Images (M,3,H,W) in [0,1] and integer labels.
struct Dataset {
    Tensor images;
    std::vector<int> labels;
    int classes = 0;
    // CIFAR-100 only: the coarse label byte, kept so records re-serialize exactly.
    std::vector<int> coarse_labels;

    std::size_t size() const { return labels.size(); }
    std::int64_t height() const { return images.dim(2); }
    std::int64_t width() const { return images.dim(3); }

    /// Copy of one image as (3,H,W).
    Tensor image(std::size_t i) const;

    void validate() const;
};

enum class Split { Train, Test };

/// Reads <dir>/train.bin or <dir>/test.bin in the CIFAR-100 binary layout
/// (coarse byte, fine byte, 3072 R/G/B plane bytes). Fine labels are used.
Dataset load_cifar100(const std::filesystem::path& dir, Split split = Split::Train);
Dataset load_cifar100_file(const std::filesystem::path& file);
Dataset parse_cifar100(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>");
std::vector<std::uint8_t> serialize_cifar100(const Dataset& ds);

/// "DA2D" container: magic, u32 version=1, u32 classes, u32 records, then
/// records of one u8 label and 3072 pixel bytes.
Dataset load_converted(const std::filesystem::path& file);
Dataset parse_converted(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>");
std::vector<std::uint8_t> serialize_converted(const Dataset& ds);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& file);
void write_file_bytes(const std::filesystem::path& file, std::span<const std::uint8_t> bytes);

struct AugmentSpec {
    int pad = 4;
    int crop = 32;
    double flip_probability = 0.5;
};

void validate_augment_spec(const AugmentSpec& spec, std::int64_t extent);

/// Zero-pad by spec.pad, crop at (top,left) of the padded image, optional
/// horizontal flip.
Tensor augment_at(const Tensor& img, const AugmentSpec& spec, int top, int left, bool flip);

/// Uniform crop offset and a flip with spec.flip_probability, drawn from rng.
Tensor augment(const Tensor& img, const AugmentSpec& spec, Rng& rng);

struct ChannelStats {
    std::vector<double> mean;
    std::vector<double> stddev;
};

ChannelStats compute_channel_stats(const Dataset& ds);

/// (img - mean) / std per channel; img is (C,H,W) or (N,C,H,W).
Tensor normalize(const Tensor& img, std::span<const double> mean, std::span<const double> stddev);

/// Class-conditional images: gratings under Gaussian envelopes, with spatial
/// frequency set by the class and orientation, phase, position and tint
/// random. Labels are balanced and grouped by class.
Dataset synth_dataset(int classes, int per_class, std::uint64_t seed, std::int64_t extent = kImageExtent);

}  // namespace da2
