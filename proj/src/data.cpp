#include "da2net/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <set>

namespace da2 {
namespace {

constexpr char kConvertedMagic[4] = {'D', 'A', '2', 'D'};
constexpr std::size_t kConvertedHeader = 16;

std::uint32_t read_u32le(const std::uint8_t* p) {
    return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
}

void put_u32le(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void decode_pixels(const std::uint8_t* src, float* dst) {
    for (std::int64_t i = 0; i < kImageBytes; ++i) dst[i] = static_cast<float>(src[i]) / 255.0f;
}

void encode_pixels(const float* src, std::vector<std::uint8_t>& out) {
    for (std::int64_t i = 0; i < kImageBytes; ++i) {
        const float v = std::clamp(src[i], 0.0f, 1.0f);
        out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
    }
}

}  // namespace

Tensor Dataset::image(std::size_t i) const {
    const auto C = images.dim(1), H = images.dim(2), W = images.dim(3);
    const auto n = C * H * W;
    std::vector<float> v(images.ptr() + static_cast<std::int64_t>(i) * n, images.ptr() + (static_cast<std::int64_t>(i) + 1) * n);
    return Tensor({C, H, W}, std::move(v));
}

void Dataset::validate() const {
    if (labels.empty()) throw FormatError("dataset is empty");
    if (images.rank() != 4 || images.dim(0) != static_cast<std::int64_t>(labels.size())) {
        throw FormatError("dataset images " + shape_str(images.shape()) + " do not match " +
                          std::to_string(labels.size()) + " labels");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= classes) {
            throw FormatError("label " + std::to_string(labels[i]) + " at record " + std::to_string(i) +
                              " outside [0," + std::to_string(classes) + ")");
        }
    }
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open " + file.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("error reading " + file.string());
    return bytes;
}

void write_file_bytes(const std::filesystem::path& file, std::span<const std::uint8_t> bytes) {
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + file.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("error writing " + file.string());
}

Dataset parse_cifar100(std::span<const std::uint8_t> bytes, const std::string& origin) {
    const auto total = static_cast<std::int64_t>(bytes.size());
    if (total % kCifar100RecordBytes != 0) {
        const auto whole = total / kCifar100RecordBytes;
        throw FormatError(origin + ": length " + std::to_string(total) + " is not a multiple of " +
                          std::to_string(kCifar100RecordBytes) + "; truncated record at offset " +
                          std::to_string(whole * kCifar100RecordBytes));
    }
    const auto M = total / kCifar100RecordBytes;
    if (M == 0) throw FormatError(origin + ": no records");
    Dataset ds;
    ds.classes = 100;
    ds.images = Tensor({M, 3, kImageExtent, kImageExtent});
    ds.labels.resize(static_cast<std::size_t>(M));
    ds.coarse_labels.resize(static_cast<std::size_t>(M));
    for (std::int64_t r = 0; r < M; ++r) {
        const std::uint8_t* rec = bytes.data() + r * kCifar100RecordBytes;
        if (rec[1] >= 100) {
            throw FormatError(origin + ": fine label " + std::to_string(rec[1]) + " out of range at offset " +
                              std::to_string(r * kCifar100RecordBytes + 1));
        }
        ds.coarse_labels[static_cast<std::size_t>(r)] = rec[0];
        ds.labels[static_cast<std::size_t>(r)] = rec[1];
        decode_pixels(rec + 2, ds.images.ptr() + r * kImageBytes);
    }
    return ds;
}

Dataset load_cifar100_file(const std::filesystem::path& file) {
    if (!std::filesystem::exists(file)) throw IoError("missing dataset file " + file.string());
    const auto bytes = read_file_bytes(file);
    return parse_cifar100(bytes, file.string());
}

Dataset load_cifar100(const std::filesystem::path& dir, Split split) {
    return load_cifar100_file(dir / (split == Split::Train ? "train.bin" : "test.bin"));
}

std::vector<std::uint8_t> serialize_cifar100(const Dataset& ds) {
    ds.validate();
    if (ds.images.dim(1) != 3 || ds.height() != kImageExtent || ds.width() != kImageExtent) {
        throw FormatError("CIFAR records hold 3x32x32 images, dataset has " + shape_str(ds.images.shape()));
    }
    std::vector<std::uint8_t> out;
    out.reserve(ds.size() * kCifar100RecordBytes);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        out.push_back(static_cast<std::uint8_t>(ds.coarse_labels.empty() ? 0 : ds.coarse_labels[i]));
        out.push_back(static_cast<std::uint8_t>(ds.labels[i]));
        encode_pixels(ds.images.ptr() + static_cast<std::int64_t>(i) * kImageBytes, out);
    }
    return out;
}

Dataset parse_converted(std::span<const std::uint8_t> bytes, const std::string& origin) {
    if (bytes.size() < kConvertedHeader || std::memcmp(bytes.data(), kConvertedMagic, 4) != 0) {
        throw FormatError(origin + ": missing DA2D header");
    }
    const auto version = read_u32le(bytes.data() + 4);
    const auto classes = read_u32le(bytes.data() + 8);
    const auto records = read_u32le(bytes.data() + 12);
    if (version != 1) throw FormatError(origin + ": unsupported DA2D version " + std::to_string(version));
    if (classes < 1 || classes > 256) throw FormatError(origin + ": class count " + std::to_string(classes) + " invalid");
    const std::uint64_t record_bytes = 1 + kImageBytes;
    const std::uint64_t expected = kConvertedHeader + std::uint64_t{records} * record_bytes;
    if (bytes.size() != expected) {
        throw FormatError(origin + ": expected " + std::to_string(expected) + " bytes for " + std::to_string(records) +
                          " records, got " + std::to_string(bytes.size()));
    }
    if (records == 0) throw FormatError(origin + ": no records");
    Dataset ds;
    ds.classes = static_cast<int>(classes);
    ds.images = Tensor({records, 3, kImageExtent, kImageExtent});
    ds.labels.resize(records);
    for (std::uint32_t r = 0; r < records; ++r) {
        const std::uint8_t* rec = bytes.data() + kConvertedHeader + r * record_bytes;
        if (rec[0] >= classes) {
            throw FormatError(origin + ": label " + std::to_string(rec[0]) + " out of range at offset " +
                              std::to_string(kConvertedHeader + r * record_bytes));
        }
        ds.labels[r] = rec[0];
        decode_pixels(rec + 1, ds.images.ptr() + static_cast<std::int64_t>(r) * kImageBytes);
    }
    return ds;
}

Dataset load_converted(const std::filesystem::path& file) {
    if (!std::filesystem::exists(file)) throw IoError("missing dataset file " + file.string());
    const auto bytes = read_file_bytes(file);
    return parse_converted(bytes, file.string());
}

std::vector<std::uint8_t> serialize_converted(const Dataset& ds) {
    ds.validate();
    if (ds.images.dim(1) != 3 || ds.height() != kImageExtent || ds.width() != kImageExtent) {
        throw FormatError("DA2D records hold 3x32x32 images, dataset has " + shape_str(ds.images.shape()));
    }
    if (ds.classes > 256) throw FormatError("DA2D labels are single bytes; too many classes");
    std::vector<std::uint8_t> out(kConvertedMagic, kConvertedMagic + 4);
    put_u32le(out, 1);
    put_u32le(out, static_cast<std::uint32_t>(ds.classes));
    put_u32le(out, static_cast<std::uint32_t>(ds.size()));
    for (std::size_t i = 0; i < ds.size(); ++i) {
        out.push_back(static_cast<std::uint8_t>(ds.labels[i]));
        encode_pixels(ds.images.ptr() + static_cast<std::int64_t>(i) * kImageBytes, out);
    }
    return out;
}

void validate_augment_spec(const AugmentSpec& spec, std::int64_t extent) {
    if (spec.pad < 0) throw ConfigError("augment pad must be >= 0");
    if (spec.crop < 1 || spec.crop > extent + 2 * spec.pad) {
        throw ConfigError("augment crop " + std::to_string(spec.crop) + " exceeds padded extent " +
                          std::to_string(extent + 2 * spec.pad));
    }
    if (spec.flip_probability < 0.0 || spec.flip_probability > 1.0) {
        throw ConfigError("flip probability must lie in [0,1]");
    }
}

Tensor augment_at(const Tensor& img, const AugmentSpec& spec, int top, int left, bool flip) {
    if (img.rank() != 3) throw ShapeError("augment expects a (C,H,W) image, got " + shape_str(img.shape()));
    const auto C = img.dim(0), H = img.dim(1), W = img.dim(2);
    const std::int64_t crop = spec.crop;
    Tensor out({C, crop, crop});
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t y = 0; y < crop; ++y) {
            const std::int64_t sy = y + top - spec.pad;
            for (std::int64_t x = 0; x < crop; ++x) {
                const std::int64_t ox = flip ? crop - 1 - x : x;
                const std::int64_t sx = ox + left - spec.pad;
                float v = 0.0f;
                if (sy >= 0 && sy < H && sx >= 0 && sx < W) v = img[static_cast<std::size_t>((c * H + sy) * W + sx)];
                out[static_cast<std::size_t>((c * crop + y) * crop + x)] = v;
            }
        }
    }
    return out;
}

Tensor augment(const Tensor& img, const AugmentSpec& spec, Rng& rng) {
    const auto extent = img.dim(1);
    const auto range = extent + 2 * spec.pad - spec.crop + 1;
    const int top = static_cast<int>(rng.below(static_cast<std::uint64_t>(range)));
    const int left = static_cast<int>(rng.below(static_cast<std::uint64_t>(range)));
    const bool flip = rng.uniform() < spec.flip_probability;
    return augment_at(img, spec, top, left, flip);
}

ChannelStats compute_channel_stats(const Dataset& ds) {
    const auto N = ds.images.dim(0), C = ds.images.dim(1), HW = ds.images.dim(2) * ds.images.dim(3);
    ChannelStats s{std::vector<double>(static_cast<std::size_t>(C)), std::vector<double>(static_cast<std::size_t>(C))};
    for (std::int64_t c = 0; c < C; ++c) {
        double sum = 0, sq = 0;
        for (std::int64_t n = 0; n < N; ++n) {
            const float* p = ds.images.ptr() + (n * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) sum += p[i];
        }
        const double mean = sum / static_cast<double>(N * HW);
        for (std::int64_t n = 0; n < N; ++n) {
            const float* p = ds.images.ptr() + (n * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) sq += (p[i] - mean) * (p[i] - mean);
        }
        s.mean[static_cast<std::size_t>(c)] = mean;
        s.stddev[static_cast<std::size_t>(c)] = std::sqrt(sq / static_cast<double>(N * HW));
    }
    return s;
}

Tensor normalize(const Tensor& img, std::span<const double> mean, std::span<const double> stddev) {
    if (img.rank() != 3 && img.rank() != 4) throw ShapeError("normalize expects (C,H,W) or (N,C,H,W)");
    const std::size_t caxis = img.rank() == 3 ? 0 : 1;
    const auto C = img.dim(caxis);
    if (mean.size() != static_cast<std::size_t>(C) || stddev.size() != static_cast<std::size_t>(C)) {
        throw ShapeError("normalize: " + std::to_string(C) + " channels but " + std::to_string(mean.size()) +
                         " means and " + std::to_string(stddev.size()) + " stds");
    }
    for (std::size_t c = 0; c < stddev.size(); ++c) {
        if (!(stddev[c] > 0.0)) throw ConfigError("normalize: std of channel " + std::to_string(c) + " must be > 0");
    }
    const auto N = img.rank() == 3 ? 1 : img.dim(0);
    const auto HW = img.dim(caxis + 1) * img.dim(caxis + 2);
    Tensor out(img.shape());
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t c = 0; c < C; ++c) {
            const float m = static_cast<float>(mean[static_cast<std::size_t>(c)]);
            const float inv = static_cast<float>(1.0 / stddev[static_cast<std::size_t>(c)]);
            const float* src = img.ptr() + (n * C + c) * HW;
            float* dst = out.ptr() + (n * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) dst[i] = (src[i] - m) * inv;
        }
    }
    return out;
}

Dataset synth_dataset(int classes, int per_class, std::uint64_t seed, std::int64_t extent) {
    if (classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
    if (per_class < 1) throw ConfigError("synthetic dataset needs at least 1 image per class");
    if (extent < 4) throw ConfigError("synthetic image extent too small");
    const std::int64_t M = std::int64_t{classes} * per_class;
    Dataset ds;
    ds.classes = classes;
    ds.images = Tensor({M, 3, extent, extent});
    ds.labels.resize(static_cast<std::size_t>(M));
    const double ext = static_cast<double>(extent);
    // Cycles per image, geometric between a coarse and a fine grating.
    const double f_lo = 1.5 * ext / 32.0, f_hi = 9.0 * ext / 32.0;
    const Rng root(seed, 0x5E7D);
    for (std::int64_t i = 0; i < M; ++i) {
        const int label = static_cast<int>(i / per_class);
        ds.labels[static_cast<std::size_t>(i)] = label;
        Rng rng = root.split(static_cast<std::uint64_t>(i));
        const double freq = f_lo * std::pow(f_hi / f_lo, static_cast<double>(label) / (classes - 1)) *
                            (1.0 + 0.4 * (rng.uniform() - 0.5));
        const double theta = rng.uniform() * std::numbers::pi;
        const double phase = rng.uniform() * 2.0 * std::numbers::pi;
        const double kx = 2.0 * std::numbers::pi * freq / ext * std::cos(theta);
        const double ky = 2.0 * std::numbers::pi * freq / ext * std::sin(theta);
        const double cy = ext * (0.3 + 0.4 * rng.uniform()), cx = ext * (0.3 + 0.4 * rng.uniform());
        const double sigma = ext * (0.12 + 0.1 * rng.uniform());
        // A weaker second grating at an arbitrary frequency, so a single band is not enough.
        const double dfreq = f_lo * std::pow(f_hi / f_lo, rng.uniform());
        const double dtheta = rng.uniform() * std::numbers::pi;
        const double dkx = 2.0 * std::numbers::pi * dfreq / ext * std::cos(dtheta);
        const double dky = 2.0 * std::numbers::pi * dfreq / ext * std::sin(dtheta);
        const double dphase = rng.uniform() * 2.0 * std::numbers::pi;
        const double dy0 = ext * rng.uniform(), dx0 = ext * rng.uniform();
        const double dsigma = ext * (0.1 + 0.1 * rng.uniform());
        const double damp = 0.6 * rng.uniform();
        // Untextured distractor blob.
        const double by = ext * rng.uniform(), bx = ext * rng.uniform();
        const double bsigma = ext * (0.1 + 0.15 * rng.uniform());
        const double bamp = 0.4 * (rng.uniform() - 0.5);
        double tint[3];
        for (double& t : tint) t = 0.55 + 0.45 * rng.uniform();
        const double base = 0.35 + 0.3 * rng.uniform();
        const double contrast = 0.15 + 0.2 * rng.uniform();
        float* img = ds.images.ptr() + i * 3 * extent * extent;
        for (std::int64_t y = 0; y < extent; ++y) {
            for (std::int64_t x = 0; x < extent; ++x) {
                const double dy = y - cy, dx = x - cx;
                const double env = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
                const double grating = std::cos(kx * x + ky * y + phase);
                const double ey = y - by, ex = x - bx;
                const double blob = bamp * std::exp(-(ex * ex + ey * ey) / (2 * bsigma * bsigma));
                const double qy = y - dy0, qx = x - dx0;
                const double second = damp * std::exp(-(qx * qx + qy * qy) / (2 * dsigma * dsigma)) *
                                      std::cos(dkx * x + dky * y + dphase);
                const double v = base + contrast * (env * grating + second) + blob;
                for (int c = 0; c < 3; ++c) {
                    const double noisy = v * tint[c] + rng.normal(0.0, 0.08);
                    img[(c * extent + y) * extent + x] = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
                }
            }
        }
    }
    return ds;
}

}  // namespace da2
