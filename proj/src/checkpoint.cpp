#include "da2net/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "da2net/data.hpp"

namespace da2 {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'D', 'A', '2', 'C'};

class Writer {
   public:
    template <typename U>
    void put(U v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        out.insert(out.end(), p, p + sizeof(U));
    }
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out.insert(out.end(), b, b + n);
    }
    std::vector<std::uint8_t> out;
};

class Reader {
   public:
    Reader(std::span<const std::uint8_t> b, const std::string& origin) : b_(b), origin_(origin) {}

    template <typename U>
    U get(const char* what) {
        need(sizeof(U), what);
        U v;
        std::memcpy(&v, b_.data() + pos_, sizeof(U));
        pos_ += sizeof(U);
        return v;
    }
    const std::uint8_t* take(std::size_t n, const char* what) {
        need(n, what);
        const auto* p = b_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::size_t pos() const { return pos_; }

   private:
    void need(std::size_t n, const char* what) {
        if (b_.size() - pos_ < n) {
            throw FormatError(origin_ + ": truncated checkpoint reading " + what + " at offset " + std::to_string(pos_));
        }
    }
    std::span<const std::uint8_t> b_;
    std::string origin_;
    std::size_t pos_ = 0;
};

std::uint64_t checksum(std::span<const std::uint8_t> bytes) {
    return fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const NamedTensors& tensors) {
    Writer w;
    w.bytes(kMagic, 4);
    w.put<std::uint32_t>(kCheckpointVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        if (name.size() > 0xFFFF) throw FormatError("tensor name too long: " + name.substr(0, 32) + "...");
        w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
        for (auto e : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(e));
        w.bytes(t.data().data(), t.size() * sizeof(float));
    }
    w.put<std::uint64_t>(checksum(w.out));
    return std::move(w.out);
}

NamedTensors parse_checkpoint(std::span<const std::uint8_t> bytes, const std::string& origin) {
    if (bytes.size() < 4 + 4 + 4 + 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw FormatError(origin + ": not a DA2C checkpoint");
    }
    const auto body = bytes.first(bytes.size() - 8);
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + body.size(), 8);
    if (stored != checksum(body)) throw FormatError(origin + ": checkpoint checksum mismatch");

    Reader r(body, origin);
    r.take(4, "magic");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kCheckpointVersion) {
        throw FormatError(origin + ": unsupported checkpoint version " + std::to_string(version));
    }
    const auto count = r.get<std::uint32_t>("tensor count");
    NamedTensors out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = r.get<std::uint16_t>("name length");
        const auto* name = r.take(len, "name");
        const auto rank = r.get<std::uint32_t>("rank");
        if (rank > 8) throw FormatError(origin + ": implausible tensor rank " + std::to_string(rank));
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.get<std::uint32_t>("extent"));
        Tensor t(shape);
        const auto* payload = r.take(t.size() * sizeof(float), "payload");
        std::memcpy(t.ptr(), payload, t.size() * sizeof(float));
        out.emplace_back(std::string(reinterpret_cast<const char*>(name), len), std::move(t));
    }
    if (r.pos() != body.size()) {
        throw FormatError(origin + ": " + std::to_string(body.size() - r.pos()) + " unexpected trailing bytes");
    }
    return out;
}

NamedTensors network_state(Network<float>& net) {
    NamedTensors out;
    const auto collect = [&](const std::string& n, Tensor& t) { out.emplace_back(n, t); };
    net.visit_parameters(collect);
    net.visit_buffers(collect);
    return out;
}

void restore_network_state(Network<float>& net, const NamedTensors& state, const std::string& origin) {
    std::size_t i = 0;
    const auto assign = [&](const std::string& n, Tensor& t) {
        if (i >= state.size()) throw FormatError(origin + ": checkpoint lacks tensor " + n);
        const auto& [name, value] = state[i++];
        if (name != n) throw FormatError(origin + ": expected tensor " + n + ", found " + name);
        if (value.shape() != t.shape()) {
            throw FormatError(origin + ": tensor " + n + " has shape " + shape_str(value.shape()) + ", network expects " +
                              shape_str(t.shape()));
        }
        t = value;
    };
    // Validate everything against a scratch copy first so a bad file leaves the network untouched.
    Network<float> scratch = net;
    scratch.visit_parameters(assign);
    scratch.visit_buffers(assign);
    if (i != state.size()) throw FormatError(origin + ": checkpoint has " + std::to_string(state.size() - i) + " extra tensors");
    net = std::move(scratch);
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    auto partial = path;
    partial += ".partial";
    write_file_bytes(partial, bytes);
    std::error_code ec;
    std::filesystem::rename(partial, path, ec);
    if (ec) throw IoError("cannot move " + partial.string() + " into place: " + ec.message());
}

void save_checkpoint(Network<float>& net, const std::filesystem::path& path) {
    write_file_atomic(path, serialize_checkpoint(network_state(net)));
}

void load_checkpoint(Network<float>& net, const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    restore_network_state(net, parse_checkpoint(bytes, path.string()), path.string());
}

}  // namespace da2
