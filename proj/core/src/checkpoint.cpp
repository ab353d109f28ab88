#include "convctx/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace convctx {

namespace {

constexpr char kMagic[4] = {'C', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 8);
}

void put_text(std::ostream& out, const std::string& s) {
    put_u64(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t get_u32(std::istream& in, const std::string& path) {
    char b[4];
    if (!in.read(b, 4)) throw InputError("truncated checkpoint '" + path + "'");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(b[i])) << (8 * i);
    }
    return v;
}

std::uint64_t get_u64(std::istream& in, const std::string& path) {
    char b[8];
    if (!in.read(b, 8)) throw InputError("truncated checkpoint '" + path + "'");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(b[i])) << (8 * i);
    }
    return v;
}

std::string get_text(std::istream& in, const std::string& path) {
    const std::uint64_t len = get_u64(in, path);
    std::string s(len, '\0');
    if (len > 0 && !in.read(s.data(), static_cast<std::streamsize>(len))) {
        throw InputError("truncated checkpoint '" + path + "'");
    }
    return s;
}

}  // namespace

Checkpoint snapshot(const Model& model, std::string config_text, std::string provenance) {
    Checkpoint ckpt;
    ckpt.config_text = std::move(config_text);
    ckpt.provenance = std::move(provenance);
    for (const NamedParam& p : model.params()) {
        ckpt.params.push_back({p.name, p.tensor.clone()});
    }
    return ckpt;
}

void apply_checkpoint(const Checkpoint& ckpt, Model& model) {
    std::vector<NamedParam>& target = model.params();
    const std::size_t n = std::min(ckpt.params.size(), target.size());
    for (std::size_t i = 0; i < n; ++i) {
        const NamedParam& src = ckpt.params[i];
        NamedParam& dst = target[i];
        if (src.name != dst.name) {
            throw InputError("checkpoint mismatch at parameter '" + src.name +
                             "' (model expects '" + dst.name + "')");
        }
        if (src.tensor.shape() != dst.tensor.shape()) {
            throw InputError("checkpoint mismatch at parameter '" + src.name +
                             "': shape " + shape_str(src.tensor.shape()) +
                             " vs model " + shape_str(dst.tensor.shape()));
        }
    }
    if (ckpt.params.size() != target.size()) {
        const std::string& name = ckpt.params.size() > target.size()
                                      ? ckpt.params[target.size()].name
                                      : target[ckpt.params.size()].name;
        throw InputError("checkpoint mismatch at parameter '" + name + "': " +
                         std::to_string(ckpt.params.size()) + " stored vs " +
                         std::to_string(target.size()) + " model parameters");
    }
    for (std::size_t i = 0; i < n; ++i) {
        auto src = ckpt.params[i].tensor.values();
        auto dst = target[i].tensor.values();
        std::copy(src.begin(), src.end(), dst.begin());
    }
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write checkpoint '" + path + "'");
    out.write(kMagic, 4);
    put_u32(out, kVersion);
    put_text(out, ckpt.config_text);
    put_text(out, ckpt.provenance);
    put_u64(out, ckpt.params.size());
    for (const NamedParam& p : ckpt.params) {
        put_text(out, p.name);
        put_u32(out, static_cast<std::uint32_t>(p.tensor.ndim()));
        for (int d = 0; d < p.tensor.ndim(); ++d) {
            put_u32(out, static_cast<std::uint32_t>(p.tensor.extent(d)));
        }
        for (double v : p.tensor.values()) {
            const float f = static_cast<float>(v);
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            put_u32(out, bits);
        }
    }
    if (!out) throw InputError("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open checkpoint '" + path + "'");
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        throw InputError("'" + path + "' is not a checkpoint file");
    }
    const std::uint32_t version = get_u32(in, path);
    if (version != kVersion) {
        throw InputError("checkpoint '" + path + "' has unsupported version " +
                         std::to_string(version));
    }
    Checkpoint ckpt;
    ckpt.config_text = get_text(in, path);
    ckpt.provenance = get_text(in, path);
    const std::uint64_t n = get_u64(in, path);
    for (std::uint64_t i = 0; i < n; ++i) {
        NamedParam p;
        p.name = get_text(in, path);
        const std::uint32_t ndim = get_u32(in, path);
        std::vector<int> shape;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            shape.push_back(static_cast<int>(get_u32(in, path)));
        }
        std::vector<double> vals(static_cast<std::size_t>(shape_numel(shape)));
        for (double& v : vals) {
            const std::uint32_t bits = get_u32(in, path);
            float f;
            std::memcpy(&f, &bits, 4);
            v = static_cast<double>(f);
        }
        p.tensor = Tensor::from(shape, std::move(vals));
        ckpt.params.push_back(std::move(p));
    }
    return ckpt;
}

}  // namespace convctx
