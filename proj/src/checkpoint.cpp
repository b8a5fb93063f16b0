#include "bhn/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace bhn {
namespace {

void put_u16(std::ostream& os, std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint16_t get_u16(std::istream& is, const std::string& path) {
    unsigned char b[2];
    if (!is.read(reinterpret_cast<char*>(b), 2)) fail("checkpoint '" + path + "': truncated");
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::istream& is, const std::string& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) fail("checkpoint '" + path + "': truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor>>& params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail("checkpoint: cannot open '" + path + "' for writing");
    os.write("BHNC", 4);
    put_u32(os, 1u);
    put_u32(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        if (name.size() > 0xffff) fail("checkpoint: parameter name too long: " + name);
        put_u16(os, static_cast<std::uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        os.put(static_cast<char>(t.shape.size()));
        for (int d : t.shape) put_u32(os, static_cast<std::uint32_t>(d));
        static_assert(sizeof(float) == 4);
        os.write(reinterpret_cast<const char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * 4));
    }
    if (!os) fail("checkpoint: write failed for '" + path + "'");
}

std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail("checkpoint: cannot open '" + path + "'");
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "BHNC", 4) != 0)
        fail("checkpoint '" + path + "': bad magic");
    const std::uint32_t version = get_u32(is, path);
    if (version != 1) fail("checkpoint '" + path + "': unsupported version " +
                           std::to_string(version));
    const std::uint32_t count = get_u32(is, path);
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = get_u16(is, path);
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) fail("checkpoint '" + path + "': truncated");
        const int rank = is.get();
        if (rank < 0) fail("checkpoint '" + path + "': truncated");
        Shape shape(static_cast<std::size_t>(rank));
        for (int r = 0; r < rank; ++r) shape[static_cast<std::size_t>(r)] =
            static_cast<int>(get_u32(is, path));
        std::vector<float> data(shape_numel(shape));
        if (!is.read(reinterpret_cast<char*>(data.data()),
                     static_cast<std::streamsize>(data.size() * 4)))
            fail("checkpoint '" + path + "': truncated tensor '" + name + "'");
        out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    return out;
}

void save_checkpoint(const std::string& path, const std::vector<Parameter*>& params) {
    std::vector<std::pair<std::string, Tensor>> named;
    named.reserve(params.size());
    for (const Parameter* p : params) named.emplace_back(p->name, p->value);
    save_checkpoint(path, named);
}

void load_checkpoint(const std::string& path, const std::vector<Parameter*>& params) {
    auto named = load_checkpoint(path);
    if (named.size() != params.size())
        fail("checkpoint '" + path + "': has " + std::to_string(named.size()) +
             " parameters, model expects " + std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (named[i].first != params[i]->name)
            fail("checkpoint '" + path + "': parameter " + std::to_string(i) + " is '" +
                 named[i].first + "', expected '" + params[i]->name + "'");
        if (named[i].second.shape != params[i]->value.shape)
            fail("checkpoint '" + path + "': shape mismatch for '" + named[i].first + "'");
        params[i]->value = std::move(named[i].second);
    }
}

}  // namespace bhn
