#include "mafnet/tensor_io.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace mafnet {

namespace {

constexpr char kMagic[4] = {'M', 'A', 'F', 'T'};
constexpr uint8_t kVersion = 0x01;
constexpr uint8_t kDtypeF32 = 0x01;

void put_u32_le(std::ostream& os, uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(b, 4);
}

uint32_t get_u32_le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void save_tensor(const Tensor<float>& t, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write(kMagic, 4);
    os.put(static_cast<char>(kVersion));
    os.put(static_cast<char>(kDtypeF32));
    os.put(static_cast<char>(t.rank()));
    for (int e : t.shape()) put_u32_le(os, static_cast<uint32_t>(e));
    static_assert(sizeof(float) == 4);
    for (int i = 0; i < t.size(); ++i) {
        float v = t[i];
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put_u32_le(os, bits);
    }
    if (!os) throw IoError("write failed: " + path);
}

Tensor<float> load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("bad tensor magic in " + path);
    const int version = is.get();
    if (version != kVersion) throw IoError("unsupported tensor version in " + path);
    const int dtype = is.get();
    if (dtype != kDtypeF32) throw IoError("unsupported tensor dtype in " + path);
    const int rank = is.get();
    if (rank < 1 || rank > 4) throw IoError("unsupported tensor rank in " + path);
    Shape shape(rank);
    for (int d = 0; d < rank; ++d) {
        shape[d] = static_cast<int>(get_u32_le(is));
        if (shape[d] < 1) throw IoError("invalid extent in " + path);
    }
    std::vector<float> values(shape_numel(shape));
    for (auto& v : values) {
        const uint32_t bits = get_u32_le(is);
        std::memcpy(&v, &bits, 4);
    }
    if (!is) throw IoError("truncated tensor file: " + path);
    return Tensor<float>(std::move(shape), std::move(values));
}

}  // namespace mafnet
