#include "mafnet/image_io.hpp"

#include <cmath>
#include <fstream>

namespace mafnet {

namespace {

// Skips whitespace and '#' comment lines between header tokens.
int next_header_int(std::istream& is, const std::string& path) {
    while (true) {
        const int c = is.peek();
        if (c == '#') {
            std::string comment;
            std::getline(is, comment);
        } else if (std::isspace(c)) {
            is.get();
        } else {
            break;
        }
    }
    int value = -1;
    if (!(is >> value) || value < 0) throw IoError("malformed PNM header in " + path);
    return value;
}

}  // namespace

ImageU8 read_pnm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open image: " + path);
    char m0 = 0, m1 = 0;
    is.get(m0);
    is.get(m1);
    int channels;
    if (m0 == 'P' && m1 == '5')
        channels = 1;
    else if (m0 == 'P' && m1 == '6')
        channels = 3;
    else
        throw IoError("unsupported PNM magic in " + path);
    ImageU8 img;
    img.channels = channels;
    img.width = next_header_int(is, path);
    img.height = next_header_int(is, path);
    const int maxval = next_header_int(is, path);
    if (maxval != 255) throw IoError("unsupported PNM maxval in " + path);
    if (img.width < 1 || img.height < 1) throw IoError("degenerate image extents in " + path);
    is.get();  // single whitespace before the raster
    img.pixels.resize(static_cast<size_t>(channels) * img.height * img.width);
    is.read(reinterpret_cast<char*>(img.pixels.data()), img.pixels.size());
    if (!is) throw IoError("truncated PNM raster in " + path);
    return img;
}

void write_pnm(const ImageU8& img, const std::string& path) {
    if (img.channels != 1 && img.channels != 3)
        throw IoError("write_pnm supports 1 or 3 channels");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << (img.channels == 1 ? "P5" : "P6") << "\n"
       << img.width << " " << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
    if (!os) throw IoError("write failed: " + path);
}

Tensor<float> image_to_tensor(const ImageU8& img) {
    std::vector<float> v(static_cast<size_t>(img.channels) * img.height * img.width);
    size_t i = 0;
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x, ++i)
                v[i] = (img.at(c, y, x) / 255.0f - 0.5f) / 0.5f;
    return Tensor<float>({img.channels, img.height, img.width}, std::move(v));
}

ImageU8 map_to_pgm_preview(const Tensor<float>& map) {
    const int h = map.shape()[map.rank() - 2], w = map.shape()[map.rank() - 1];
    float mx = 0.0f;
    for (int i = 0; i < map.size(); ++i) mx = std::max(mx, map[i]);
    ImageU8 img;
    img.channels = 1;
    img.height = h;
    img.width = w;
    img.pixels.resize(static_cast<size_t>(h) * w, 0);
    if (mx > 0.0f)
        for (int i = 0; i < h * w; ++i)
            img.pixels[i] = static_cast<uint8_t>(
                std::lround(std::min(1.0f, std::max(0.0f, map[i] / mx)) * 255.0f));
    return img;
}

ImageU8 rows_to_pgm_heatmap(const Tensor<float>& mat) {
    if (mat.rank() != 2) throw IoError("heatmap export expects a rank-2 matrix");
    const int rows = mat.shape()[0], cols = mat.shape()[1];
    ImageU8 img;
    img.channels = 1;
    img.height = rows;
    img.width = cols;
    img.pixels.resize(static_cast<size_t>(rows) * cols, 0);
    for (int r = 0; r < rows; ++r) {
        float mx = 0.0f;
        for (int c = 0; c < cols; ++c) mx = std::max(mx, mat[r * cols + c]);
        if (mx <= 0.0f) continue;
        for (int c = 0; c < cols; ++c)
            img.pixels[static_cast<size_t>(r) * cols + c] = static_cast<uint8_t>(
                std::lround(std::min(1.0f, std::max(0.0f, mat[r * cols + c] / mx)) * 255.0f));
    }
    return img;
}

}  // namespace mafnet
