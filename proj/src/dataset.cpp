#include "mafnet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "mafnet/image_io.hpp"

namespace fs = std::filesystem;

namespace mafnet {

std::string illumination_name(Illumination il) {
    switch (il) {
        case Illumination::bright: return "bright";
        case Illumination::dark: return "dark";
        default: return "unknown";
    }
}

namespace {

Illumination illumination_from_name(const std::string& s, const std::string& id) {
    if (s == "bright") return Illumination::bright;
    if (s == "dark") return Illumination::dark;
    throw DataError("sample " + id + ": unknown illumination tag '" + s + "'");
}

PointAnnotation parse_annotation(const std::string& path, const std::string& id,
                                 Illumination& illumination) {
    std::ifstream is(path);
    if (!is) throw DataError("sample " + id + ": cannot open annotation " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("sample " + id + ": malformed annotation JSON: " + e.what());
    }
    if (!j.is_object() || !j.contains("points") || !j["points"].is_array())
        throw DataError("sample " + id + ": annotation must carry a points array");
    PointAnnotation ann;
    for (const auto& p : j["points"]) {
        if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number())
            throw DataError("sample " + id + ": points must be [x, y] number pairs");
        ann.points.push_back({p[0].get<double>(), p[1].get<double>()});
    }
    if (j.contains("illumination"))
        illumination = illumination_from_name(j["illumination"].get<std::string>(), id);
    return ann;
}

}  // namespace

std::vector<AnnotatedPair> load_dataset(const std::string& root) {
    std::vector<AnnotatedPair> out;
    const fs::path rgb_dir = fs::path(root) / "rgb";
    if (!fs::exists(rgb_dir)) return out;
    std::vector<std::string> ids;
    for (const auto& entry : fs::directory_iterator(rgb_dir))
        if (entry.is_regular_file() && entry.path().extension() == ".ppm")
            ids.push_back(entry.path().stem().string());
    std::sort(ids.begin(), ids.end());

    for (const std::string& id : ids) {
        const fs::path rgb_path = rgb_dir / (id + ".ppm");
        const fs::path t_path = fs::path(root) / "thermal" / (id + ".pgm");
        const fs::path ann_path = fs::path(root) / "ann" / (id + ".json");
        if (!fs::exists(t_path))
            throw DataError("sample " + id + ": missing thermal counterpart " + t_path.string());
        if (!fs::exists(ann_path))
            throw DataError("sample " + id + ": missing annotation " + ann_path.string());
        AnnotatedPair pair;
        pair.id = id;
        ImageU8 rgb, thermal;
        try {
            rgb = read_pnm(rgb_path.string());
            thermal = read_pnm(t_path.string());
        } catch (const IoError& e) {
            throw DataError("sample " + id + ": " + e.what());
        }
        if (rgb.channels != 3)
            throw DataError("sample " + id + ": rgb image must be a 3-channel P6 file");
        if (thermal.channels == 3) {
            // tolerate 3-channel thermal sources by averaging
            ImageU8 gray;
            gray.channels = 1;
            gray.height = thermal.height;
            gray.width = thermal.width;
            gray.pixels.resize(static_cast<size_t>(gray.height) * gray.width);
            for (int y = 0; y < gray.height; ++y)
                for (int x = 0; x < gray.width; ++x) {
                    const int v =
                        thermal.at(0, y, x) + thermal.at(1, y, x) + thermal.at(2, y, x);
                    gray.pixels[static_cast<size_t>(y) * gray.width + x] =
                        static_cast<uint8_t>(v / 3);
                }
            thermal = gray;
        }
        if (rgb.height != thermal.height || rgb.width != thermal.width)
            throw DataError("sample " + id + ": rgb and thermal extents differ");
        pair.rgb = image_to_tensor(rgb);
        pair.thermal = image_to_tensor(thermal);
        pair.illumination = Illumination::unknown;
        pair.annotation = parse_annotation(ann_path.string(), id, pair.illumination);
        for (size_t i = 0; i < pair.annotation.points.size(); ++i) {
            const auto& p = pair.annotation.points[i];
            if (!(p[0] >= 0.0 && p[0] < rgb.width && p[1] >= 0.0 && p[1] < rgb.height))
                throw DataError("sample " + id + ": annotation point " + std::to_string(i) +
                                " out of bounds");
        }
        out.push_back(std::move(pair));
    }
    return out;
}

Tensor<float> resize_bilinear_image(const Tensor<float>& img, int out_h, int out_w) {
    const int C = img.shape()[0], h = img.shape()[1], w = img.shape()[2];
    if (out_h < 1 || out_w < 1) throw DimensionError("resize: degenerate target extents");
    std::vector<float> out(static_cast<size_t>(C) * out_h * out_w);
    auto axis_coord = [](int i, int src, int dst) {
        double c = (i + 0.5) * static_cast<double>(src) / dst - 0.5;
        return std::min(std::max(c, 0.0), static_cast<double>(src - 1));
    };
    size_t oi = 0;
    for (int c = 0; c < C; ++c) {
        const float* plane = img.data() + static_cast<size_t>(c) * h * w;
        for (int y = 0; y < out_h; ++y) {
            const double sy = axis_coord(y, h, out_h);
            const int y0 = static_cast<int>(std::floor(sy));
            const int y1 = std::min(y0 + 1, h - 1);
            const double fy = sy - y0;
            for (int x = 0; x < out_w; ++x, ++oi) {
                const double sx = axis_coord(x, w, out_w);
                const int x0 = static_cast<int>(std::floor(sx));
                const int x1 = std::min(x0 + 1, w - 1);
                const double fx = sx - x0;
                const double top = (1.0 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1];
                const double bot = (1.0 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1];
                out[oi] = static_cast<float>((1.0 - fy) * top + fy * bot);
            }
        }
    }
    return Tensor<float>({C, out_h, out_w}, std::move(out));
}

Tensor<float> pad_reflect(const Tensor<float>& img, int out_h, int out_w) {
    const int C = img.shape()[0], h = img.shape()[1], w = img.shape()[2];
    if (out_h < h || out_w < w)
        throw DimensionError("pad_reflect: target smaller than source");
    if (out_h >= 2 * h || out_w >= 2 * w)
        throw DimensionError("pad_reflect: padding exceeds the mirrorable extent");
    if (out_h == h && out_w == w) return img;
    std::vector<float> out(static_cast<size_t>(C) * out_h * out_w);
    auto mirror = [](int i, int n) { return i < n ? i : 2 * n - 2 - i; };
    size_t oi = 0;
    for (int c = 0; c < C; ++c) {
        const float* plane = img.data() + static_cast<size_t>(c) * h * w;
        for (int y = 0; y < out_h; ++y) {
            const int sy = mirror(y, h);
            for (int x = 0; x < out_w; ++x, ++oi) out[oi] = plane[sy * w + mirror(x, w)];
        }
    }
    return Tensor<float>({C, out_h, out_w}, std::move(out));
}

namespace {

Tensor<float> hflip_image(const Tensor<float>& img) {
    const int C = img.shape()[0], h = img.shape()[1], w = img.shape()[2];
    std::vector<float> out(img.size());
    size_t oi = 0;
    for (int c = 0; c < C; ++c) {
        const float* plane = img.data() + static_cast<size_t>(c) * h * w;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x, ++oi) out[oi] = plane[y * w + (w - 1 - x)];
    }
    return Tensor<float>(img.shape(), std::move(out));
}

Tensor<float> crop_image(const Tensor<float>& img, int oy, int ox, int size) {
    const int C = img.shape()[0], h = img.shape()[1], w = img.shape()[2];
    (void)h;
    std::vector<float> out(static_cast<size_t>(C) * size * size);
    size_t oi = 0;
    for (int c = 0; c < C; ++c) {
        const float* plane = img.data() + static_cast<size_t>(c) * h * w;
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x, ++oi) out[oi] = plane[(oy + y) * w + ox + x];
    }
    return Tensor<float>({C, size, size}, std::move(out));
}

}  // namespace

AnnotatedPair augment(const AnnotatedPair& pair, const AugmentConfig& cfg, Rng& rng) {
    if (cfg.rescale_min <= 0.0 || cfg.rescale_min > cfg.rescale_max)
        throw ContractError("augment: rescale range must be positive with min <= max");
    const int H = pair.height(), W = pair.width();

    // draw order is fixed: rescale factor (with retries), crop row, crop
    // column, flip coin
    double u = 0.0;
    int rh = 0, rw = 0;
    bool ok = false;
    for (int attempt = 0; attempt < 10; ++attempt) {
        u = rng.uniform(cfg.rescale_min, cfg.rescale_max);
        rh = static_cast<int>(std::lround(H * u));
        rw = static_cast<int>(std::lround(W * u));
        if (rh >= cfg.crop_size && rw >= cfg.crop_size) {
            ok = true;
            break;
        }
    }
    if (!ok)
        throw DataError("sample " + pair.id + ": image smaller than crop after 10 rescale draws");

    AnnotatedPair out;
    out.id = pair.id;
    out.illumination = pair.illumination;
    Tensor<float> rgb =
        (rh == H && rw == W) ? pair.rgb : resize_bilinear_image(pair.rgb, rh, rw);
    Tensor<float> thermal =
        (rh == H && rw == W) ? pair.thermal : resize_bilinear_image(pair.thermal, rh, rw);
    std::vector<std::array<double, 2>> pts;
    for (const auto& p : pair.annotation.points) {
        const double x = p[0] * u, y = p[1] * u;
        if (x >= 0.0 && x < rw && y >= 0.0 && y < rh) pts.push_back({x, y});
    }

    const int oy = static_cast<int>(rng.uniform_int(0, rh - cfg.crop_size));
    const int ox = static_cast<int>(rng.uniform_int(0, rw - cfg.crop_size));
    rgb = crop_image(rgb, oy, ox, cfg.crop_size);
    thermal = crop_image(thermal, oy, ox, cfg.crop_size);
    std::vector<std::array<double, 2>> kept;
    for (const auto& p : pts) {
        const double x = p[0] - ox, y = p[1] - oy;
        if (x >= 0.0 && x < cfg.crop_size && y >= 0.0 && y < cfg.crop_size) kept.push_back({x, y});
    }

    if (rng.bernoulli(cfg.hflip_prob)) {
        rgb = hflip_image(rgb);
        thermal = hflip_image(thermal);
        // x -> crop-1-x maps the sub-pixel sliver (crop-1, crop) below 0;
        // those points leave the coordinate range and are dropped like any
        // other crop leaver
        std::vector<std::array<double, 2>> flipped;
        for (const auto& p : kept) {
            const double x = cfg.crop_size - 1 - p[0];
            if (x >= 0.0) flipped.push_back({x, p[1]});
        }
        kept = std::move(flipped);
    }

    out.rgb = std::move(rgb);
    out.thermal = std::move(thermal);
    out.annotation.points = std::move(kept);
    return out;
}

void synthesize(const SynthConfig& cfg, const std::string& out_root) {
    if (cfg.pairs < 0 || cfg.size < 1 || cfg.count_min < 0 || cfg.count_max < cfg.count_min)
        throw ContractError("synthesize: invalid configuration");
    if (cfg.darkness_prob < 0.0 || cfg.darkness_prob > 1.0 || cfg.crossover_prob < 0.0 ||
        cfg.crossover_prob > 1.0)
        throw ContractError("synthesize: probabilities must lie in [0,1]");
    std::error_code ec;
    fs::create_directories(fs::path(out_root) / "rgb", ec);
    fs::create_directories(fs::path(out_root) / "thermal", ec);
    fs::create_directories(fs::path(out_root) / "ann", ec);
    if (!fs::exists(fs::path(out_root) / "ann"))
        throw IoError("cannot create dataset directories under " + out_root);

    const int S = cfg.size;
    Rng base(cfg.seed);
    for (int i = 0; i < cfg.pairs; ++i) {
        Rng rng = base.fork(i);
        char name[32];
        std::snprintf(name, sizeof(name), "pair_%04d", i);

        const int k = static_cast<int>(rng.uniform_int(cfg.count_min, cfg.count_max));
        std::vector<std::array<double, 2>> heads;
        for (int j = 0; j < k; ++j)
            heads.push_back({rng.uniform(3.0, S - 4.0), rng.uniform(3.0, S - 4.0)});

        const bool dark = rng.bernoulli(cfg.darkness_prob);
        const bool crossover = rng.bernoulli(cfg.crossover_prob);

        // visible: textured background with disc-shaped heads
        const double base_col[3] = {rng.uniform(90, 170), rng.uniform(90, 170),
                                    rng.uniform(90, 170)};
        const double head_col[3] = {rng.uniform(15, 70), rng.uniform(15, 70),
                                    rng.uniform(15, 70)};
        const double grad = rng.uniform(-30.0, 30.0);
        ImageU8 rgb;
        rgb.channels = 3;
        rgb.height = S;
        rgb.width = S;
        rgb.pixels.resize(static_cast<size_t>(3) * S * S);
        for (int y = 0; y < S; ++y) {
            for (int x = 0; x < S; ++x) {
                double px[3];
                const double t = static_cast<double>(x) / S;
                for (int c = 0; c < 3; ++c)
                    px[c] = base_col[c] + grad * t + rng.uniform(-10.0, 10.0);
                for (const auto& hpt : heads) {
                    const double d2 = (x - hpt[0]) * (x - hpt[0]) + (y - hpt[1]) * (y - hpt[1]);
                    if (d2 <= 2.5 * 2.5)
                        for (int c = 0; c < 3; ++c) px[c] = head_col[c] + rng.uniform(-8.0, 8.0);
                }
                for (int c = 0; c < 3; ++c) {
                    double v = dark ? px[c] * 0.1 : px[c];
                    v = std::min(255.0, std::max(0.0, v));
                    rgb.pixels[(static_cast<size_t>(y) * S + x) * 3 + c] =
                        static_cast<uint8_t>(std::lround(v));
                }
            }
        }

        // thermal: cool background, bright Gaussian blobs at head positions;
        // a crossover frame collapses the blobs below the background noise
        const double blob_amp = crossover ? 3.0 : 150.0;
        ImageU8 thermal;
        thermal.channels = 1;
        thermal.height = S;
        thermal.width = S;
        thermal.pixels.resize(static_cast<size_t>(S) * S);
        for (int y = 0; y < S; ++y) {
            for (int x = 0; x < S; ++x) {
                double v = 40.0 + rng.uniform(-8.0, 8.0);
                for (const auto& hpt : heads) {
                    const double d2 = (x - hpt[0]) * (x - hpt[0]) + (y - hpt[1]) * (y - hpt[1]);
                    v += blob_amp * std::exp(-d2 / (2.0 * 2.0 * 2.0));
                }
                v = std::min(255.0, std::max(0.0, v));
                thermal.pixels[static_cast<size_t>(y) * S + x] =
                    static_cast<uint8_t>(std::lround(v));
            }
        }

        write_pnm(rgb, (fs::path(out_root) / "rgb" / (std::string(name) + ".ppm")).string());
        write_pnm(thermal,
                  (fs::path(out_root) / "thermal" / (std::string(name) + ".pgm")).string());
        nlohmann::json ann;
        ann["points"] = nlohmann::json::array();
        for (const auto& hpt : heads) ann["points"].push_back({hpt[0], hpt[1]});
        ann["illumination"] = dark ? "dark" : "bright";
        std::ofstream os((fs::path(out_root) / "ann" / (std::string(name) + ".json")).string());
        if (!os) throw IoError("cannot write annotation for " + std::string(name));
        os << ann.dump(2) << "\n";
    }
}

}  // namespace mafnet
