#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "mafnet/dataset.hpp"
#include "mafnet/image_io.hpp"
#include "test_util.hpp"

using namespace mafnet;
using testutil::bitwise_equal;

namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

bool same_file_bytes(const fs::path& a, const fs::path& b) {
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    std::string ca((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::string cb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    return !ca.empty() && ca == cb;
}

AnnotatedPair make_pair(Rng& rng, int h, int w, std::vector<std::array<double, 2>> pts) {
    AnnotatedPair p;
    p.id = "test";
    p.rgb = testutil::rand_tensor<float>(rng, {3, h, w});
    p.thermal = testutil::rand_tensor<float>(rng, {1, h, w});
    p.annotation.points = std::move(pts);
    return p;
}

}  // namespace

TEST_CASE("pnm io round trip and header handling") {
    TempDir dir("mafnet_pnm_test");
    Rng rng(1);
    ImageU8 img;
    img.channels = 3;
    img.height = 5;
    img.width = 7;
    img.pixels.resize(3 * 5 * 7);
    for (auto& p : img.pixels) p = static_cast<uint8_t>(rng.uniform_int(0, 255));
    const auto path = (dir.path / "a.ppm").string();
    write_pnm(img, path);
    ImageU8 back = read_pnm(path);
    CHECK(back.channels == 3);
    CHECK(back.height == 5);
    CHECK(back.width == 7);
    CHECK(back.pixels == img.pixels);

    // comments in the header are skipped
    {
        std::ofstream os(dir.path / "c.pgm", std::ios::binary);
        os << "P5\n# a comment\n2 1\n# another\n255\n";
        os.put(9);
        os.put(200);
    }
    ImageU8 c = read_pnm((dir.path / "c.pgm").string());
    CHECK(c.channels == 1);
    CHECK(c.pixels == std::vector<uint8_t>{9, 200});

    {
        std::ofstream os(dir.path / "bad.pgm", std::ios::binary);
        os << "P5\n2 1\n65535\n";
        os.put(1);
        os.put(1);
    }
    CHECK_THROWS_AS(read_pnm((dir.path / "bad.pgm").string()), IoError);
    {
        std::ofstream os(dir.path / "short.pgm", std::ios::binary);
        os << "P5\n4 4\n255\n";
        os.put(1);
    }
    CHECK_THROWS_AS(read_pnm((dir.path / "short.pgm").string()), IoError);
}

TEST_CASE("image normalization maps 0..255 onto [-1,1]") {
    ImageU8 img;
    img.channels = 1;
    img.height = 1;
    img.width = 3;
    img.pixels = {0, 255, 128};
    Tensor<float> t = image_to_tensor(img);
    CHECK(t[0] == doctest::Approx(-1.0));
    CHECK(t[1] == doctest::Approx(1.0));
    CHECK(t[2] == doctest::Approx(128.0 / 255.0 * 2 - 1));
}

TEST_CASE("synthesis and loading round trip") {
    TempDir dir("mafnet_synth_test");
    SynthConfig cfg;
    cfg.pairs = 5;
    cfg.size = 64;
    cfg.count_min = 2;
    cfg.count_max = 9;
    cfg.darkness_prob = 0.5;
    cfg.seed = 99;
    synthesize(cfg, dir.str());

    auto pairs = load_dataset(dir.str());
    REQUIRE(pairs.size() == 5);
    for (const auto& p : pairs) {
        CHECK(p.rgb.shape() == Shape{3, 64, 64});
        CHECK(p.thermal.shape() == Shape{1, 64, 64});
        CHECK(p.annotation.points.size() >= 2);
        CHECK(p.annotation.points.size() <= 9);
        CHECK(p.illumination != Illumination::unknown);
    }
    CHECK(pairs[0].id == "pair_0000");
    CHECK(pairs[4].id == "pair_0004");

    SUBCASE("same seed renders bitwise-identical files") {
        TempDir dir2("mafnet_synth_test2");
        synthesize(cfg, dir2.str());
        for (const auto& entry : fs::recursive_directory_iterator(dir.path))
            if (entry.is_regular_file()) {
                const auto rel = fs::relative(entry.path(), dir.path);
                CHECK(same_file_bytes(entry.path(), dir2.path / rel));
            }
    }

    SUBCASE("empty dataset directory loads as an empty list") {
        TempDir empty("mafnet_empty_test");
        CHECK(load_dataset(empty.str()).empty());
        SynthConfig none = cfg;
        none.pairs = 0;
        TempDir zero("mafnet_zero_test");
        synthesize(none, zero.str());
        CHECK(load_dataset(zero.str()).empty());
    }

    SUBCASE("missing counterpart files name the sample") {
        fs::remove(dir.path / "thermal" / "pair_0002.pgm");
        CHECK_THROWS_WITH_AS(load_dataset(dir.str()), doctest::Contains("pair_0002"), DataError);
    }

    SUBCASE("out-of-bounds annotations name the sample") {
        std::ofstream os(dir.path / "ann" / "pair_0001.json");
        os << R"({"points": [[500.0, 1.0]], "illumination": "bright"})";
        os.close();
        CHECK_THROWS_WITH_AS(load_dataset(dir.str()), doctest::Contains("pair_0001"), DataError);
    }
}

TEST_CASE("augment identity and involution") {
    Rng rng(21);
    AnnotatedPair pair = make_pair(rng, 64, 64, {{10.0, 20.0}, {40.5, 3.25}});

    SUBCASE("identity configuration returns the input unchanged") {
        AugmentConfig cfg;
        cfg.crop_size = 64;
        cfg.hflip_prob = 0.0;
        cfg.rescale_min = cfg.rescale_max = 1.0;
        Rng stream(5);
        AnnotatedPair out = augment(pair, cfg, stream);
        CHECK(bitwise_equal(out.rgb, pair.rgb));
        CHECK(bitwise_equal(out.thermal, pair.thermal));
        REQUIRE(out.annotation.points.size() == 2);
        CHECK(out.annotation.points[0][0] == 10.0);
        CHECK(out.annotation.points[1][1] == 3.25);
    }

    SUBCASE("forced flip applied twice restores the original") {
        AugmentConfig cfg;
        cfg.crop_size = 64;
        cfg.hflip_prob = 1.0;
        cfg.rescale_min = cfg.rescale_max = 1.0;
        Rng s1(5), s2(6);
        AnnotatedPair once = augment(pair, cfg, s1);
        AnnotatedPair twice = augment(once, cfg, s2);
        CHECK(bitwise_equal(twice.rgb, pair.rgb));
        CHECK(bitwise_equal(twice.thermal, pair.thermal));
        REQUIRE(twice.annotation.points.size() == 2);
        CHECK(twice.annotation.points[0][0] == doctest::Approx(10.0));
        CHECK(twice.annotation.points[0][1] == doctest::Approx(20.0));
    }

    SUBCASE("crop translates points by the drawn origin and drops leavers") {
        AugmentConfig cfg;
        cfg.crop_size = 64;
        cfg.hflip_prob = 0.0;
        cfg.rescale_min = cfg.rescale_max = 1.0;
        AnnotatedPair big = make_pair(rng, 128, 128, {{10.0, 20.0}, {100.0, 90.0}});
        // replicate the documented draw order to learn the crop origin
        Rng probe(31);
        (void)probe.uniform(1.0, 1.0);
        const int oy = static_cast<int>(probe.uniform_int(0, 64));
        const int ox = static_cast<int>(probe.uniform_int(0, 64));
        Rng stream(31);
        AnnotatedPair out = augment(big, cfg, stream);
        std::vector<std::array<double, 2>> expected;
        for (const auto& p : big.annotation.points) {
            const double x = p[0] - ox, y = p[1] - oy;
            if (x >= 0 && x < 64 && y >= 0 && y < 64) expected.push_back({x, y});
        }
        REQUIRE(out.annotation.points.size() == expected.size());
        for (size_t i = 0; i < expected.size(); ++i) {
            CHECK(out.annotation.points[i][0] == expected[i][0]);
            CHECK(out.annotation.points[i][1] == expected[i][1]);
        }
        // the cropped window content matches the source at the learned origin
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < 8; ++y)
                for (int x = 0; x < 8; ++x)
                    CHECK(out.rgb.at({c, y, x}) == big.rgb.at({c, oy + y, ox + x}));
    }

    SUBCASE("shrinking below the crop errors after ten draws") {
        AugmentConfig cfg;
        cfg.crop_size = 64;
        cfg.rescale_min = cfg.rescale_max = 0.5;
        Rng stream(7);
        CHECK_THROWS_AS(augment(pair, cfg, stream), DataError);
    }
}

TEST_CASE("augmented head centers stay within a pixel of transformed points") {
    // single bright head, no noise collapse; the thermal blob argmax marks
    // the rendered center
    TempDir dir("mafnet_geo_test");
    SynthConfig scfg;
    scfg.pairs = 14;
    scfg.size = 128;
    scfg.count_min = 1;
    scfg.count_max = 1;
    scfg.seed = 11;
    synthesize(scfg, dir.str());
    auto pairs = load_dataset(dir.str());
    REQUIRE(pairs.size() == 14);

    AugmentConfig cfg;
    cfg.crop_size = 64;
    cfg.hflip_prob = 0.5;
    cfg.rescale_min = 0.8;
    cfg.rescale_max = 1.2;
    int checked = 0;
    for (size_t i = 0; i < pairs.size(); ++i) {
        Rng stream = Rng(1234).fork(0, i);
        AnnotatedPair out = augment(pairs[i], cfg, stream);
        if (out.annotation.points.empty()) continue;  // head cropped away
        // blob peaks can clip at the crop edge; skip near-edge survivors
        const auto& pt = out.annotation.points[0];
        if (pt[0] < 2 || pt[0] > 61 || pt[1] < 2 || pt[1] > 61) continue;
        int best = 0;
        for (int j = 1; j < out.thermal.size(); ++j)
            if (out.thermal[j] > out.thermal[best]) best = j;
        const int by = best / 64, bx = best % 64;
        CHECK(std::fabs(bx - pt[0]) <= 1.0);
        CHECK(std::fabs(by - pt[1]) <= 1.0);
        ++checked;
    }
    CHECK(checked >= 3);
}

TEST_CASE("keyed augmentation streams are order independent") {
    Rng rng(55);
    std::vector<AnnotatedPair> samples;
    for (int i = 0; i < 4; ++i)
        samples.push_back(make_pair(rng, 128, 128, {{64.0, 64.0}}));
    AugmentConfig cfg;
    cfg.crop_size = 64;

    auto transform = [&](int index) {
        Rng stream = Rng(42).fork(7, 0, index);
        return augment(samples[index], cfg, stream);
    };
    std::vector<AnnotatedPair> forward, backward;
    for (int i = 0; i < 4; ++i) forward.push_back(transform(i));
    for (int i = 3; i >= 0; --i) backward.push_back(transform(i));
    for (int i = 0; i < 4; ++i) {
        CHECK(bitwise_equal(forward[i].rgb, backward[3 - i].rgb));
        CHECK(bitwise_equal(forward[i].thermal, backward[3 - i].thermal));
    }
}

TEST_CASE("reflect padding mirrors without repeating the edge") {
    Tensor<float> img({1, 2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor<float> padded = pad_reflect(img, 3, 4);
    CHECK(padded.shape() == Shape{1, 3, 4});
    // row 2 mirrors row 0; column 3 mirrors column 1
    CHECK(padded.at({0, 2, 0}) == 1.0f);
    CHECK(padded.at({0, 2, 1}) == 2.0f);
    CHECK(padded.at({0, 0, 3}) == 2.0f);
    CHECK(padded.at({0, 1, 3}) == 5.0f);
    CHECK(padded.at({0, 2, 3}) == 2.0f);
    CHECK(bitwise_equal(pad_reflect(img, 2, 3), img));
}
