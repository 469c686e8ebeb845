#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "mafnet/grad_check.hpp"
#include "mafnet/rng.hpp"
#include "mafnet/tensor.hpp"
#include "mafnet/tensor_io.hpp"
#include "test_util.hpp"

using namespace mafnet;
using testutil::bitwise_equal;
using testutil::rand_tensor;
using testutil::track_or_pass;

using T64 = Tensor<double>;

TEST_CASE("matmul basics") {
    T64 I2({2, 2}, {1, 0, 0, 1});
    T64 B({2, 2}, {5, 6, 7, 8});
    CHECK(bitwise_equal(matmul(I2, B), B));

    T64 A({2, 2}, {1, 2, 3, 4});
    CHECK(bitwise_equal(matmul(A, I2), A));

    T64 C = matmul(A, B);
    CHECK(C[0] == doctest::Approx(19));
    CHECK(C[1] == doctest::Approx(22));
    CHECK(C[2] == doctest::Approx(43));
    CHECK(C[3] == doctest::Approx(50));

    CHECK_THROWS_AS(matmul(T64({2, 3}), T64({2, 3})), DimensionError);
}

TEST_CASE("softmax values and stability") {
    T64 z({4}, {0, 0, 0, 0});
    T64 s = softmax(z, 0);
    for (int i = 0; i < 4; ++i) CHECK(s[i] == doctest::Approx(0.25));

    T64 x({2}, {0.0, std::log(3.0)});
    T64 y = softmax(x, 0);
    CHECK(y[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(y[1] == doctest::Approx(0.75).epsilon(1e-12));

    T64 big({2}, {1000.0, 1000.0});
    T64 yb = softmax(big, 0);
    CHECK(yb[0] == doctest::Approx(0.5));
    CHECK(yb[1] == doctest::Approx(0.5));

    T64 bad({2}, {std::numeric_limits<double>::infinity(), 0.0});
    CHECK_THROWS_AS(softmax(bad, 0), NumericError);
    CHECK_THROWS_AS(softmax(z, 1), DimensionError);
}

TEST_CASE("softmax slices sum to one on random inputs") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        int r = static_cast<int>(rng.uniform_int(1, 3));
        Shape shape;
        for (int d = 0; d < r; ++d) shape.push_back(static_cast<int>(rng.uniform_int(1, 9)));
        int axis = static_cast<int>(rng.uniform_int(0, r - 1));
        T64 x = rand_tensor<double>(rng, shape, -50.0, 50.0);
        T64 y = softmax(x, axis);
        int inner = 1;
        for (int d = axis + 1; d < r; ++d) inner *= shape[d];
        int alen = shape[axis];
        int outer = x.size() / (inner * alen);
        for (int o = 0; o < outer; ++o)
            for (int in = 0; in < inner; ++in) {
                double acc = 0;
                for (int j = 0; j < alen; ++j) acc += y[o * alen * inner + j * inner + in];
                CHECK(acc == doctest::Approx(1.0).epsilon(1e-6));
                for (int j = 0; j < alen; ++j) {
                    double v = y[o * alen * inner + j * inner + in];
                    CHECK(v > 0.0);
                    CHECK(v < 1.0 + 1e-12);
                }
            }
    }
}

TEST_CASE("conv2d hand cases") {
    T64 x = T64::full({1, 1, 3, 3}, 1.0);
    T64 w = T64::full({1, 1, 3, 3}, 1.0);
    T64 b({1});
    T64 y = conv2d(x, w, b, 1, 0, 1);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y[0] == doctest::Approx(9.0));

    // delta kernel with matching padding is the identity, bitwise
    Rng rng(3);
    T64 img = rand_tensor<double>(rng, {1, 2, 5, 6});
    std::vector<double> delta(2 * 2 * 3 * 3, 0.0);
    for (int co = 0; co < 2; ++co) delta[((co * 2 + co) * 3 + 1) * 3 + 1] = 1.0;
    T64 wd({2, 2, 3, 3}, std::move(delta));
    T64 bd({2});
    CHECK(bitwise_equal(conv2d(img, wd, bd, 1, 1, 1), img));

    T64 x5 = T64::full({1, 1, 5, 5}, 1.0);
    T64 yd = conv2d(x5, w, b, 1, 0, 2);
    CHECK(yd.shape() == Shape{1, 1, 1, 1});
    CHECK(yd[0] == doctest::Approx(9.0));

    CHECK_THROWS_AS(conv2d(T64({1, 1, 2, 2}), w, b, 1, 0, 1), DimensionError);
}

TEST_CASE("maxpool2d hand cases") {
    T64 x({1, 1, 2, 2}, {1, 2, 3, 4});
    T64 y = maxpool2d(x);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y[0] == 4.0);

    T64 c = T64::full({1, 2, 4, 4}, 7.5);
    T64 yc = maxpool2d(c);
    CHECK(yc.shape() == Shape{1, 2, 2, 2});
    for (int i = 0; i < yc.size(); ++i) CHECK(yc[i] == 7.5);

    T64 neg({1, 1, 2, 2}, {-1, -2, -3, -4});
    CHECK(maxpool2d(neg)[0] == -1.0);

    CHECK_THROWS_AS(maxpool2d(T64({1, 1, 3, 4})), DimensionError);
}

TEST_CASE("upsample_bilinear hand cases") {
    T64 one({1, 1, 1, 1}, {3.25});
    T64 up = upsample_bilinear(one, 4, 5);
    CHECK(up.shape() == Shape{1, 1, 4, 5});
    for (int i = 0; i < up.size(); ++i) CHECK(up[i] == 3.25);

    Rng rng(5);
    T64 cst = T64::full({2, 3, 2, 2}, -0.75);
    T64 upc = upsample_bilinear(cst, 7, 9);
    for (int i = 0; i < upc.size(); ++i) CHECK(upc[i] == doctest::Approx(-0.75));

    T64 pair({1, 1, 1, 2}, {0.0, 1.0});
    T64 y = upsample_bilinear(pair, 1, 4);
    CHECK(y[0] == doctest::Approx(0.0));
    CHECK(y[1] == doctest::Approx(0.25));
    CHECK(y[2] == doctest::Approx(0.75));
    CHECK(y[3] == doctest::Approx(1.0));

    CHECK_THROWS_AS(upsample_bilinear(T64({1, 1, 4, 4}), 2, 8), DimensionError);
}

TEST_CASE("elementwise identities") {
    Rng rng(17);
    T64 x = rand_tensor<double>(rng, {3, 4});
    CHECK(bitwise_equal(mul(x, T64::full({3, 4}, 1.0)), x));
    CHECK(bitwise_equal(add(x, T64({3, 4})), x));

    T64 r({3}, {-1, 0, 2});
    T64 rr = relu(r);
    CHECK(rr[0] == 0.0);
    CHECK(rr[1] == 0.0);
    CHECK(rr[2] == 2.0);

    CHECK_THROWS_AS(add(T64({2, 2}), T64({2, 3})), DimensionError);
    CHECK_THROWS_AS(mul(T64({4}), T64({2, 2})), DimensionError);
}

TEST_CASE("layout transforms compose to identity bitwise") {
    Rng rng(23);
    T64 x = rand_tensor<double>(rng, {2, 3});
    CHECK(bitwise_equal(reshape(reshape(x, {3, 2}), {2, 3}), x));

    T64 a({2}, {1, 2});
    T64 b({1}, {3});
    T64 cat = concat<double>({a, b}, 0);
    CHECK(cat.shape() == Shape{3});
    CHECK(cat[0] == 1.0);
    CHECK(cat[1] == 2.0);
    CHECK(cat[2] == 3.0);

    T64 m = rand_tensor<double>(rng, {4, 6, 3});
    CHECK(bitwise_equal(transpose(transpose(m, 0, 2), 0, 2), m));
    CHECK(bitwise_equal(slice(m, {0, 0, 0}, {4, 6, 3}), m));

    // slicing a concat back apart
    T64 p = rand_tensor<double>(rng, {2, 3});
    T64 q = rand_tensor<double>(rng, {2, 2});
    T64 pq = concat<double>({p, q}, 1);
    CHECK(bitwise_equal(slice(pq, {0, 0}, {2, 3}), p));
    CHECK(bitwise_equal(slice(pq, {0, 3}, {2, 5}), q));

    T64 img = rand_tensor<double>(rng, {3, 4, 6});
    CHECK(bitwise_equal(unpatchify(patchify(img, 2), 3, 4, 6, 2), img));

    CHECK_THROWS_AS(reshape(x, {5}), DimensionError);
    CHECK_THROWS_AS(concat<double>({p, q}, 0), DimensionError);
    CHECK_THROWS_AS(patchify(img, 5), DimensionError);
}

TEST_CASE("backward basics") {
    SUBCASE("sum of leaf gives ones") {
        Tape<double> tape;
        T64 w = tape.leaf(T64({3}, {4, 5, 6}), "w");
        T64 loss = sum(w);
        auto grads = backward(loss, tape);
        const T64& g = grads.at("w");
        for (int i = 0; i < 3; ++i) CHECK(g[i] == 1.0);
    }
    SUBCASE("sum of squares gives 2w") {
        Tape<double> tape;
        T64 w = tape.leaf(T64({3}, {1, 2, 3}), "w");
        T64 loss = sum(mul(w, w));
        auto grads = backward(loss, tape);
        const T64& g = grads.at("w");
        CHECK(g[0] == doctest::Approx(2));
        CHECK(g[1] == doctest::Approx(4));
        CHECK(g[2] == doctest::Approx(6));
    }
    SUBCASE("gradients mirror the parameter shape") {
        Tape<double> tape;
        T64 w = tape.leaf(T64({2, 3, 4}), "w");
        T64 untouched = tape.leaf(T64({4, 1}), "idle");
        (void)untouched;
        auto grads = backward(sum(w), tape);
        CHECK(grads.at("w").shape() == Shape{2, 3, 4});
        CHECK(grads.at("idle").shape() == Shape{4, 1});
        for (int i = 0; i < 4; ++i) CHECK(grads.at("idle")[i] == 0.0);
    }
    SUBCASE("detached loss gives zeros") {
        Tape<double> tape;
        T64 w = tape.leaf(T64({3}, {1, 2, 3}), "w");
        (void)w;
        T64 loss = sum(T64({2}, {1, 1}));  // never touches w
        auto grads = backward(loss, tape);
        const T64& g = grads.at("w");
        for (int i = 0; i < 3; ++i) CHECK(g[i] == 0.0);
    }
    SUBCASE("non-scalar loss rejected") {
        Tape<double> tape;
        T64 w = tape.leaf(T64({3}, {1, 2, 3}), "w");
        CHECK_THROWS_AS(backward(mul(w, w), tape), ContractError);
    }
}

TEST_CASE("tape stays topologically ordered and backward visits nodes once") {
    Tape<double> tape;
    T64 w = tape.leaf(T64({4}, {1, -2, 3, -4}), "w");
    // diamond: two consumers of the same intermediate
    T64 h = mul(w, w);
    T64 loss = sum(add(h, relu(h)));
    for (int i = 0; i < tape.node_count(); ++i)
        for (int in : tape.node_inputs(i))
            if (in >= 0) CHECK(in < i);
    auto grads = backward(loss, tape);
    for (int i = 0; i < tape.node_count(); ++i) CHECK(tape.backward_visits(i) <= 1);
    // d/dw sum(w^2 + relu(w^2)) = 2w + 2w for every element since w^2 > 0
    const T64& g = grads.at("w");
    CHECK(g[0] == doctest::Approx(4));
    CHECK(g[1] == doctest::Approx(-8));
    CHECK(g[2] == doctest::Approx(12));
    CHECK(g[3] == doctest::Approx(-16));
}

TEST_CASE("grad_check on closed forms") {
    T64 w({3}, {0.5, -1.25, 2.0});
    std::vector<ParamRef> params{{"w", &w}};
    auto loss = [&](Tape<double>* tape) {
        T64 t = track_or_pass(tape, w, "w");
        return sum(mul(t, t));
    };
    GradCheckOptions opt;
    opt.eps = 1e-5;
    opt.tol = 1e-8;
    auto report = grad_check(params, loss, opt);
    CHECK(report.passed);
    CHECK(report.max_rel_err < 1e-8);

    // constant function: both gradients identically zero
    auto const_loss = [&](Tape<double>* tape) {
        T64 t = track_or_pass(tape, w, "w");
        return sub(sum(t), sum(t));
    };
    Tape<double> tape;
    auto grads = backward(const_loss(&tape), tape);
    for (int i = 0; i < 3; ++i) CHECK(grads.at("w")[i] == 0.0);
    auto report2 = grad_check(params, const_loss, opt);
    CHECK(report2.max_rel_err == 0.0);
}

// Finite differences vs reverse mode for every differentiable primitive,
// on random shapes; 100 trials spread across the operation set.
TEST_CASE("primitive gradients match central differences") {
    GradCheckOptions opt;
    opt.eps = 1e-5;
    opt.tol = 1e-5;
    double worst = 0.0;
    const int kTrials = 100;
    for (int trial = 0; trial < kTrials; ++trial) {
        Rng rng(1000 + trial);
        const int which = trial % 10;
        GradCheckReport report;
        switch (which) {
            case 0: {  // matmul
                int m = static_cast<int>(rng.uniform_int(1, 6));
                int k = static_cast<int>(rng.uniform_int(1, 6));
                int n = static_cast<int>(rng.uniform_int(1, 6));
                T64 A = rand_tensor<double>(rng, {m, k});
                T64 B = rand_tensor<double>(rng, {k, n});
                T64 R = rand_tensor<double>(rng, {m, n});
                auto loss = [&](Tape<double>* t) {
                    return sum(mul(matmul(track_or_pass(t, A, "a"), track_or_pass(t, B, "b")), R));
                };
                report = grad_check({{"a", &A}, {"b", &B}}, loss, opt);
                break;
            }
            case 1: {  // softmax
                int r = static_cast<int>(rng.uniform_int(1, 3));
                Shape shape;
                for (int d = 0; d < r; ++d)
                    shape.push_back(static_cast<int>(rng.uniform_int(1, 6)));
                int axis = static_cast<int>(rng.uniform_int(0, r - 1));
                T64 X = rand_tensor<double>(rng, shape, -2.0, 2.0);
                T64 R = rand_tensor<double>(rng, shape);
                auto loss = [&](Tape<double>* t) {
                    return sum(mul(softmax(track_or_pass(t, X, "x"), axis), R));
                };
                report = grad_check({{"x", &X}}, loss, opt);
                break;
            }
            case 2: {  // conv2d with random geometry
                int cin = static_cast<int>(rng.uniform_int(1, 3));
                int cout = static_cast<int>(rng.uniform_int(1, 3));
                int kh = static_cast<int>(rng.uniform_int(1, 3));
                int kw = static_cast<int>(rng.uniform_int(1, 3));
                int stride = static_cast<int>(rng.uniform_int(1, 2));
                int pad = static_cast<int>(rng.uniform_int(0, 2));
                int dil = static_cast<int>(rng.uniform_int(1, 2));
                int H, W;
                do {
                    H = static_cast<int>(rng.uniform_int(1, 8));
                    W = static_cast<int>(rng.uniform_int(1, 8));
                } while (conv_out_extent(H, pad, dil, kh, stride) < 1 ||
                         conv_out_extent(W, pad, dil, kw, stride) < 1);
                T64 X = rand_tensor<double>(rng, {1, cin, H, W});
                T64 Wt = rand_tensor<double>(rng, {cout, cin, kh, kw});
                T64 Bs = rand_tensor<double>(rng, {cout});
                Shape os{1, cout, conv_out_extent(H, pad, dil, kh, stride),
                         conv_out_extent(W, pad, dil, kw, stride)};
                T64 R = rand_tensor<double>(rng, os);
                auto loss = [&](Tape<double>* t) {
                    return sum(mul(conv2d(track_or_pass(t, X, "x"), track_or_pass(t, Wt, "w"),
                                          track_or_pass(t, Bs, "b"), stride, pad, dil),
                                   R));
                };
                report = grad_check({{"x", &X}, {"w", &Wt}, {"b", &Bs}}, loss, opt);
                break;
            }
            case 3: {  // maxpool, inputs resampled away from window ties
                int C = static_cast<int>(rng.uniform_int(1, 3));
                int H = 2 * static_cast<int>(rng.uniform_int(1, 4));
                int W = 2 * static_cast<int>(rng.uniform_int(1, 4));
                T64 X = rand_tensor<double>(rng, {1, C, H, W});
                T64 R = rand_tensor<double>(rng, {1, C, H / 2, W / 2});
                auto loss = [&](Tape<double>* t) {
                    return sum(mul(maxpool2d(track_or_pass(t, X, "x")), R));
                };
                int guard = 0;
                while (testutil::kink_margin_of(loss) <= 10 * opt.eps && guard++ < 20)
                    X = rand_tensor<double>(rng, {1, C, H, W});
                report = grad_check({{"x", &X}}, loss, opt);
                break;
            }
            case 4: {  // upsample_bilinear
                int C = static_cast<int>(rng.uniform_int(1, 2));
                int h = static_cast<int>(rng.uniform_int(1, 5));
                int w = static_cast<int>(rng.uniform_int(1, 5));
                int H = h + static_cast<int>(rng.uniform_int(0, 8));
                int W = w + static_cast<int>(rng.uniform_int(0, 8));
                T64 X = rand_tensor<double>(rng, {1, C, h, w});
                T64 R = rand_tensor<double>(rng, {1, C, H, W});
                auto loss = [&](Tape<double>* t) {
                    return sum(mul(upsample_bilinear(track_or_pass(t, X, "x"), H, W), R));
                };
                report = grad_check({{"x", &X}}, loss, opt);
                break;
            }
            case 5: {  // add/sub/mul chain
                Shape shape{static_cast<int>(rng.uniform_int(1, 8)),
                            static_cast<int>(rng.uniform_int(1, 8))};
                T64 A = rand_tensor<double>(rng, shape);
                T64 B = rand_tensor<double>(rng, shape);
                T64 R = rand_tensor<double>(rng, shape);
                auto loss = [&](Tape<double>* t) {
                    T64 a = track_or_pass(t, A, "a");
                    T64 b = track_or_pass(t, B, "b");
                    return sum(mul(sub(mul(a, b), add(a, b)), R));
                };
                report = grad_check({{"a", &A}, {"b", &B}}, loss, opt);
                break;
            }
            case 6: {  // relu, inputs resampled away from the origin kink
                Shape shape{static_cast<int>(rng.uniform_int(1, 16))};
                T64 X = rand_tensor<double>(rng, shape);
                T64 R = rand_tensor<double>(rng, shape);
                auto loss = [&](Tape<double>* t) {
                    return sum(mul(relu(track_or_pass(t, X, "x")), R));
                };
                int guard = 0;
                while (testutil::kink_margin_of(loss) <= 10 * opt.eps && guard++ < 20)
                    X = rand_tensor<double>(rng, shape);
                report = grad_check({{"x", &X}}, loss, opt);
                break;
            }
            case 7: {  // reshape + transpose
                Shape shape{static_cast<int>(rng.uniform_int(1, 4)),
                            static_cast<int>(rng.uniform_int(1, 4)),
                            static_cast<int>(rng.uniform_int(1, 4))};
                T64 X = rand_tensor<double>(rng, shape);
                Shape flat{shape_numel(shape)};
                T64 R = rand_tensor<double>(rng, flat);
                auto loss = [&](Tape<double>* t) {
                    T64 x = track_or_pass(t, X, "x");
                    return sum(mul(reshape(transpose(x, 0, 2), flat), R));
                };
                report = grad_check({{"x", &X}}, loss, opt);
                break;
            }
            case 8: {  // concat + slice
                int rows = static_cast<int>(rng.uniform_int(1, 4));
                int c1 = static_cast<int>(rng.uniform_int(1, 4));
                int c2 = static_cast<int>(rng.uniform_int(1, 4));
                T64 A = rand_tensor<double>(rng, {rows, c1});
                T64 B = rand_tensor<double>(rng, {rows, c2});
                T64 R = rand_tensor<double>(rng, {rows, c1 + c2 - 1});
                auto loss = [&](Tape<double>* t) {
                    T64 cat = concat<double>({track_or_pass(t, A, "a"), track_or_pass(t, B, "b")}, 1);
                    return sum(mul(slice(cat, {0, 1}, {rows, c1 + c2}), R));
                };
                report = grad_check({{"a", &A}, {"b", &B}}, loss, opt);
                break;
            }
            default: {  // patchify round trip with a projection in between
                int C = static_cast<int>(rng.uniform_int(1, 3));
                int P = static_cast<int>(rng.uniform_int(1, 2));
                int H = P * static_cast<int>(rng.uniform_int(1, 3));
                int W = P * static_cast<int>(rng.uniform_int(1, 3));
                T64 X = rand_tensor<double>(rng, {C, H, W});
                T64 R = rand_tensor<double>(rng, {C, H, W});
                auto loss = [&](Tape<double>* t) {
                    T64 x = track_or_pass(t, X, "x");
                    T64 tok = patchify(x, P);
                    return sum(mul(unpatchify(scale(tok, 1.5), C, H, W, P), R));
                };
                report = grad_check({{"x", &X}}, loss, opt);
                break;
            }
        }
        INFO("trial ", trial, " op ", which, " worst param ", report.worst_param, " coord ",
             report.worst_coord);
        CHECK(report.passed);
        worst = std::max(worst, report.max_rel_err);
    }
    MESSAGE("max relative error over ", kTrials, " trials: ", worst);
}

TEST_CASE("operations are deterministic across repeated evaluation") {
    Rng rng(99);
    T64 A = rand_tensor<double>(rng, {5, 7});
    T64 B = rand_tensor<double>(rng, {7, 3});
    CHECK(bitwise_equal(matmul(A, B), matmul(A, B)));
    T64 X = rand_tensor<double>(rng, {1, 3, 8, 8});
    CHECK(bitwise_equal(softmax(X, 2), softmax(X, 2)));
    T64 W = rand_tensor<double>(rng, {2, 3, 3, 3});
    T64 bias = rand_tensor<double>(rng, {2});
    CHECK(bitwise_equal(conv2d(X, W, bias, 1, 1, 1), conv2d(X, W, bias, 1, 1, 1)));
    CHECK(bitwise_equal(upsample_bilinear(X, 11, 13), upsample_bilinear(X, 11, 13)));
}

TEST_CASE("tensor dump format round-trips bitwise") {
    Rng rng(41);
    auto dir = std::filesystem::temp_directory_path() / "mafnet_tensor_io_test";
    std::filesystem::create_directories(dir);
    auto path = (dir / "t.maft").string();
    Tensor<float> t = rand_tensor<float>(rng, {2, 3, 4}, -10.0, 10.0);
    save_tensor(t, path);
    Tensor<float> back = load_tensor(path);
    CHECK(bitwise_equal(t, back));

    // header layout: magic, version, dtype, rank, extents
    std::ifstream is(path, std::ios::binary);
    char head[7];
    is.read(head, 7);
    CHECK(std::string(head, 4) == "MAFT");
    CHECK(head[4] == 0x01);
    CHECK(head[5] == 0x01);
    CHECK(head[6] == 3);

    CHECK_THROWS_AS(load_tensor((dir / "missing.maft").string()), IoError);
    std::filesystem::remove_all(dir);
}
