#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "flowprior/common.hpp"
#include "flowprior/flow.hpp"
#include "flowprior/measurement.hpp"
#include "test_support.hpp"

using namespace flowprior;
using namespace flowprior::testing;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("flowprior_test_" + name);
}

}  // namespace

TEST_CASE("identity-initialized stack is the identity map") {
    RngStream rng(1);
    FlowStack G = make_flow_stack(6, 3, rng);
    RngStream zr(2);
    for (int t = 0; t < 20; ++t) {
        Vector z = random_vector(6, zr, 3.0);
        FlowResult fr = forward(G, z);
        // mixing layers permute, couplings and actnorm are identity; a full
        // round trip must restore z exactly
        FlowResult back = inverse(G, fr.value);
        for (int i = 0; i < 6; ++i) CHECK(back.value[static_cast<size_t>(i)] == doctest::Approx(z[static_cast<size_t>(i)]).epsilon(1e-14));
        CHECK(fr.clip_events == 0);
    }
    CHECK(log_det(G, Vector(6, 0.5)) == doctest::Approx(0.0).epsilon(1e-14));
}

TEST_CASE("single permutation layer permutes entries") {
    FlowStack G;
    G.dim = 3;
    Mixing mix;
    mix.perm = {2, 0, 1};
    G.layers.emplace_back(mix);
    Vector y = forward(G, Vector{1.0, 2.0, 3.0}).value;
    CHECK(y == Vector{3.0, 1.0, 2.0});
    Vector back = inverse(G, y).value;
    CHECK(back == Vector{1.0, 2.0, 3.0});
    CHECK(log_det(G, Vector{1.0, 2.0, 3.0}) == 0.0);
}

TEST_CASE("actnorm affine inverse and log-determinant") {
    FlowStack G;
    G.dim = 2;
    ActNorm an;
    an.scale = {2.0, 2.0};
    an.bias = {1.0, 1.0};
    G.layers.emplace_back(an);
    Vector z = inverse(G, Vector{3.0, 3.0}).value;
    CHECK(z[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(z[1] == doctest::Approx(1.0).epsilon(1e-15));
    // epsilon is a floor, so an exact scale of 2 contributes exactly log 2 each
    CHECK(log_det(G, Vector{0.0, 0.0}) == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("bijectivity of random stacks") {
    FlowStack G = make_random_stack(8, 4, 31);
    RngStream zr(5);
    double worst = 0.0;
    for (int t = 0; t < 1000; ++t) {
        Vector z(8);
        for (double& v : z) v = 5.0 * (2.0 * zr.next_unit() - 1.0);
        Vector x = forward(G, z).value;
        Vector back = inverse(G, x).value;
        for (size_t i = 0; i < z.size(); ++i) worst = std::max(worst, std::fabs(back[i] - z[i]));
        Vector fwd2 = forward(G, back).value;
        for (size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::fabs(fwd2[i] - x[i]));
    }
    CHECK(worst < 1e-9);
}

TEST_CASE("bijectivity with learned LU mixing") {
    FlowStack G = make_random_stack(6, 3, 77, MixingKind::lu);
    RngStream zr(6);
    for (int t = 0; t < 200; ++t) {
        Vector z = random_vector(6, zr, 2.0);
        Vector back = inverse(G, forward(G, z).value).value;
        for (size_t i = 0; i < z.size(); ++i) CHECK(std::fabs(back[i] - z[i]) < 1e-9);
    }
}

TEST_CASE("log_det matches the numerical Jacobian determinant") {
    for (uint64_t seed : {101u, 102u}) {
        for (int n : {2, 4, 8}) {
            FlowStack G = make_random_stack(n, 3, seed, seed % 2 ? MixingKind::lu
                                                                 : MixingKind::permutation);
            RngStream zr(seed + 1);
            Vector z = random_vector(n, zr);
            auto f = [&](const Vector& v) { return forward(G, v).value; };
            Matrix J = finite_diff_jacobian(f, z, 1e-5);
            double ld_numeric = log_abs_det(J);
            CHECK(log_det(G, z) == doctest::Approx(ld_numeric).epsilon(1e-4));
        }
    }
}

TEST_CASE("log_prob closed forms on the identity stack") {
    RngStream rng(1);
    FlowStack G = make_flow_stack(2, 1, rng);
    CHECK(log_prob(G, Vector{0.0, 0.0}) == doctest::Approx(-1.8378770664093453).epsilon(1e-12));
    CHECK(log_prob(G, Vector{1.0, 0.0}) == doctest::Approx(-2.3378770664093453).epsilon(1e-12));
}

TEST_CASE("log_prob integrates to one over the plane") {
    FlowStack G = make_random_stack(2, 3, 55, MixingKind::permutation, 0.2, 0.4);
    double mass = density_mass_2d(G, -9.0, 9.0, 300);
    CHECK(mass == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("grad_data_fit closed forms on the identity stack") {
    RngStream rng(9);
    FlowStack G = make_flow_stack(4, 2, rng);
    Vector z = random_vector(4, rng);

    // A = I, y = G(z): pure regularizer gradient 2*gamma*z
    Vector y = forward(G, z).value;
    MeasurementOperator id = MeasurementOperator::identity(4);
    Vector g = grad_data_fit(G, z, id, y, 0.25);
    for (size_t i = 0; i < z.size(); ++i) CHECK(g[i] == doctest::Approx(0.5 * z[i]).epsilon(1e-12));

    // gamma = 0, linear case: 2 A^T (A G(z) - y); the stack only permutes
    MeasurementOperator gop = MeasurementOperator::gaussian(2, 4, rng);
    Vector y2 = random_vector(2, rng);
    Vector g2 = grad_data_fit(G, z, gop, y2, 0.0);
    Vector gz = forward(G, z).value;
    Vector r = matvec(gop.dense, gz);
    for (size_t i = 0; i < r.size(); ++i) r[i] -= y2[i];
    Vector expect_x = tmatvec(gop.dense, r);
    for (double& v : expect_x) v *= 2.0;
    // pull back through the stack by finite differences for an independent check
    auto obj = [&](const Vector& v) {
        Vector gv = forward(G, v).value;
        Vector rr = matvec(gop.dense, gv);
        double s = 0.0;
        for (size_t i = 0; i < rr.size(); ++i) s += (rr[i] - y2[i]) * (rr[i] - y2[i]);
        return s;
    };
    Vector g_fd = fd_gradient(obj, z);
    for (size_t i = 0; i < z.size(); ++i) CHECK(g2[i] == doctest::Approx(g_fd[i]).epsilon(1e-6));
}

TEST_CASE("grad_data_fit matches central differences on random stacks") {
    RngStream seeds(2024);
    for (int trial = 0; trial < 10; ++trial) {
        int n = 4 + 2 * (trial % 3);
        FlowStack G = make_random_stack(n, 3, 300 + static_cast<uint64_t>(trial),
                                        trial % 2 ? MixingKind::lu : MixingKind::permutation);
        RngStream rng(400 + static_cast<uint64_t>(trial));
        Vector z = random_vector(n, rng, 0.8);
        double gamma = (trial % 3) * 0.05;

        MeasurementOperator op;
        if (trial % 3 == 0)
            op = MeasurementOperator::identity(n);
        else if (trial % 3 == 1)
            op = MeasurementOperator::gaussian(std::max(1, n / 2), n, rng);
        else {
            std::vector<uint8_t> mask(static_cast<size_t>(n), 0);
            for (int i = 0; i < n; i += 2) mask[static_cast<size_t>(i)] = 1;
            op = MeasurementOperator::masked(mask);
        }
        Vector y = random_vector(op.out_dim(), rng);
        if (op.kind == OperatorKind::mask)
            for (int i = 0; i < n; ++i)
                if (!op.mask[static_cast<size_t>(i)]) y[static_cast<size_t>(i)] = 0.0;

        Vector g = grad_data_fit(G, z, op, y, gamma);
        auto obj = [&](const Vector& v) {
            Vector x = forward(G, v).value;
            Vector r = op.apply(x);
            double s = 0.0;
            for (size_t i = 0; i < r.size(); ++i) s += (r[i] - y[i]) * (r[i] - y[i]);
            return s + gamma * dot(v, v);
        };
        Vector g_fd = fd_gradient(obj, z);
        double scale = std::max(1.0, norm_inf(g_fd));
        for (size_t i = 0; i < z.size(); ++i)
            CHECK(std::fabs(g[i] - g_fd[i]) / scale < 1e-5);
    }
}

TEST_CASE("jacobian singular values") {
    RngStream rng(8);
    FlowStack id = make_flow_stack(4, 2, rng);
    Vector sv = jacobian_singular_values(id, Vector(4, 0.3));
    for (double s : sv) CHECK(s == doctest::Approx(1.0).epsilon(1e-12));

    FlowStack an;
    an.dim = 2;
    ActNorm layer;
    layer.scale = {3.0, 1.0};
    layer.bias = {0.0, 0.0};
    an.layers.emplace_back(layer);
    Vector sv2 = jacobian_singular_values(an, Vector{0.0, 0.0});
    CHECK(sv2[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(sv2[1] == doctest::Approx(1.0).epsilon(1e-12));

    FlowStack G = make_random_stack(6, 3, 99);
    Vector z = random_vector(6, rng);
    Vector sv3 = jacobian_singular_values(G, z);
    double sum_log = 0.0;
    for (double s : sv3) sum_log += std::log(s);
    CHECK(sum_log == doctest::Approx(log_det(G, z)).epsilon(1e-6));
}

TEST_CASE("parameter gradients match finite differences") {
    // the training path differentiates NLL through the inverse pass; check
    // every parameter against an independent finite-difference oracle
    for (uint64_t seed : {61u, 62u}) {
        FlowStack G = make_random_stack(4, 2, seed,
                                        seed % 2 ? MixingKind::lu : MixingKind::permutation,
                                        0.2, 0.4);
        RngStream rng(seed + 10);
        Vector x = random_vector(4, rng, 1.5);

        int np = trainable_count(G);
        Vector grad(static_cast<size_t>(np), 0.0);
        nll_and_grad(G, x, grad.data());

        Vector theta = get_trainable(G);
        const double h = 1e-6;
        for (int j = 0; j < np; ++j) {
            Vector tp = theta;
            tp[static_cast<size_t>(j)] += h;
            FlowStack Gp = G;
            set_trainable(Gp, tp);
            double fp = nll_and_grad(Gp, x, nullptr);
            tp[static_cast<size_t>(j)] -= 2.0 * h;
            set_trainable(Gp, tp);
            double fm = nll_and_grad(Gp, x, nullptr);
            double fd = (fp - fm) / (2.0 * h);
            CHECK(std::fabs(grad[static_cast<size_t>(j)] - fd) <
                  1e-4 * std::max(1.0, std::fabs(fd)));
        }
    }
}

TEST_CASE("checkpoint round trip is bitwise") {
    FlowStack G = make_random_stack(6, 3, 404, MixingKind::lu);
    auto path = temp_file("roundtrip.ckpt");
    save_flow(G, path.string());
    FlowStack L = load_flow(path.string());

    RngStream rng(5);
    for (int t = 0; t < 10; ++t) {
        Vector z = random_vector(6, rng, 2.0);
        Vector a = forward(G, z).value;
        Vector b = forward(L, z).value;
        CHECK(a == b);  // bitwise
    }

    // saving the loaded stack reproduces the file byte for byte
    auto path2 = temp_file("roundtrip2.ckpt");
    save_flow(L, path2.string());
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
    std::filesystem::remove(path);
    std::filesystem::remove(path2);
}

TEST_CASE("checkpoint header errors are distinct") {
    FlowStack G = make_random_stack(4, 2, 505);
    auto path = temp_file("header.ckpt");
    save_flow(G, path.string());

    std::ifstream in(path, std::ios::binary);
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    // wrong magic
    std::string bad = data;
    bad[0] = 'X';
    auto bad_path = temp_file("bad_magic.ckpt");
    std::ofstream(bad_path, std::ios::binary) << bad;
    CHECK_THROWS_WITH_AS(load_flow(bad_path.string()), doctest::Contains("magic"), IoError);

    // truncation
    auto trunc_path = temp_file("truncated.ckpt");
    std::ofstream(trunc_path, std::ios::binary) << data.substr(0, data.size() / 2);
    CHECK_THROWS_WITH_AS(load_flow(trunc_path.string()), doctest::Contains("truncated"), IoError);

    // unsupported version
    std::string badver = data;
    badver[8] = 9;
    auto ver_path = temp_file("bad_version.ckpt");
    std::ofstream(ver_path, std::ios::binary) << badver;
    CHECK_THROWS_WITH_AS(load_flow(ver_path.string()), doctest::Contains("version"), IoError);

    for (auto& p : {path, bad_path, trunc_path, ver_path}) std::filesystem::remove(p);
}

TEST_CASE("activation clipping is transparent when inactive") {
    FlowStack clipped = make_random_stack(4, 3, 606);
    FlowStack unclipped = clipped;
    unclipped.activation_clip = std::numeric_limits<double>::infinity();
    RngStream rng(7);
    for (int t = 0; t < 50; ++t) {
        Vector z = random_vector(4, rng);
        FlowResult a = forward(clipped, z);
        FlowResult b = forward(unclipped, z);
        CHECK(a.clip_events == 0);
        CHECK(a.value == b.value);
    }
}

TEST_CASE("activation clipping reports events") {
    FlowStack G;
    G.dim = 2;
    G.activation_clip = 40.0;
    ActNorm an;
    an.scale = {100.0, 100.0};
    an.bias = {0.0, 0.0};
    G.layers.emplace_back(an);
    FlowResult r = forward(G, Vector{1.0, 1.0});
    CHECK(r.clip_events == 2);
    CHECK(r.value[0] == 40.0);
}
