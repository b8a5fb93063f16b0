#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "autodiff_oracle.hpp"
#include "bhn/checkpoint.hpp"
#include "bhn/tape.hpp"

using namespace bhn;
using testing::random_tensor;
using DTape = TapeT<double>;
using DT = TensorT<double>;

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor({2, 3}, std::vector<float>(5)), Error);
    CHECK_THROWS_AS(Tensor({0, 3}, {}), Error);
    Tensor t = Tensor::zeros({2, 3});
    CHECK(t.numel() == 6);
    CHECK(t.last_dim() == 3);
    CHECK(t.rows() == 2);
}

TEST_CASE("leaky_relu branch values") {
    Tape t;
    Var x = t.leaf(Tensor({2}, {2.0f, -1.0f}));
    Var y = t.leaky_relu(x, 0.01);
    CHECK(t.data(y)[0] == doctest::Approx(2.0));
    CHECK(t.data(y)[1] == doctest::Approx(-0.01));
}

TEST_CASE("softmax of equal logits is uniform and row-stochastic") {
    Tape t;
    Var y = t.softmax_lastdim(t.leaf(Tensor({1, 3}, {0, 0, 0})));
    for (int j = 0; j < 3; ++j) CHECK(t.data(y)[j] == doctest::Approx(1.0 / 3).epsilon(1e-7));

    Rng rng(7);
    Tensor logits = Tensor::zeros({8, 5});
    for (auto& v : logits.data) v = static_cast<float>(rng.uniform(-4, 4));
    Tape t2;
    Var sm = t2.softmax_lastdim(t2.leaf(logits));
    for (int r = 0; r < 8; ++r) {
        double sum = 0;
        for (int j = 0; j < 5; ++j) {
            const float p = t2.data(sm)[r * 5 + j];
            CHECK(p > 0.0f);
            sum += p;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("cosine similarity of a vector with itself is 1") {
    Tape t;
    Var u = t.leaf(Tensor({1, 3}, {0.3f, -1.2f, 0.5f}));
    CHECK(t.data(t.cosine_similarity_rows(u, u))[0] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("cosine similarity rejects zero rows") {
    Tape t;
    Var z = t.leaf(Tensor({1, 2}, {0.0f, 0.0f}));
    CHECK_THROWS_WITH_AS(t.cosine_similarity_rows(z, z),
                         doctest::Contains("zero-norm"), Error);
}

TEST_CASE("backward of sum gives all-ones leaf gradient") {
    Tape t;
    Var x = t.leaf(Tensor::full({3, 4}, 2.5f), true);
    t.backward(t.sum(x));
    for (float g : t.grad(x)) CHECK(g == 1.0f);
}

TEST_CASE("backward of mse against zero at x=3 gives 6") {
    Tape t;
    Var x = t.leaf(Tensor::scalar(3.0f), true);
    Var l = t.mean_square_error(x, t.leaf(Tensor::scalar(0.0f)));
    t.backward(l);
    CHECK(t.grad(x)[0] == doctest::Approx(6.0));
}

TEST_CASE("backward requires a scalar root and a non-empty tape") {
    Tape t;
    CHECK_THROWS_AS(t.backward(Var{0}), Error);  // empty tape
    Var x = t.leaf(Tensor::zeros({2, 2}), true);
    CHECK_THROWS_WITH_AS(t.backward(x), doctest::Contains("scalar"), Error);
}

TEST_CASE("shape mismatches name the primitive and both shapes") {
    Tape t;
    Var a = t.leaf(Tensor::zeros({2, 3}));
    Var b = t.leaf(Tensor::zeros({2, 3}));
    CHECK_THROWS_WITH_AS(t.matmul(a, b), doctest::Contains("matmul"), Error);
    CHECK_THROWS_WITH_AS(t.matmul(a, b), doctest::Contains("[2x3]"), Error);
    Var c = t.leaf(Tensor::zeros({3, 2}));
    CHECK_THROWS_WITH_AS(t.add(a, c), doctest::Contains("add"), Error);
    CHECK_THROWS_AS(t.slice(a, 2, 2), Error);
    CHECK_THROWS_AS(t.slice(a, 0, 4), Error);
}

TEST_CASE("non-finite inputs are rejected") {
    Tape t;
    CHECK_THROWS_WITH_AS(t.leaf(Tensor({1}, {INFINITY})), doctest::Contains("non-finite"),
                         Error);
    Var x = t.leaf(Tensor({1}, {-2.0f}));
    CHECK_THROWS_WITH_AS(t.log(x), doctest::Contains("log"), Error);
}

TEST_CASE("gradient accumulation sums both paths of a reused leaf") {
    DTape t;
    DT c1 = DT::full({2, 2}, 3.0);
    DT c2 = DT::full({2, 2}, -1.25);
    Rng rng(3);
    Var x = t.leaf(random_tensor({2, 2}, rng), true);
    Var path1 = t.sum(t.elementwise_mul(x, t.leaf(c1)));
    Var path2 = t.sum(t.elementwise_mul(x, t.leaf(c2)));
    t.backward(t.add(path1, path2));
    for (double g : t.grad(x)) CHECK(g == doctest::Approx(3.0 - 1.25).epsilon(1e-12));
}

TEST_CASE("parameter bound twice accumulates both contributions") {
    ParameterT<double> p("p", DT::full({2}, 1.5));
    DTape t;
    Var a = t.param(p);
    Var b = t.param(p);
    t.backward(t.sum(t.add(a, t.scale(b, 2.0))));
    CHECK(p.grad.data[0] == doctest::Approx(3.0));  // 1 + 2
    CHECK(p.has_grad);
}

TEST_CASE("tape replay determinism: same inputs give bit-identical values and grads") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        TapeT<float> t;
        Tensor a = Tensor::zeros({4, 6});
        Tensor b = Tensor::zeros({6, 3});
        for (auto& v : a.data) v = static_cast<float>(rng.uniform(-1, 1));
        for (auto& v : b.data) v = static_cast<float>(rng.uniform(-1, 1));
        Var va = t.leaf(a, true);
        Var vb = t.leaf(b, true);
        Var y = t.tanh(t.matmul(va, vb));
        Var loss = t.mean_square_error(y, t.constant(Tensor::zeros({4, 3})));
        t.backward(loss);
        auto ga = t.grad(va);
        auto gb = t.grad(vb);
        ga.insert(ga.end(), gb.begin(), gb.end());
        ga.push_back(t.data(loss)[0]);
        return ga;
    };
    CHECK(run(11) == run(11));
}

TEST_CASE("finite-difference oracle over every primitive and layer") {
    auto res = testing::run_autodiff_oracle(8, 2024);
    for (const auto& c : res.cases) {
        INFO(c.name);
        CHECK(c.max_rel_err < 1e-4);
        CHECK(c.checked > 0);
    }
}

// ---- optimizers ----

TEST_CASE("sgd with zero lr leaves parameters unchanged") {
    Parameter p("w", Tensor::full({3}, 1.0f));
    p.grad = Tensor::full({3}, 5.0f);
    p.has_grad = true;
    Sgd opt(SgdConfig{0.0, 0.9, 0.0});
    opt.step({&p});
    for (float v : p.value.data) CHECK(v == 1.0f);
    CHECK(!p.has_grad);  // gradients cleared by the step
}

TEST_CASE("sgd hand-computed step") {
    Parameter p("w", Tensor::scalar(1.0f));
    p.grad = Tensor::scalar(1.0f);
    p.has_grad = true;
    Sgd opt(SgdConfig{0.1, 0.0, 0.0});
    opt.step({&p});
    CHECK(p.value.data[0] == doctest::Approx(0.9));
}

TEST_CASE("sgd weight-decay-only step") {
    Parameter p("w", Tensor::scalar(1.0f));
    p.grad = Tensor::scalar(0.0f);
    p.has_grad = true;
    Sgd opt(SgdConfig{0.1, 0.9, 0.001});
    opt.step({&p});
    CHECK(p.value.data[0] == doctest::Approx(0.9999).epsilon(1e-9));
}

TEST_CASE("sgd reports the missing-gradient parameter by name") {
    Parameter p("encoder.w", Tensor::scalar(1.0f));
    Sgd opt(SgdConfig{});
    CHECK_THROWS_WITH_AS(opt.step({&p}), doctest::Contains("encoder.w"), Error);
}

TEST_CASE("adam with zero lr leaves parameters unchanged; step count increments") {
    Parameter p("w", Tensor::full({2}, 0.5f));
    p.grad = Tensor::full({2}, 1.0f);
    p.has_grad = true;
    AdamConfig cfg;
    cfg.lr = 0.0;
    Adam opt(cfg);
    opt.step({&p});
    CHECK(p.value.data[0] == 0.5f);
    CHECK(opt.step_count() == 1);
}

TEST_CASE("adam first step has magnitude ~ lr for unit gradient") {
    Parameter p("w", Tensor::full({4}, 2.0f));
    p.grad = Tensor::full({4}, 1.0f);
    p.has_grad = true;
    AdamConfig cfg;
    cfg.lr = 1e-4;
    Adam opt(cfg);
    opt.step({&p});
    for (float v : p.value.data)
        CHECK(std::fabs(2.0 - v - cfg.lr) < 1e-6);  // lr * g/(|g| + eps)
}

TEST_CASE("adam shrinks a parameter monotonically under constant positive gradient") {
    Parameter p("w", Tensor::scalar(1.0f));
    AdamConfig cfg;
    cfg.lr = 1e-2;
    Adam opt(cfg);
    float prev = p.value.data[0];
    for (int i = 0; i < 2; ++i) {
        p.grad = Tensor::scalar(0.7f);
        p.has_grad = true;
        opt.step({&p});
        CHECK(p.value.data[0] < prev);
        prev = p.value.data[0];
    }
}

// ---- checkpoint format ----

TEST_CASE("checkpoint round trip is bit-exact and validates structure") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "bhn_ckpt_test";
    fs::create_directories(dir);
    const std::string path = (dir / "model.bhnc").string();

    Rng rng(5);
    std::vector<std::pair<std::string, Tensor>> params;
    Tensor w = Tensor::zeros({3, 4});
    for (auto& v : w.data) v = static_cast<float>(rng.uniform(-2, 2));
    params.emplace_back("unit0.enc.h.w", w);
    params.emplace_back("att.log_tau", Tensor::scalar(0.25f));
    save_checkpoint(path, params);

    auto loaded = load_checkpoint(path);
    REQUIRE(loaded.size() == 2);
    CHECK(loaded[0].first == "unit0.enc.h.w");
    CHECK(loaded[0].second.shape == Shape{3, 4});
    CHECK(loaded[0].second.data == w.data);
    CHECK(loaded[1].second.data[0] == 0.25f);

    // header fields
    std::ifstream is(path, std::ios::binary);
    char head[12];
    is.read(head, 12);
    CHECK(std::string(head, 4) == "BHNC");
    CHECK(static_cast<unsigned char>(head[4]) == 1);  // version u32 LE
    CHECK(static_cast<unsigned char>(head[8]) == 2);  // count u32 LE

    // truncation
    {
        std::ifstream in(path, std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
        std::ofstream out((dir / "trunc.bhnc").string(), std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 7));
    }
    CHECK_THROWS_WITH_AS(load_checkpoint((dir / "trunc.bhnc").string()),
                         doctest::Contains("truncated"), Error);

    // bad magic
    {
        std::ofstream out((dir / "bad.bhnc").string(), std::ios::binary);
        out.write("NOPE\x01\x00\x00\x00", 8);
    }
    CHECK_THROWS_WITH_AS(load_checkpoint((dir / "bad.bhnc").string()),
                         doctest::Contains("magic"), Error);
}
