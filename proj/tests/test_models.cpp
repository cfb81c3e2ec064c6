#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "ddlab/datasets.hpp"
#include "ddlab/models.hpp"
#include "fd.hpp"

using ddlab::ImageBatch;
using ddlab::ModelFamily;
using ddlab::ModelParams;
using ddlab::ModelSpec;
using ddlab::Tensor;
using ddlab::TrainConfig;

namespace {

ModelSpec tiny_convnet() {
    ModelSpec spec;
    spec.family = ModelFamily::ConvNet;
    spec.conv_blocks = 2;
    spec.width = 4;
    spec.fc_layers = 2;
    spec.in_h = 8;
    spec.in_w = 8;
    spec.in_c = 1;
    spec.num_classes = 3;
    spec.seed = 5;
    return spec;
}

ModelSpec tiny_mlp(int in_dim = 9, int width = 6, int classes = 3) {
    ModelSpec spec;
    spec.family = ModelFamily::Mlp;
    spec.width = width;
    spec.fc_layers = 2;
    spec.in_h = in_dim;
    spec.in_w = 1;
    spec.in_c = 1;
    spec.num_classes = classes;
    spec.seed = 5;
    return spec;
}

Tensor random_images(int n, int per_image, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
    Tensor t({n, per_image});
    ddlab::Rng rng(seed);
    for (double& v : t.vec()) v = rng.uniform(lo, hi);
    return t;
}

std::vector<int> cycle_labels(int n, int k) {
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i % k;
    return labels;
}

void zero_params(ModelParams& p) {
    for (auto& layer : p.layers) {
        layer.w.fill(0.0);
        layer.b.fill(0.0);
    }
}

}  // namespace

TEST_CASE("init_params is deterministic with zero biases and the stated bound") {
    ModelSpec spec = tiny_convnet();
    spec.in_c = 6;  // first conv fan-in = 9*6 = 54
    const ModelParams a = ddlab::init_params(spec);
    const ModelParams b = ddlab::init_params(spec);
    REQUIRE(a.flattened() == b.flattened());

    for (const auto& layer : a.layers)
        for (double v : layer.b.vec()) REQUIRE(v == 0.0);

    const double bound = std::sqrt(6.0 / 54.0);
    REQUIRE(bound == Catch::Approx(0.3333).margin(5e-4));
    double max_abs = 0.0;
    for (double v : a.layers[0].w.vec()) {
        REQUIRE(std::abs(v) <= bound);
        max_abs = std::max(max_abs, std::abs(v));
    }
    REQUIRE(max_abs > 0.9 * bound);  // draws actually fill the interval
}

TEST_CASE("zero-weight network emits all-zero logits") {
    const ModelSpec spec = tiny_convnet();
    ModelParams p = ddlab::init_params(spec);
    zero_params(p);
    const Tensor logits = ddlab::forward(spec, p, random_images(4, 64, 1));
    for (double v : logits.vec()) REQUIRE(v == 0.0);
}

TEST_CASE("forward is batch independent") {
    const ModelSpec spec = tiny_convnet();
    const ModelParams p = ddlab::init_params(spec);
    const Tensor two = random_images(2, 64, 2);
    Tensor one({1, 64});
    std::copy(two.data(), two.data() + 64, one.data());
    const Tensor l2 = ddlab::forward(spec, p, two);
    const Tensor l1 = ddlab::forward(spec, p, one);
    for (int k = 0; k < 3; ++k) REQUIRE(l1.at(0, k) == l2.at(0, k));
}

TEST_CASE("hand-set linear layer reproduces the matrix product") {
    ModelSpec spec = tiny_mlp(3, 3, 3);
    ModelParams p = ddlab::init_params(spec);
    // first layer = identity, so the hidden activation equals the input
    p.layers[0].w = Tensor({3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
    p.layers[0].b.fill(0.0);
    p.layers[1].w = Tensor({3, 3}, std::vector<double>{0.5, -1.0, 2.0,
                                                       1.5, 0.25, -0.5,
                                                       -2.0, 1.0, 0.75});
    p.layers[1].b = Tensor({3}, std::vector<double>{0.1, -0.2, 0.3});

    const Tensor x({1, 3}, std::vector<double>{0.2, 0.4, 0.6});
    const Tensor logits = ddlab::forward(spec, p, x);
    // hand computation: x.W2 + b2
    REQUIRE(logits.at(0, 0) == Catch::Approx(0.2 * 0.5 + 0.4 * 1.5 + 0.6 * -2.0 + 0.1));
    REQUIRE(logits.at(0, 1) == Catch::Approx(0.2 * -1.0 + 0.4 * 0.25 + 0.6 * 1.0 + -0.2));
    REQUIRE(logits.at(0, 2) == Catch::Approx(0.2 * 2.0 + 0.4 * -0.5 + 0.6 * 0.75 + 0.3));
}

TEST_CASE("penultimate equals the relu of the last hidden pre-activation") {
    ModelSpec spec = tiny_mlp(4, 4, 2);
    ModelParams p = ddlab::init_params(spec);
    p.layers[0].w = Tensor({4, 4});
    for (int i = 0; i < 4; ++i) p.layers[0].w.at(i, i) = 1.0;  // identity
    p.layers[0].b.fill(0.0);

    const Tensor x({1, 4}, std::vector<double>{0.3, -0.7, 0.0, 2.5});
    const Tensor penult = ddlab::penultimate(spec, p, x);
    REQUIRE(penult.at(0, 0) == 0.3);
    REQUIRE(penult.at(0, 1) == 0.0);  // clipped at zero
    REQUIRE(penult.at(0, 2) == 0.0);
    REQUIRE(penult.at(0, 3) == 2.5);
}

TEST_CASE("penultimate width matches the spec for both families") {
    const ModelSpec conv = tiny_convnet();
    const Tensor imgs = random_images(2, 64, 3);
    REQUIRE(ddlab::penultimate(conv, ddlab::init_params(conv), imgs).dim(1) ==
            conv.penultimate_width());

    const ModelSpec mlp = tiny_mlp(9, 6, 3);
    REQUIRE(ddlab::penultimate(mlp, ddlab::init_params(mlp), random_images(2, 9, 4)).dim(1) ==
            mlp.penultimate_width());

    ModelSpec single_fc = tiny_convnet();
    single_fc.fc_layers = 1;
    REQUIRE(single_fc.penultimate_width() == single_fc.flatten_dim());
    REQUIRE(ddlab::penultimate(single_fc, ddlab::init_params(single_fc), imgs).dim(1) ==
            single_fc.flatten_dim());
}

TEST_CASE("cross-entropy of uniform logits is ln K") {
    const Tensor logits({2, 10}, 0.7);  // any constant row is uniform
    REQUIRE(ddlab::loss_ce(logits, {3, 9}) == Catch::Approx(std::log(10.0)).epsilon(1e-12));
    REQUIRE(std::log(10.0) == Catch::Approx(2.3026).margin(5e-5));
}

TEST_CASE("cross-entropy decreases as the correct margin grows") {
    double prev = 1e300;
    for (double margin : {0.5, 1.0, 2.0, 4.0}) {
        const Tensor logits({1, 4}, std::vector<double>{margin, 0.0, 0.0, 0.0});
        const double loss = ddlab::loss_ce(logits, {0});
        REQUIRE(loss < prev);
        prev = loss;
    }
}

TEST_CASE("two-class cross-entropy matches softmax arithmetic") {
    const Tensor logits({1, 2}, std::vector<double>{1.0, 0.0});
    REQUIRE(ddlab::loss_ce(logits, {0}) == Catch::Approx(0.3133).margin(5e-5));
    REQUIRE(ddlab::loss_ce(logits, {0}) ==
            Catch::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-12));
}

TEST_CASE("sgd_train honors the step contract") {
    const ModelSpec spec = tiny_convnet();
    const ModelParams p0 = ddlab::init_params(spec);
    ImageBatch data{random_images(30, 64, 6), cycle_labels(30, 3)};

    SECTION("zero steps are forbidden") {
        TrainConfig cfg{0, 0.1, 8, 1};
        REQUIRE_THROWS_AS(ddlab::sgd_train(spec, p0, data, cfg), ddlab::ConfigError);
    }
    SECTION("one step with zero learning rate changes nothing") {
        TrainConfig cfg{1, 0.0, 8, 1};
        const ModelParams p1 = ddlab::sgd_train(spec, p0, data, cfg);
        REQUIRE(p1.flattened() == p0.flattened());
    }
    SECTION("fifty steps reduce the training loss") {
        TrainConfig cfg{50, 0.3, 30, 1};
        const double before = ddlab::loss_ce(ddlab::forward(spec, p0, data.images), data.labels);
        const ModelParams p1 = ddlab::sgd_train(spec, p0, data, cfg);
        const double after = ddlab::loss_ce(ddlab::forward(spec, p1, data.images), data.labels);
        REQUIRE(after < before);
    }
    SECTION("training is deterministic under a fixed seed") {
        TrainConfig cfg{10, 0.1, 8, 42};
        const ModelParams a = ddlab::sgd_train(spec, p0, data, cfg);
        const ModelParams b = ddlab::sgd_train(spec, p0, data, cfg);
        REQUIRE(a.flattened() == b.flattened());
    }
}

TEST_CASE("final-layer bias gradient at zero weights is the softmax-minus-onehot mean") {
    const ModelSpec spec = tiny_convnet();
    ModelParams p = ddlab::init_params(spec);
    zero_params(p);

    // unbalanced labels: bias gradient component k is 1/K - freq(k)
    ImageBatch data{random_images(8, 64, 7), {0, 0, 0, 0, 1, 1, 2, 2}};
    const ModelParams g = ddlab::grad_params(spec, p, data);
    const Tensor& bias_grad = g.layers.back().b;
    REQUIRE(bias_grad[0] == Catch::Approx(1.0 / 3.0 - 4.0 / 8.0).epsilon(1e-12));
    REQUIRE(bias_grad[1] == Catch::Approx(1.0 / 3.0 - 2.0 / 8.0).epsilon(1e-12));
    REQUIRE(bias_grad[2] == Catch::Approx(1.0 / 3.0 - 2.0 / 8.0).epsilon(1e-12));

    // balanced labels make it a stationary point of the final bias
    ImageBatch balanced{random_images(9, 64, 8), cycle_labels(9, 3)};
    const ModelParams gb = ddlab::grad_params(spec, p, balanced);
    for (double v : gb.layers.back().b.vec())
        REQUIRE_THAT(v, Catch::Matchers::WithinAbs(0.0, 1e-14));
}

TEST_CASE("parameter gradient matches central finite differences") {
    const ModelSpec spec = tiny_mlp(6, 5, 3);
    const ModelParams p = ddlab::init_params(spec);
    ImageBatch data{random_images(7, 6, 9), cycle_labels(7, 3)};
    const ModelParams g = ddlab::grad_params(spec, p, data);

    for (std::size_t layer = 0; layer < p.layers.size(); ++layer) {
        auto value = [&](const Tensor& w) {
            ModelParams q = p;
            q.layers[layer].w = w;
            return ddlab::loss_ce(ddlab::forward(spec, q, data.images), data.labels);
        };
        const double err = fd::max_rel_err(value, p.layers[layer].w, g.layers[layer].w,
                                           fd::spread_probes(p.layers[layer].w.size(), 10));
        REQUIRE(err < 1e-4);
    }
}

TEST_CASE("input gradient matches finite differences and scales linearly") {
    const ModelSpec spec = tiny_mlp(6, 5, 3);
    const ModelParams p = ddlab::init_params(spec);
    const Tensor images = random_images(4, 6, 10, 0.1, 0.9);
    const std::vector<int> labels = cycle_labels(4, 3);

    ddlab::InputScalarFn ce = [&labels](ddlab::Graph& g, ddlab::Graph::Id logits,
                                        ddlab::Graph::Id) {
        return ddlab::ce_loss_graph(g, logits, labels);
    };
    const Tensor g1 = ddlab::grad_wrt_input(spec, p, ce, images);

    auto value = [&](const Tensor& x) {
        return ddlab::loss_ce(ddlab::forward(spec, p, x), labels);
    };
    REQUIRE(fd::max_rel_err(value, images, g1, fd::spread_probes(images.size(), 10)) < 1e-4);

    ddlab::InputScalarFn scaled = [&labels](ddlab::Graph& g, ddlab::Graph::Id logits,
                                            ddlab::Graph::Id) {
        return g.scale(ddlab::ce_loss_graph(g, logits, labels), 3.0);
    };
    const Tensor g3 = ddlab::grad_wrt_input(spec, p, scaled, images);
    for (std::size_t i = 0; i < g1.size(); ++i)
        REQUIRE_THAT(g3[i], Catch::Matchers::WithinRel(3.0 * g1[i], 1e-12));
}

TEST_CASE("unrolled training gradient matches finite differences") {
    // <= 500 parameters, T recorded steps, as the differentiation contract demands
    const ModelSpec spec = tiny_mlp(6, 5, 3);  // 6*5+5 + 5*3+3 = 53 params
    const ModelParams theta0 = ddlab::init_params(spec);
    ImageBatch syn{random_images(6, 6, 11, 0.1, 0.9), cycle_labels(6, 3)};
    ImageBatch outer{random_images(9, 6, 12, 0.1, 0.9), cycle_labels(9, 3)};
    TrainConfig inner{3, 0.5, 6, 13};  // T = 3, full batch

    const ddlab::UnrolledResult res =
        ddlab::unrolled_outer_grad(spec, theta0, syn, inner, outer);

    // oracle: plain (non-differentiated) training at perturbed synthetic sets
    auto value = [&](const Tensor& x) {
        ImageBatch moved{x, syn.labels};
        const ModelParams trained = ddlab::sgd_train(spec, theta0, moved, inner);
        return ddlab::loss_ce(ddlab::forward(spec, trained, outer.images), outer.labels);
    };
    REQUIRE(value(syn.images) == Catch::Approx(res.outer_loss).epsilon(1e-12));
    const double err = fd::max_rel_err(value, syn.images, res.grad_images,
                                       fd::spread_probes(syn.images.size(), 12), 1e-5);
    REQUIRE(err < 1e-3);

    // theta_T must equal plain training on the same schedule
    const ModelParams plain = ddlab::sgd_train(spec, theta0, syn, inner);
    const auto a = plain.flattened();
    const auto b = res.theta_t.flattened();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        REQUIRE_THAT(b[i], Catch::Matchers::WithinAbs(a[i], 1e-12));
}

TEST_CASE("gradient-of-gradient matches finite differences") {
    const ModelSpec spec = tiny_mlp(6, 5, 3);
    const ModelParams theta = ddlab::init_params(spec);
    ImageBatch data{random_images(6, 6, 14, 0.1, 0.9), cycle_labels(6, 3)};

    // scalar: squared norm of all weight gradients
    ddlab::GradScalarFn sq_norm = [](ddlab::Graph& g,
                                     const std::vector<ddlab::Graph::Id>& wg,
                                     const std::vector<ddlab::Graph::Id>& bg) {
        ddlab::Graph::Id total = g.sum_all(g.mul(wg[0], wg[0]));
        for (std::size_t i = 1; i < wg.size(); ++i)
            total = g.add(total, g.sum_all(g.mul(wg[i], wg[i])));
        for (ddlab::Graph::Id b : bg) total = g.add(total, g.sum_all(g.mul(b, b)));
        return total;
    };
    const ddlab::GradOfGradResult res = ddlab::grad_of_param_grad(spec, theta, data, sq_norm);

    // oracle: evaluate the scalar via plain first-order gradients
    auto value = [&](const Tensor& x) {
        const ModelParams g = ddlab::grad_params(spec, theta, ImageBatch{x, data.labels});
        double s = 0.0;
        for (double v : g.flattened()) s += v * v;
        return s;
    };
    REQUIRE(value(data.images) == Catch::Approx(res.scalar).epsilon(1e-10));
    const double err = fd::max_rel_err(value, data.images, res.grad_images,
                                       fd::spread_probes(data.images.size(), 12), 1e-5);
    REQUIRE(err < 1e-3);
}

TEST_CASE("unrolled gradient through a convnet matches finite differences") {
    ModelSpec spec = tiny_convnet();
    spec.width = 2;  // 9*1*2+2 + ... keep under 500 params
    spec.fc_layers = 2;
    const ModelParams theta0 = ddlab::init_params(spec);
    REQUIRE(theta0.num_params() <= 500);

    ImageBatch syn{random_images(6, 64, 15, 0.1, 0.9), cycle_labels(6, 3)};
    ImageBatch outer{random_images(6, 64, 16, 0.1, 0.9), cycle_labels(6, 3)};
    TrainConfig inner{2, 0.5, 6, 17};

    const ddlab::UnrolledResult res =
        ddlab::unrolled_outer_grad(spec, theta0, syn, inner, outer);
    auto value = [&](const Tensor& x) {
        const ModelParams trained = ddlab::sgd_train(spec, theta0, ImageBatch{x, syn.labels}, inner);
        return ddlab::loss_ce(ddlab::forward(spec, trained, outer.images), outer.labels);
    };
    const double err = fd::max_rel_err(value, syn.images, res.grad_images,
                                       fd::spread_probes(syn.images.size(), 10), 1e-5);
    REQUIRE(err < 1e-3);
}

TEST_CASE("forward rejects mismatched input dims") {
    const ModelSpec spec = tiny_convnet();
    const ModelParams p = ddlab::init_params(spec);
    REQUIRE_THROWS_AS(ddlab::forward(spec, p, random_images(2, 63, 18)), ddlab::ContractError);
}

TEST_CASE("parameter checkpoints round-trip through MPR1") {
    const ModelSpec spec = tiny_convnet();
    const ModelParams p = ddlab::init_params(spec);
    const auto path = std::filesystem::temp_directory_path() / "ddlab_params.mpr";
    ddlab::save_params(p, path);
    const ModelParams loaded = ddlab::load_params(path);
    REQUIRE(loaded.flattened() == p.flattened());
    REQUIRE(loaded.layer_count() == p.layer_count());
}
