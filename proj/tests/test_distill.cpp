#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ddlab/datasets.hpp"
#include "ddlab/distill.hpp"
#include "ddlab/eval.hpp"
#include "fd.hpp"

using ddlab::DistillAlgorithm;
using ddlab::DistillConfig;
using ddlab::DistilledDataset;
using ddlab::ImageBatch;
using ddlab::LabeledImageSet;
using ddlab::ModelParams;
using ddlab::ModelSpec;
using ddlab::Tensor;

namespace {

ddlab::DatasetSpec toy_data_spec(int train = 400, int test = 120) {
    ddlab::DatasetSpec spec;
    spec.num_classes = 4;
    spec.height = 16;
    spec.width = 16;
    spec.channels = 1;
    spec.train_size = train;
    spec.test_size = test;
    spec.seed = 7;
    return spec;
}

ModelSpec toy_model_spec() {
    ModelSpec spec;
    spec.family = ddlab::ModelFamily::ConvNet;
    spec.conv_blocks = 2;
    spec.width = 8;
    spec.fc_layers = 2;
    spec.in_h = 16;
    spec.in_w = 16;
    spec.in_c = 1;
    spec.num_classes = 4;
    return spec;
}

DistillConfig quick_config(DistillAlgorithm alg, int epochs) {
    DistillConfig cfg;
    cfg.algorithm = alg;
    cfg.images_per_class = 2;
    cfg.outer_epochs = epochs;
    cfg.inner = ddlab::TrainConfig{4, 0.1, 64, 3};
    cfg.image_lr = alg == DistillAlgorithm::DD ? 0.01 : 0.1;
    cfg.data_batch = 64;
    cfg.seed = 11;
    return cfg;
}

ModelParams tiny_mlp_params(const ModelSpec& spec) { return ddlab::init_params(spec); }

ModelSpec tiny_mlp_spec() {
    ModelSpec spec;
    spec.family = ddlab::ModelFamily::Mlp;
    spec.width = 5;
    spec.fc_layers = 2;
    spec.in_h = 6;
    spec.in_w = 1;
    spec.in_c = 1;
    spec.num_classes = 3;
    spec.seed = 21;
    return spec;
}

Tensor random_images(int n, int d, std::uint64_t seed) {
    Tensor t({n, d});
    ddlab::Rng rng(seed);
    for (double& v : t.vec()) v = rng.uniform(0.05, 0.95);
    return t;
}

std::vector<int> cycle_labels(int n, int k) {
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i % k;
    return labels;
}

// Plain replica of the DC matching objective: per class, the cosine
// distance (with the update's epsilon and zero-column mask) between the
// synthetic gradient and a fixed real gradient. Built on grad_params only,
// independent of the double-backprop path under test.
double dc_objective(const ModelSpec& spec, const ModelParams& theta, const Tensor& syn_images,
                    const std::vector<int>& syn_labels, int num_classes, int ipc,
                    const std::vector<ModelParams>& real_grads) {
    double total = 0.0;
    const int d = static_cast<int>(syn_images.size()) / syn_images.dim(0);
    for (int k = 0; k < num_classes; ++k) {
        Tensor class_imgs({ipc, d});
        for (int i = 0; i < ipc; ++i) {
            const double* src = syn_images.data() + static_cast<std::size_t>(k * ipc + i) * d;
            std::copy(src, src + d, class_imgs.data() + static_cast<std::size_t>(i) * d);
        }
        const ModelParams syn_grad =
            ddlab::grad_params(spec, theta, ImageBatch{class_imgs, std::vector<int>(static_cast<std::size_t>(ipc), k)});
        for (std::size_t l = 0; l < syn_grad.layers.size(); ++l) {
            const Tensor& a = syn_grad.layers[l].w;
            const Tensor& b = real_grads[static_cast<std::size_t>(k)].layers[l].w;
            for (int j = 0; j < a.dim(1); ++j) {
                double dot = 0.0, na = 0.0, nb = 0.0;
                for (int i = 0; i < a.dim(0); ++i) {
                    dot += a.at(i, j) * b.at(i, j);
                    na += a.at(i, j) * a.at(i, j);
                    nb += b.at(i, j) * b.at(i, j);
                }
                if (na == 0.0 || nb == 0.0) continue;
                total += 1.0 - dot / std::sqrt(na * nb + 1e-20);
            }
        }
    }
    return total;
}

}  // namespace

TEST_CASE("zero image learning rate freezes the synthetic set") {
    auto [train, test] = ddlab::generate_synthetic(toy_data_spec());
    const ModelSpec spec = toy_model_spec();

    for (auto alg : {DistillAlgorithm::DD, DistillAlgorithm::DC}) {
        DistillConfig cfg = quick_config(alg, 1);
        cfg.image_lr = 0.0;
        const DistilledDataset one = ddlab::distill(train, spec, cfg);
        cfg.outer_epochs = 2;
        const DistilledDataset two = ddlab::distill(train, spec, cfg);
        REQUIRE(one.images == two.images);  // both equal the seeded initialization
        REQUIRE(one.images.min() >= 0.0);
        REQUIRE(one.images.max() <= 1.0);

        cfg.outer_epochs = 1;
        cfg.image_lr = 0.05;
        const DistilledDataset moved = ddlab::distill(train, spec, cfg);
        REQUIRE(moved.images != one.images);
    }
}

TEST_CASE("identity hook reproduces the hookless run") {
    auto [train, test] = ddlab::generate_synthetic(toy_data_spec());
    const ModelSpec spec = toy_model_spec();
    const DistillConfig cfg = quick_config(DistillAlgorithm::DC, 3);

    const DistilledDataset plain = ddlab::distill(train, spec, cfg);
    const DistilledDataset hooked = ddlab::distill(
        train, spec, cfg, [](int, const ModelParams&, LabeledImageSet&) {});
    REQUIRE(plain.images == hooked.images);
}

TEST_CASE("distillation is deterministic end to end") {
    auto [train, test] = ddlab::generate_synthetic(toy_data_spec());
    const ModelSpec spec = toy_model_spec();
    for (auto alg : {DistillAlgorithm::DD, DistillAlgorithm::DC}) {
        const DistillConfig cfg = quick_config(alg, 3);
        const DistilledDataset a = ddlab::distill(train, spec, cfg);
        const DistilledDataset b = ddlab::distill(train, spec, cfg);
        REQUIRE(a.images == b.images);
        REQUIRE(a.labels == b.labels);
    }
}

TEST_CASE("labels stay balanced and grouped through distillation") {
    auto [train, test] = ddlab::generate_synthetic(toy_data_spec());
    const ModelSpec spec = toy_model_spec();
    DistillConfig cfg = quick_config(DistillAlgorithm::DC, 4);
    cfg.images_per_class = 3;
    const DistilledDataset syn = ddlab::distill(train, spec, cfg);
    REQUIRE(syn.size() == 12);
    for (int k = 0; k < 4; ++k) {
        auto [lo, hi] = syn.class_rows(k);
        for (int r = lo; r < hi; ++r) REQUIRE(syn.labels[static_cast<std::size_t>(r)] == k);
    }
}

TEST_CASE("distill rejects mismatched class counts") {
    auto [train, test] = ddlab::generate_synthetic(toy_data_spec());
    ModelSpec spec = toy_model_spec();
    spec.num_classes = 5;
    REQUIRE_THROWS_AS(ddlab::distill(train, spec, quick_config(DistillAlgorithm::DC, 1)),
                      ddlab::ContractError);
}

TEST_CASE("absurd image learning rate raises a divergence error naming the epoch") {
    auto [train, test] = ddlab::generate_synthetic(toy_data_spec());
    const ModelSpec spec = toy_model_spec();
    DistillConfig cfg = quick_config(DistillAlgorithm::DD, 3);
    cfg.image_lr = 1e280;
    try {
        ddlab::distill(train, spec, cfg);
        // a single huge step may survive one epoch; it must blow up within the run
        FAIL("expected DivergenceError");
    } catch (const ddlab::DivergenceError& e) {
        REQUIRE(e.step >= 0);
        REQUIRE(e.step < 3);
    }
}

TEST_CASE("dd_update follows its gradient and scales linearly in the step size") {
    const ModelSpec spec = tiny_mlp_spec();
    const ModelParams theta0 = tiny_mlp_params(spec);
    ImageBatch outer{random_images(8, 6, 31), cycle_labels(8, 3)};

    DistilledDataset syn;
    syn.num_classes = 3;
    syn.images_per_class = 2;
    syn.images = random_images(6, 6, 32);
    syn.labels = {0, 0, 1, 1, 2, 2};

    ddlab::TrainConfig inner{2, 0.4, 6, 33};

    // eta = 0 leaves the images untouched
    {
        DistilledDataset a = syn;
        auto rec = ddlab::record_training(spec, theta0, ImageBatch{a.images, a.labels}, inner);
        ddlab::dd_update(a, rec, outer, 0.0);
        REQUIRE(a.images == syn.images);
    }

    // the applied update is exactly -eta * gradient; doubling eta doubles it
    DistilledDataset a = syn, b = syn;
    auto rec_a = ddlab::record_training(spec, theta0, ImageBatch{a.images, a.labels}, inner);
    ddlab::dd_update(a, rec_a, outer, 0.01);
    auto rec_b = ddlab::record_training(spec, theta0, ImageBatch{b.images, b.labels}, inner);
    ddlab::dd_update(b, rec_b, outer, 0.02);
    for (std::size_t i = 0; i < syn.images.size(); ++i) {
        const double da = a.images[i] - syn.images[i];
        const double db = b.images[i] - syn.images[i];
        REQUIRE_THAT(db, Catch::Matchers::WithinAbs(2.0 * da, 1e-12));
    }

    // gradient check against the plain-training oracle, T = 2, 53 params
    auto value = [&](const Tensor& x) {
        const ModelParams trained =
            ddlab::sgd_train(spec, theta0, ImageBatch{x, syn.labels}, inner);
        return ddlab::loss_ce(ddlab::forward(spec, trained, outer.images), outer.labels);
    };
    Tensor grad(syn.images.shape());
    for (std::size_t i = 0; i < grad.size(); ++i)
        grad[i] = (syn.images[i] - a.images[i]) / 0.01;
    const double err =
        fd::max_rel_err(value, syn.images, grad, fd::spread_probes(syn.images.size(), 12), 1e-5);
    REQUIRE(err < 1e-3);
}

TEST_CASE("dc_update stands still when synthetic gradients already match") {
    const ModelSpec spec = tiny_mlp_spec();
    const ModelParams theta = tiny_mlp_params(spec);

    DistilledDataset syn;
    syn.num_classes = 3;
    syn.images_per_class = 2;
    syn.images = random_images(6, 6, 41);
    syn.images.snap_f32();
    syn.labels = {0, 0, 1, 1, 2, 2};

    // real data = the synthetic images themselves -> per-class gradients match
    LabeledImageSet real;
    real.num_classes = 3;
    real.images = syn.images.reshaped({6, 6, 1, 1});
    real.labels = syn.labels;

    ModelSpec imgspec = spec;  // model sees [6] pixels per image either way
    DistilledDataset moved = syn;
    ddlab::dc_update(moved, imgspec, theta, theta, real, 2, 0.5, 77);

    double max_shift = 0.0;
    for (std::size_t i = 0; i < syn.images.size(); ++i)
        max_shift = std::max(max_shift, std::abs(moved.images[i] - syn.images[i]));
    REQUIRE(max_shift < 1e-9);
}

TEST_CASE("dc matching gradient matches finite differences") {
    const ModelSpec spec = tiny_mlp_spec();
    const ModelParams theta = tiny_mlp_params(spec);
    const int ipc = 2, classes = 3;

    DistilledDataset syn;
    syn.num_classes = classes;
    syn.images_per_class = ipc;
    syn.images = random_images(6, 6, 51);
    syn.labels = {0, 0, 1, 1, 2, 2};

    LabeledImageSet real;
    real.num_classes = classes;
    real.images = random_images(12, 6, 52).reshaped({12, 6, 1, 1});
    real.labels = cycle_labels(12, classes);

    // fix the real batches: batch size >= class size means take-all, so the
    // plain replica sees exactly the same real gradients
    std::vector<ModelParams> real_grads;
    for (int k = 0; k < classes; ++k) {
        auto pool = real.indices_of_class(k);
        Tensor imgs({static_cast<int>(pool.size()), 6});
        std::vector<int> lbl;
        for (std::size_t i = 0; i < pool.size(); ++i) {
            const double* src = real.image_data(pool[i]);
            std::copy(src, src + 6, imgs.data() + i * 6);
            lbl.push_back(k);
        }
        real_grads.push_back(ddlab::grad_params(spec, theta, ImageBatch{imgs, lbl}));
    }

    DistilledDataset moved = syn;
    const double eta = 0.01;
    ddlab::dc_update(moved, spec, theta, theta, real, 64, eta, 99);
    Tensor grad(syn.images.shape());
    for (std::size_t i = 0; i < grad.size(); ++i)
        grad[i] = (syn.images[i] - moved.images[i]) / eta;

    auto value = [&](const Tensor& x) {
        return dc_objective(spec, theta, x, syn.labels, classes, ipc, real_grads);
    };
    const double err =
        fd::max_rel_err(value, syn.images, grad, fd::spread_probes(syn.images.size(), 12), 1e-5);
    REQUIRE(err < 1e-3);

    // eta = 0 is the identity
    DistilledDataset frozen = syn;
    ddlab::dc_update(frozen, spec, theta, theta, real, 64, 0.0, 99);
    REQUIRE(frozen.images == syn.images);
}

TEST_CASE("layerwise gradient distance honors its exact values") {
    const ModelSpec spec = tiny_mlp_spec();
    const ModelParams g = ddlab::grad_params(
        spec, tiny_mlp_params(spec), ImageBatch{random_images(6, 6, 61), cycle_labels(6, 3)});

    SECTION("identical nonzero gradients give zero") {
        REQUIRE(ddlab::layerwise_grad_distance(g, g) == 0.0);
    }
    SECTION("negated gradients give two per output node") {
        // build a gradient-shaped value with every column nonzero so no
        // node falls under the zero-vector convention
        ModelParams dense = g;
        ddlab::Rng rng(63);
        for (auto& l : dense.layers)
            for (double& v : l.w.vec()) v = rng.uniform(0.1, 1.0);
        ModelParams neg = dense;
        for (auto& l : neg.layers)
            for (double& v : l.w.vec()) v = -v;
        const int nodes = ddlab::layerwise_node_count(dense);
        REQUIRE(ddlab::layerwise_grad_distance(dense, neg) == 2.0 * nodes);
    }
    SECTION("hand-built orthogonal two-node layer gives exactly two") {
        ModelParams a, b;
        ddlab::Layer la, lb;
        la.w = Tensor({2, 2}, std::vector<double>{1, 0, 0, 1});  // columns (1,0) and (0,1)
        lb.w = Tensor({2, 2}, std::vector<double>{0, 1, 1, 0});  // columns (0,1) and (1,0)
        la.b = Tensor({2});
        lb.b = Tensor({2});
        a.layers.push_back(la);
        b.layers.push_back(lb);
        REQUIRE(ddlab::layerwise_grad_distance(a, b) == 2.0);
    }
    SECTION("zero vectors contribute nothing") {
        ModelParams zero = g;
        for (auto& l : zero.layers) l.w.fill(0.0);
        REQUIRE(ddlab::layerwise_grad_distance(g, zero) == 0.0);
    }
    SECTION("symmetry") {
        ModelParams other = ddlab::grad_params(
            spec, tiny_mlp_params(spec), ImageBatch{random_images(6, 6, 62), cycle_labels(6, 3)});
        REQUIRE(ddlab::layerwise_grad_distance(g, other) ==
                Catch::Approx(ddlab::layerwise_grad_distance(other, g)).epsilon(1e-12));
    }
    SECTION("shape mismatch is a contract error") {
        ModelParams other;
        ddlab::Layer l;
        l.w = Tensor({3, 3});
        l.b = Tensor({3});
        other.layers.push_back(l);
        REQUIRE_THROWS_AS(ddlab::layerwise_grad_distance(g, other), ddlab::ContractError);
    }
}

TEST_CASE("DD distillation beats chance on the toy set", "[slow]") {
    ddlab::DatasetSpec dspec = toy_data_spec(800, 200);
    auto [train, test] = ddlab::generate_synthetic(dspec);
    const ModelSpec spec = toy_model_spec();

    DistillConfig cfg;
    cfg.algorithm = DistillAlgorithm::DD;
    cfg.images_per_class = 10;
    cfg.outer_epochs = 100;
    cfg.inner = ddlab::TrainConfig{8, 0.1, 64, 3};
    cfg.image_lr = 5.0;  // plain-SGD image steps need to be large at this scale
    cfg.data_batch = 256;
    cfg.seed = 13;
    const DistilledDataset syn = ddlab::distill(train, spec, cfg);

    ddlab::EvalConfig ecfg;
    ecfg.model = spec;
    ecfg.epochs = 150;
    ecfg.learning_rate = 0.05;
    ecfg.repeats = 1;
    ecfg.seed = 5;
    const ModelParams downstream = ddlab::train_downstream(
        syn.to_image_set(), ecfg, ddlab::derive_seed(ecfg.seed, "run", 0));
    const double cta = ddlab::compute_cta(spec, downstream, test);
    REQUIRE(cta >= 0.25 + 0.4);  // chance is 0.25 on four balanced classes
}
