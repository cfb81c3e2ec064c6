#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ddlab/datasets.hpp"
#include "ddlab/models.hpp"

namespace ddlab {

enum class DistillAlgorithm { DD, DC };

inline const char* algorithm_name(DistillAlgorithm a) {
    return a == DistillAlgorithm::DD ? "DD" : "DC";
}

struct DistillConfig {
    DistillAlgorithm algorithm = DistillAlgorithm::DC;
    int images_per_class = 10;
    int outer_epochs = 100;
    TrainConfig inner;        // model update steps per outer epoch
    double image_lr = 0.1;    // learning rate for updating the synthetic images
    int data_batch = 256;     // original-data batch size (mixed for DD, per class for DC)
    bool dc_offline_theta = false;  // match real gradients at an offline-trained model
    std::uint64_t seed = 0;

    void validate() const {
        if (images_per_class < 1) throw ConfigError("distill: images_per_class must be >= 1");
        if (outer_epochs < 1) throw ConfigError("distill: outer_epochs must be >= 1");
        if (!(image_lr >= 0.0)) throw ConfigError("distill: image_lr must be >= 0");
        if (data_batch < 1) throw ConfigError("distill: data_batch must be >= 1");
        inner.validate();
    }
};

/// The synthetic dataset under optimization. Pixels may leave [0,1] while
/// training; they are clipped only on export.
struct DistilledDataset {
    Tensor images;            // [M, H, W, C] with M = ipc * K
    std::vector<int> labels;  // exactly ipc per class, grouped by class
    int num_classes = 0;
    int images_per_class = 0;
    std::string algorithm;
    std::string config_digest;
    int produced_epoch = 0;

    int size() const { return images.dim(0); }

    /// Rows holding class k: [k*ipc, (k+1)*ipc).
    std::pair<int, int> class_rows(int k) const {
        return {k * images_per_class, (k + 1) * images_per_class};
    }

    /// Clipped, float32-snapped copy suitable for training and for IDT export.
    LabeledImageSet to_image_set() const {
        LabeledImageSet set;
        set.images = images;
        set.images.clip(0.0, 1.0);
        set.images.snap_f32();
        set.labels = labels;
        set.num_classes = num_classes;
        return set;
    }
};

/// Called once per outer epoch with the epoch index, the freshly trained
/// model, and a mutable copy of the training set. Whatever the hook leaves
/// in the set is what this epoch's image update sees. The synthetic images
/// themselves are not exposed.
using EpochHook = std::function<void(int epoch, const ModelParams& theta, LabeledImageSet& data)>;

/// Per-output-node cosine distance between two parameter gradients, summed
/// over layers. Bias gradients carry no output-node structure and are
/// excluded. Zero vectors contribute 0 by convention.
inline double layerwise_grad_distance(const ModelParams& ga, const ModelParams& gb) {
    if (ga.layers.size() != gb.layers.size())
        throw ContractError("layerwise_grad_distance: layer count mismatch");
    double total = 0.0;
    for (std::size_t l = 0; l < ga.layers.size(); ++l) {
        const Tensor& a = ga.layers[l].w;
        const Tensor& b = gb.layers[l].w;
        if (!a.same_shape(b)) throw ContractError("layerwise_grad_distance: shape mismatch");
        const int in = a.dim(0), out = a.dim(1);
        for (int j = 0; j < out; ++j) {
            double dot = 0.0, na = 0.0, nb = 0.0;
            for (int i = 0; i < in; ++i) {
                const double va = a.at(i, j), vb = b.at(i, j);
                dot += va * vb;
                na += va * va;
                nb += vb * vb;
            }
            if (na == 0.0 || nb == 0.0) continue;
            // exact fast paths: identical or negated columns sum without
            // picking up square-root rounding
            if (dot == na && na == nb) continue;          // cosine exactly 1
            if (dot == -na && na == nb) total += 2.0;     // cosine exactly -1
            else total += 1.0 - dot / std::sqrt(na * nb);
        }
    }
    return total;
}

/// Number of output nodes the distance sums over (for exactness checks).
inline int layerwise_node_count(const ModelParams& p) {
    int n = 0;
    for (const Layer& l : p.layers) n += l.w.dim(1);
    return n;
}

namespace detail {

inline ImageBatch draw_batch(const LabeledImageSet& set, const std::vector<int>& pool,
                             int batch, std::uint64_t seed) {
    const std::size_t take = std::min<std::size_t>(pool.size(), static_cast<std::size_t>(batch));
    Rng rng(seed);
    auto picks = rng.sample_without_replacement(pool.size(), take);
    ImageBatch out;
    out.images = Tensor({static_cast<int>(take), set.height(), set.width(), set.channels()});
    out.labels.reserve(take);
    const std::size_t per = set.pixels_per_image();
    for (std::size_t i = 0; i < picks.size(); ++i) {
        const int src = pool[picks[i]];
        std::copy(set.image_data(src), set.image_data(src) + per,
                  out.images.data() + i * per);
        out.labels.push_back(set.labels[static_cast<std::size_t>(src)]);
    }
    return out;
}

inline std::vector<int> all_indices(int n) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    return idx;
}

/// Graph-side replica of layerwise_grad_distance over the synthetic
/// gradient nodes, against a fixed real gradient. A small epsilon guards
/// the division; columns that are exactly zero on either side are masked
/// out to honor the zero-vector convention.
inline Graph::Id distance_to_real_grads(Graph& g, const std::vector<Graph::Id>& syn_wgrads,
                                        const ModelParams& real_grads) {
    Graph::Id total = g.constant(Tensor::scalar(0.0));
    for (std::size_t l = 0; l < syn_wgrads.size(); ++l) {
        const Tensor& syn = g.value(syn_wgrads[l]);
        const Tensor& real = real_grads.layers[l].w;
        const int in = syn.dim(0), out = syn.dim(1);

        Tensor real_norm2({out});
        Tensor mask({out});
        for (int j = 0; j < out; ++j) {
            double nr = 0.0, ns = 0.0;
            for (int i = 0; i < in; ++i) {
                nr += real.at(i, j) * real.at(i, j);
                ns += syn.at(i, j) * syn.at(i, j);
            }
            real_norm2[static_cast<std::size_t>(j)] = nr;
            mask[static_cast<std::size_t>(j)] = (nr > 0.0 && ns > 0.0) ? 1.0 : 0.0;
        }

        Graph::Id gr = g.constant(real);
        Graph::Id dot = g.sum_axis0(g.mul(syn_wgrads[l], gr));                    // [out]
        Graph::Id ns2 = g.sum_axis0(g.mul(syn_wgrads[l], syn_wgrads[l]));         // [out]
        Graph::Id denom = g.sqrt(g.add_scalar(g.mul(ns2, g.constant(real_norm2)), 1e-20));
        Graph::Id cos = g.div(dot, denom);
        Graph::Id term = g.mul(g.constant(mask),
                               g.sub(g.constant(Tensor({out}, 1.0)), cos));
        total = g.add(total, g.sum_all(term));
    }
    return total;
}

}  // namespace detail

/// One DD image update: a gradient step on the synthetic images of the
/// outer loss l(batch, theta_T), differentiated through the recorded inner
/// training. Returns the update applied to `syn.images`.
inline void dd_update(DistilledDataset& syn, RecordedTraining& recorded,
                      const ImageBatch& outer_batch, double image_lr) {
    double loss = 0.0;
    Tensor grad = recorded_outer_grad(recorded, outer_batch, &loss);
    if (!std::isfinite(loss) || !grad.all_finite())
        throw DivergenceError("dd_update: non-finite outer gradient", syn.produced_epoch);
    for (std::size_t i = 0; i < syn.images.size(); ++i)
        syn.images[i] -= image_lr * grad.vec()[i];
}

/// One DC image update: per class, matches the parameter gradient of the
/// synthetic images against the gradient of a same-class real batch, and
/// takes a gradient step on the images through that matching loss. Classes
/// with no real samples this epoch are left untouched.
inline void dc_update(DistilledDataset& syn, const ModelSpec& spec, const ModelParams& theta_syn,
                      const ModelParams& theta_real, const LabeledImageSet& data,
                      int data_batch, double image_lr, std::uint64_t batch_seed) {
    Graph g;
    Graph::Id x = g.input(syn.images);
    std::vector<Graph::Id> w, b;
    w = params_as_inputs(g, theta_syn, b);

    Graph::Id total = g.constant(Tensor::scalar(0.0));
    bool any_class = false;
    for (int k = 0; k < syn.num_classes; ++k) {
        const auto pool = data.indices_of_class(k);
        if (pool.empty()) continue;
        any_class = true;
        ImageBatch real = detail::draw_batch(
            data, pool, data_batch, derive_seed(batch_seed, "dc-class", static_cast<std::uint64_t>(k)));
        const ModelParams real_grads = grad_params(spec, theta_real, real);

        auto [lo, hi] = syn.class_rows(k);
        auto rows = std::make_shared<std::vector<int>>();
        for (int r = lo; r < hi; ++r) rows->push_back(r);
        Graph::Id xk = g.gather_rows(x, std::shared_ptr<const std::vector<int>>(rows));
        ModelNodes m = build_model_graph(g, spec, w, b, xk, hi - lo);
        Graph::Id loss_k = ce_loss_graph(g, m.logits, std::vector<int>(static_cast<std::size_t>(hi - lo), k));

        std::vector<Graph::Id> wrt = w;
        wrt.insert(wrt.end(), b.begin(), b.end());
        auto grads = g.backward(loss_k, wrt);
        std::vector<Graph::Id> wg(grads.begin(), grads.begin() + static_cast<long>(w.size()));
        total = g.add(total, detail::distance_to_real_grads(g, wg, real_grads));
    }
    if (!any_class) return;

    auto gx = g.backward(total, {x});
    const Tensor& grad = g.value(gx[0]);
    if (!std::isfinite(g.value(total)[0]) || !grad.all_finite())
        throw DivergenceError("dc_update: non-finite matching gradient", syn.produced_epoch);
    for (std::size_t i = 0; i < syn.images.size(); ++i)
        syn.images[i] -= image_lr * grad.vec()[i];
}

/// The unified distillation loop. Per outer epoch: re-initialize theta,
/// train it on the synthetic set, hand the training data to the hook, then
/// update the synthetic images with the algorithm-specific rule.
inline DistilledDataset distill(const LabeledImageSet& train, const ModelSpec& spec,
                                const DistillConfig& cfg, const EpochHook& hook = {}) {
    cfg.validate();
    spec.validate();
    if (train.num_classes != spec.num_classes)
        throw ContractError("distill: dataset and model class counts differ");
    if (train.height() != spec.in_h || train.width() != spec.in_w ||
        train.channels() != spec.in_c)
        throw ContractError("distill: dataset dims do not match model spec");

    const int k_classes = spec.num_classes;
    const int ipc = cfg.images_per_class;
    const int m = k_classes * ipc;

    DistilledDataset syn;
    syn.num_classes = k_classes;
    syn.images_per_class = ipc;
    syn.algorithm = algorithm_name(cfg.algorithm);
    syn.images = Tensor({m, train.height(), train.width(), train.channels()});
    for (int k = 0; k < k_classes; ++k)
        for (int i = 0; i < ipc; ++i) syn.labels.push_back(k);

    // seeded normal init, affinely squashed into [0,1]
    {
        Rng rng(derive_seed(cfg.seed, "xtilde-init"));
        for (double& v : syn.images.vec()) v = rng.normal();
        const double lo = syn.images.min(), hi = syn.images.max();
        const double span = hi - lo > 1e-12 ? hi - lo : 1.0;
        for (double& v : syn.images.vec()) v = (v - lo) / span;
    }

    // offline-theta mode for the DC real side (kept off by default)
    std::optional<ModelParams> theta_offline;
    if (cfg.algorithm == DistillAlgorithm::DC && cfg.dc_offline_theta) {
        ModelSpec off_spec = spec;
        off_spec.seed = derive_seed(cfg.seed, "theta-offline");
        TrainConfig off_cfg = cfg.inner;
        off_cfg.seed = derive_seed(cfg.seed, "theta-offline-train");
        theta_offline = sgd_train(spec, init_params(off_spec), ImageBatch::from_set(train), off_cfg);
    }

    for (int epoch = 0; epoch < cfg.outer_epochs; ++epoch) {
        syn.produced_epoch = epoch;

        ModelSpec epoch_spec = spec;
        epoch_spec.seed = derive_seed(cfg.seed, "theta0", static_cast<std::uint64_t>(epoch));
        ModelParams theta0 = init_params(epoch_spec);
        TrainConfig inner = cfg.inner;
        inner.seed = derive_seed(cfg.seed, "inner", static_cast<std::uint64_t>(epoch));

        ImageBatch syn_batch{syn.images, syn.labels};
        std::optional<RecordedTraining> recorded;
        ModelParams theta_t;
        if (cfg.algorithm == DistillAlgorithm::DD) {
            recorded = record_training(spec, theta0, syn_batch, inner);
            theta_t = recorded->theta_t();
        } else {
            theta_t = sgd_train(spec, theta0, syn_batch, inner);
        }

        LabeledImageSet working;
        const LabeledImageSet* source = &train;
        if (hook) {
            working = train;
            hook(epoch, theta_t, working);
            if (working.num_classes != train.num_classes || working.size() < 1 ||
                working.height() != train.height() || working.width() != train.width() ||
                working.channels() != train.channels())
                throw ContractError("distill: hook changed the training set geometry");
            source = &working;
        }

        if (cfg.algorithm == DistillAlgorithm::DD) {
            ImageBatch outer = detail::draw_batch(
                *source, detail::all_indices(source->size()), cfg.data_batch,
                derive_seed(cfg.seed, "outer", static_cast<std::uint64_t>(epoch)));
            dd_update(syn, *recorded, outer, cfg.image_lr);
        } else {
            const ModelParams& theta_real = theta_offline ? *theta_offline : theta_t;
            dc_update(syn, spec, theta_t, theta_real, *source, cfg.data_batch, cfg.image_lr,
                      derive_seed(cfg.seed, "dc-batch", static_cast<std::uint64_t>(epoch)));
        }

        if (!syn.images.all_finite())
            throw DivergenceError("distill: non-finite synthetic images", epoch);
    }
    syn.produced_epoch = cfg.outer_epochs;
    return syn;
}

}  // namespace ddlab
