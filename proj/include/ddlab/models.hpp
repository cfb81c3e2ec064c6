#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ddlab/datasets.hpp"
#include "ddlab/graph.hpp"
#include "ddlab/rng.hpp"
#include "ddlab/tensor.hpp"

namespace ddlab {

enum class ModelFamily { ConvNet, Mlp };

/// Architecture description. No normalization layers anywhere: the
/// distillation updates differentiate through training steps, and batch
/// statistics would break that.
struct ModelSpec {
    ModelFamily family = ModelFamily::ConvNet;
    int conv_blocks = 2;  // convnet only: [3x3 conv, ReLU, 2x2 avg-pool] blocks
    int width = 8;        // conv channels per layer / hidden units
    int fc_layers = 2;    // fully connected layers, final one included
    int in_h = 16;
    int in_w = 16;
    int in_c = 1;
    int num_classes = 4;
    std::uint64_t seed = 0;

    void validate() const {
        if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
        if (width < 1) throw ConfigError("model: width must be >= 1");
        if (fc_layers < 1) throw ConfigError("model: fc_layers must be >= 1");
        if (in_h < 1 || in_w < 1 || in_c < 1) throw ConfigError("model: bad input dims");
        if (family == ModelFamily::ConvNet) {
            if (conv_blocks < 1) throw ConfigError("model: conv_blocks must be >= 1");
            int h = in_h, w = in_w;
            for (int b = 0; b < conv_blocks; ++b) {
                if (h % 2 != 0 || w % 2 != 0)
                    throw ConfigError("model: input dims must halve through every conv block");
                h /= 2;
                w /= 2;
            }
        } else {
            if (fc_layers < 2)
                throw ConfigError("model: mlp needs fc_layers >= 2 so a penultimate layer exists");
        }
    }

    int flatten_dim() const {
        if (family == ModelFamily::Mlp) return in_h * in_w * in_c;
        const int shrink = 1 << conv_blocks;
        return (in_h / shrink) * (in_w / shrink) * width;
    }

    /// Width of the layer feeding the final classifier.
    int penultimate_width() const {
        if (fc_layers >= 2) return width;
        return flatten_dim();  // convnet with a single fc: the pooled features
    }
};

/// One dense or convolutional layer. Conv weights are stored [9*c_in, c_out]
/// to pair with 3x3 im2col patches; dense weights are [in, out].
struct Layer {
    Tensor w;
    Tensor b;
    bool is_conv = false;
};

struct ModelParams {
    std::vector<Layer> layers;

    int layer_count() const { return static_cast<int>(layers.size()); }

    std::size_t num_params() const {
        std::size_t n = 0;
        for (const Layer& l : layers) n += l.w.size() + l.b.size();
        return n;
    }

    /// All parameters as one flat vector, weights then bias per layer.
    std::vector<double> flattened() const {
        std::vector<double> out;
        out.reserve(num_params());
        for (const Layer& l : layers) {
            out.insert(out.end(), l.w.vec().begin(), l.w.vec().end());
            out.insert(out.end(), l.b.vec().begin(), l.b.vec().end());
        }
        return out;
    }

    bool all_finite() const {
        for (const Layer& l : layers)
            if (!l.w.all_finite() || !l.b.all_finite()) return false;
        return true;
    }
};

struct TrainConfig {
    int steps = 1;
    double learning_rate = 0.01;
    int batch_size = 64;
    std::uint64_t seed = 0;

    void validate() const {
        if (steps < 1) throw ConfigError("train: steps must be >= 1");
        if (!(learning_rate >= 0.0)) throw ConfigError("train: learning rate must be >= 0");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    }
};

/// Images plus labels without the [0,1] pixel constraint; distillation-time
/// synthetic images run outside that range.
struct ImageBatch {
    Tensor images;  // [N, ...] row-major, one image per row
    std::vector<int> labels;

    int size() const { return images.rank() >= 1 ? images.dim(0) : 0; }

    static ImageBatch from_set(const LabeledImageSet& set) {
        return ImageBatch{set.images, set.labels};
    }
};

namespace detail {

inline std::vector<std::pair<int, int>> layer_dims(const ModelSpec& spec) {
    // (fan_in, fan_out) per layer, conv layers first
    std::vector<std::pair<int, int>> dims;
    if (spec.family == ModelFamily::ConvNet) {
        int c = spec.in_c;
        for (int b = 0; b < spec.conv_blocks; ++b) {
            dims.push_back({9 * c, spec.width});
            c = spec.width;
        }
    }
    int in = spec.flatten_dim();
    for (int f = 0; f < spec.fc_layers - 1; ++f) {
        dims.push_back({in, spec.width});
        in = spec.width;
    }
    dims.push_back({in, spec.num_classes});
    return dims;
}

inline int conv_layer_count(const ModelSpec& spec) {
    return spec.family == ModelFamily::ConvNet ? spec.conv_blocks : 0;
}

}  // namespace detail

/// Seeded uniform initialization: weights in [-a, a] with a = sqrt(6/fan_in),
/// biases zero.
inline ModelParams init_params(const ModelSpec& spec) {
    spec.validate();
    ModelParams params;
    const auto dims = detail::layer_dims(spec);
    const int convs = detail::conv_layer_count(spec);
    for (std::size_t i = 0; i < dims.size(); ++i) {
        const auto [fan_in, fan_out] = dims[i];
        Layer layer;
        layer.is_conv = static_cast<int>(i) < convs;
        layer.w = Tensor({fan_in, fan_out});
        layer.b = Tensor({fan_out});
        const double bound = std::sqrt(6.0 / fan_in);
        Rng rng(derive_seed(spec.seed, "init", i));
        for (double& v : layer.w.vec()) v = rng.uniform(-bound, bound);
        params.layers.push_back(std::move(layer));
    }
    return params;
}

/// Model wired into a graph. Parameters may be leaf inputs, constants, or
/// nodes computed by earlier graph operations (unrolled training steps).
struct ModelNodes {
    std::vector<Graph::Id> weights;
    std::vector<Graph::Id> biases;
    Graph::Id penultimate = -1;
    Graph::Id logits = -1;
};

inline ModelNodes build_model_graph(Graph& g, const ModelSpec& spec,
                                    const std::vector<Graph::Id>& weights,
                                    const std::vector<Graph::Id>& biases, Graph::Id images,
                                    int batch) {
    ModelNodes m;
    m.weights = weights;
    m.biases = biases;

    Graph::Id x = images;
    std::size_t li = 0;
    if (spec.family == ModelFamily::ConvNet) {
        int h = spec.in_h, w = spec.in_w, c = spec.in_c;
        for (int blk = 0; blk < spec.conv_blocks; ++blk, ++li) {
            Graph::ImageDims d{batch, h, w, c};
            Graph::Id cols = g.im2col3(x, d);                       // [n*h*w, 9c]
            Graph::Id lin = g.matmul(cols, weights[li]);            // [n*h*w, width]
            lin = g.add(lin, g.broadcast_row(biases[li], batch * h * w));
            // explicit reshape so pooling adjoints mirror the forward shapes
            Graph::Id act = g.reshape(g.relu(lin), {batch, h, w, spec.width});
            x = g.avgpool2(act, Graph::ImageDims{batch, h, w, spec.width});
            h /= 2;
            w /= 2;
            c = spec.width;
        }
    }
    x = g.reshape(x, {batch, spec.flatten_dim()});
    for (int f = 0; f < spec.fc_layers - 1; ++f, ++li) {
        Graph::Id lin = g.add(g.matmul(x, weights[li]), g.broadcast_row(biases[li], batch));
        x = g.relu(lin);
    }
    m.penultimate = x;
    m.logits = g.add(g.matmul(x, weights[li]), g.broadcast_row(biases[li], batch));
    return m;
}

inline std::vector<Graph::Id> params_as_inputs(Graph& g, const ModelParams& p,
                                               std::vector<Graph::Id>& biases_out) {
    std::vector<Graph::Id> weights;
    for (const Layer& l : p.layers) {
        weights.push_back(g.input(l.w));
        biases_out.push_back(g.input(l.b));
    }
    return weights;
}

inline std::vector<Graph::Id> params_as_constants(Graph& g, const ModelParams& p,
                                                  std::vector<Graph::Id>& biases_out) {
    std::vector<Graph::Id> weights;
    for (const Layer& l : p.layers) {
        weights.push_back(g.constant(l.w));
        biases_out.push_back(g.constant(l.b));
    }
    return weights;
}

/// Mean cross-entropy over the batch, built on the graph.
inline Graph::Id ce_loss_graph(Graph& g, Graph::Id logits, const std::vector<int>& labels) {
    const int n = g.value(logits).dim(0);
    const int k = g.value(logits).dim(1);
    auto lbl = std::make_shared<const std::vector<int>>(labels);
    Graph::Id shift = g.rowmax_const(logits);                              // [n]
    Graph::Id centered = g.sub(logits, g.broadcast_col(shift, k));         // [n,k]
    Graph::Id lse = g.add(g.log(g.sum_cols(g.exp(centered))), shift);      // [n]
    Graph::Id picked = g.select_labels(logits, lbl);                       // [n]
    return g.scale(g.sum_all(g.sub(lse, picked)), 1.0 / n);
}

inline void check_input_dims(const ModelSpec& spec, const Tensor& images, const char* what) {
    const std::size_t per =
        static_cast<std::size_t>(spec.in_h) * spec.in_w * spec.in_c;
    if (images.rank() < 1 || images.size() != static_cast<std::size_t>(images.dim(0)) * per)
        throw ContractError(std::string(what) + ": image dims do not match model spec");
}

/// Logits for a batch, [N, K].
inline Tensor forward(const ModelSpec& spec, const ModelParams& params, const Tensor& images) {
    check_input_dims(spec, images, "forward");
    Graph g;
    std::vector<Graph::Id> biases;
    auto weights = params_as_constants(g, params, biases);
    Graph::Id x = g.constant(images);
    ModelNodes m = build_model_graph(g, spec, weights, biases, x, images.dim(0));
    return g.value(m.logits);
}

/// Activations of the layer before the final classifier, [N, P].
inline Tensor penultimate(const ModelSpec& spec, const ModelParams& params, const Tensor& images) {
    check_input_dims(spec, images, "penultimate");
    Graph g;
    std::vector<Graph::Id> biases;
    auto weights = params_as_constants(g, params, biases);
    Graph::Id x = g.constant(images);
    ModelNodes m = build_model_graph(g, spec, weights, biases, x, images.dim(0));
    return g.value(m.penultimate);
}

/// Mean cross-entropy of logits against integer labels.
inline double loss_ce(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2 || logits.dim(0) != static_cast<int>(labels.size()))
        throw ContractError("loss_ce: logits/labels mismatch");
    const int n = logits.dim(0), k = logits.dim(1);
    double total = 0.0;
    for (int r = 0; r < n; ++r) {
        double mx = logits.at(r, 0);
        for (int c = 1; c < k; ++c) mx = std::max(mx, logits.at(r, c));
        double sum = 0.0;
        for (int c = 0; c < k; ++c) sum += std::exp(logits.at(r, c) - mx);
        total += std::log(sum) + mx - logits.at(r, static_cast<int>(labels[static_cast<std::size_t>(r)]));
    }
    return total / n;
}

/// Gradient of the mean cross-entropy over `batch` with respect to every
/// parameter. Same shapes as `params`.
inline ModelParams grad_params(const ModelSpec& spec, const ModelParams& params,
                               const ImageBatch& batch) {
    check_input_dims(spec, batch.images, "grad_params");
    Graph g;
    std::vector<Graph::Id> biases;
    auto weights = params_as_inputs(g, params, biases);
    Graph::Id x = g.constant(batch.images);
    ModelNodes m = build_model_graph(g, spec, weights, biases, x, batch.size());
    Graph::Id loss = ce_loss_graph(g, m.logits, batch.labels);

    std::vector<Graph::Id> wrt = weights;
    wrt.insert(wrt.end(), biases.begin(), biases.end());
    auto grads = g.backward(loss, wrt);

    ModelParams out;
    const std::size_t L = params.layers.size();
    for (std::size_t i = 0; i < L; ++i) {
        Layer l;
        l.is_conv = params.layers[i].is_conv;
        l.w = g.value(grads[i]);
        l.b = g.value(grads[L + i]);
        out.layers.push_back(std::move(l));
    }
    return out;
}

/// Builds a scalar objective from the model's output nodes.
using InputScalarFn = std::function<Graph::Id(Graph&, Graph::Id logits, Graph::Id penultimate)>;

/// Gradient of scalar_fn(model(images)) with respect to the images.
inline Tensor grad_wrt_input(const ModelSpec& spec, const ModelParams& params,
                             const InputScalarFn& scalar_fn, const Tensor& images) {
    check_input_dims(spec, images, "grad_wrt_input");
    Graph g;
    std::vector<Graph::Id> biases;
    auto weights = params_as_constants(g, params, biases);
    Graph::Id x = g.input(images);
    ModelNodes m = build_model_graph(g, spec, weights, biases, x, images.dim(0));
    Graph::Id scalar = scalar_fn(g, m.logits, m.penultimate);
    auto grads = g.backward(scalar, {x});
    return g.value(grads[0]);
}

/// `cfg.steps` SGD steps over seeded minibatches of `data`. Returns fresh
/// parameters; the input is untouched.
inline ModelParams sgd_train(const ModelSpec& spec, const ModelParams& params,
                             const ImageBatch& data, const TrainConfig& cfg) {
    cfg.validate();
    if (data.size() < 1) throw ContractError("sgd_train: empty training data");
    check_input_dims(spec, data.images, "sgd_train");

    ModelParams theta = params;
    const int n = data.size();
    const int bs = std::min(cfg.batch_size, n);
    const std::size_t per_image = data.images.size() / static_cast<std::size_t>(n);

    for (int step = 0; step < cfg.steps; ++step) {
        ImageBatch batch;
        if (bs == n) {
            batch = data;
        } else {
            Rng rng(derive_seed(cfg.seed, "sgd-batch", static_cast<std::uint64_t>(step)));
            auto idx = rng.sample_without_replacement(static_cast<std::size_t>(n),
                                                      static_cast<std::size_t>(bs));
            batch.images = Tensor({bs, static_cast<int>(per_image)});
            batch.labels.reserve(idx.size());
            for (std::size_t i = 0; i < idx.size(); ++i) {
                const double* src = data.images.data() + idx[i] * per_image;
                std::copy(src, src + per_image, batch.images.data() + i * per_image);
                batch.labels.push_back(data.labels[idx[i]]);
            }
        }

        const double loss = loss_ce(forward(spec, theta, batch.images), batch.labels);
        if (!std::isfinite(loss))
            throw DivergenceError("sgd_train: non-finite loss", step);

        ModelParams g = grad_params(spec, theta, batch);
        for (std::size_t l = 0; l < theta.layers.size(); ++l) {
            for (std::size_t i = 0; i < theta.layers[l].w.size(); ++i)
                theta.layers[l].w[i] -= cfg.learning_rate * g.layers[l].w[i];
            for (std::size_t i = 0; i < theta.layers[l].b.size(); ++i)
                theta.layers[l].b[i] -= cfg.learning_rate * g.layers[l].b[i];
        }
    }
    return theta;
}

// ---------------------------------------------------------------------------
// Higher-order differentiation contract, consumed by the distillation loop.
// ---------------------------------------------------------------------------

/// A training run recorded as graph nodes: theta_T is produced from theta0
/// by `cfg.steps` SGD steps on the synthetic images, every step kept
/// differentiable with respect to them. Full unroll, no truncation.
struct RecordedTraining {
    Graph g;
    Graph::Id x = -1;  // the synthetic images leaf
    std::vector<Graph::Id> w, b;
    ModelSpec spec;

    ModelParams theta_t() const {
        ModelParams p;
        for (std::size_t i = 0; i < w.size(); ++i) {
            Layer l;
            l.is_conv = spec.family == ModelFamily::ConvNet &&
                        static_cast<int>(i) < spec.conv_blocks;
            l.w = g.value(w[i]);
            l.b = g.value(b[i]);
            p.layers.push_back(std::move(l));
        }
        return p;
    }
};

inline RecordedTraining record_training(const ModelSpec& spec, const ModelParams& theta0,
                                        const ImageBatch& syn, const TrainConfig& cfg) {
    cfg.validate();
    check_input_dims(spec, syn.images, "record_training");

    RecordedTraining rec;
    rec.spec = spec;
    Graph& g = rec.g;
    rec.x = g.input(syn.images);
    rec.w = params_as_inputs(g, theta0, rec.b);  // inputs so step gradients materialize

    const int m = syn.size();
    const int bs = std::min(cfg.batch_size, m);
    const std::size_t L = theta0.layers.size();

    for (int step = 0; step < cfg.steps; ++step) {
        Graph::Id xb = rec.x;
        std::vector<int> lbl = syn.labels;
        if (bs < m) {
            Rng rng(derive_seed(cfg.seed, "sgd-batch", static_cast<std::uint64_t>(step)));
            auto idx = rng.sample_without_replacement(static_cast<std::size_t>(m),
                                                      static_cast<std::size_t>(bs));
            auto rows = std::make_shared<std::vector<int>>();
            lbl.clear();
            for (std::size_t i : idx) {
                rows->push_back(static_cast<int>(i));
                lbl.push_back(syn.labels[i]);
            }
            xb = g.gather_rows(rec.x, std::shared_ptr<const std::vector<int>>(rows));
        }
        ModelNodes mb = build_model_graph(g, spec, rec.w, rec.b, xb, static_cast<int>(lbl.size()));
        Graph::Id step_loss = ce_loss_graph(g, mb.logits, lbl);
        if (!std::isfinite(g.value(step_loss)[0]))
            throw DivergenceError("recorded training: non-finite inner loss", step);

        std::vector<Graph::Id> wrt = rec.w;
        wrt.insert(wrt.end(), rec.b.begin(), rec.b.end());
        auto grads = g.backward(step_loss, wrt);
        for (std::size_t i = 0; i < L; ++i) {
            rec.w[i] = g.sub(rec.w[i], g.scale(grads[i], cfg.learning_rate));
            rec.b[i] = g.sub(rec.b[i], g.scale(grads[L + i], cfg.learning_rate));
        }
    }
    return rec;
}

/// d/d(syn images) of the cross-entropy of `outer` under the recorded
/// theta_T. May be called repeatedly with different outer batches.
inline Tensor recorded_outer_grad(RecordedTraining& rec, const ImageBatch& outer,
                                  double* outer_loss = nullptr) {
    check_input_dims(rec.spec, outer.images, "recorded_outer_grad");
    Graph& g = rec.g;
    ModelNodes m = build_model_graph(g, rec.spec, rec.w, rec.b, g.constant(outer.images),
                                     outer.size());
    Graph::Id loss = ce_loss_graph(g, m.logits, outer.labels);
    if (outer_loss) *outer_loss = g.value(loss)[0];
    auto gx = g.backward(loss, {rec.x});
    return g.value(gx[0]);
}

struct UnrolledResult {
    Tensor grad_images;   // d outer_loss / d syn images, same shape as the input
    ModelParams theta_t;  // parameters after the recorded training steps
    double outer_loss = 0.0;
};

/// One-shot wrapper around record_training + recorded_outer_grad.
inline UnrolledResult unrolled_outer_grad(const ModelSpec& spec, const ModelParams& theta0,
                                          const ImageBatch& syn, const TrainConfig& cfg,
                                          const ImageBatch& outer) {
    RecordedTraining rec = record_training(spec, theta0, syn, cfg);
    UnrolledResult res;
    res.theta_t = rec.theta_t();
    res.grad_images = recorded_outer_grad(rec, outer, &res.outer_loss);
    return res;
}

/// Builds a scalar from the per-layer gradient nodes of the inner loss.
using GradScalarFn = std::function<Graph::Id(Graph&, const std::vector<Graph::Id>& weight_grads,
                                             const std::vector<Graph::Id>& bias_grads)>;

struct GradOfGradResult {
    Tensor grad_images;
    double scalar = 0.0;
};

/// Gradient with respect to the images of an arbitrary scalar function of
/// the parameter gradient of the cross-entropy on those images.
inline GradOfGradResult grad_of_param_grad(const ModelSpec& spec, const ModelParams& theta,
                                           const ImageBatch& data, const GradScalarFn& fn) {
    check_input_dims(spec, data.images, "grad_of_param_grad");
    Graph g;
    Graph::Id x = g.input(data.images);
    std::vector<Graph::Id> w, b;
    w = params_as_inputs(g, theta, b);
    ModelNodes m = build_model_graph(g, spec, w, b, x, data.size());
    Graph::Id loss = ce_loss_graph(g, m.logits, data.labels);

    std::vector<Graph::Id> wrt = w;
    wrt.insert(wrt.end(), b.begin(), b.end());
    auto grads = g.backward(loss, wrt);
    std::vector<Graph::Id> wg(grads.begin(), grads.begin() + static_cast<long>(w.size()));
    std::vector<Graph::Id> bg(grads.begin() + static_cast<long>(w.size()), grads.end());

    Graph::Id scalar = fn(g, wg, bg);
    auto gx = g.backward(scalar, {x});
    return {g.value(gx[0]), g.value(scalar)[0]};
}

// ---------------------------------------------------------------------------
// MPR1 parameter checkpoints: magic, u32 tensor count, then per tensor
// u32 rank, u32 dims..., float64 payload. Weights and biases alternate.
// ---------------------------------------------------------------------------

inline void save_params(const ModelParams& params, const std::filesystem::path& path) {
    std::string buf;
    buf.append("MPR1");
    detail::put_u32(buf, static_cast<std::uint32_t>(params.layers.size() * 2));
    auto put_tensor = [&buf](const Tensor& t) {
        detail::put_u32(buf, static_cast<std::uint32_t>(t.rank()));
        for (int d : t.shape()) detail::put_u32(buf, static_cast<std::uint32_t>(d));
        for (double v : t.vec()) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            for (int i = 0; i < 8; ++i)
                buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
        }
    };
    for (const Layer& l : params.layers) {
        put_tensor(l.w);
        put_tensor(l.b);
    }
    detail::write_file(path, buf);
}

inline ModelParams load_params(const std::filesystem::path& path) {
    detail::ByteReader r(detail::read_file(path), path.string());
    r.expect_magic("MPR1");
    const std::uint32_t count = r.u32();
    if (count == 0 || count % 2 != 0)
        throw FormatError(path.string() + ": tensor count must be a positive even number",
                          r.offset() - 4);
    auto read_tensor = [&r, &path]() {
        const std::uint32_t rank = r.u32();
        if (rank > 4) throw FormatError(path.string() + ": implausible tensor rank", r.offset() - 4);
        std::vector<int> shape;
        for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<int>(r.u32()));
        Tensor t(shape);
        for (std::size_t i = 0; i < t.size(); ++i) {
            std::uint64_t bits = 0;
            for (int byte = 0; byte < 8; ++byte)
                bits |= static_cast<std::uint64_t>(r.u8()) << (8 * byte);
            double v;
            std::memcpy(&v, &bits, 8);
            t[i] = v;
        }
        return t;
    };
    ModelParams params;
    for (std::uint32_t i = 0; i < count / 2; ++i) {
        Layer l;
        l.w = read_tensor();
        l.b = read_tensor();
        // layer roles are recovered from the model spec, not the checkpoint
        params.layers.push_back(std::move(l));
    }
    r.expect_end();
    return params;
}

}  // namespace ddlab
