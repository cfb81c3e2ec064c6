#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "ddlab/attacks.hpp"
#include "ddlab/datasets.hpp"
#include "ddlab/models.hpp"

namespace ddlab {

struct StripConfig {
    int n_overlays = 10;
    double blend = 0.5;
    double frr_target = 0.01;

    void validate() const {
        if (n_overlays < 1) throw ConfigError("strip: n_overlays must be >= 1");
        if (!(blend > 0.0 && blend < 1.0)) throw ConfigError("strip: blend must be in (0, 1)");
        if (!(frr_target > 0.0 && frr_target < 1.0))
            throw ConfigError("strip: frr_target must be in (0, 1)");
    }
};

struct DetectionReport {
    double frr = 0.0;
    double far = 0.0;
    double threshold = 0.0;
    std::vector<double> benign_scores;
    std::vector<double> triggered_scores;
};

namespace detail {

inline std::vector<double> softmax_row(const Tensor& logits, int row) {
    const int k = logits.dim(1);
    double mx = logits.at(row, 0);
    for (int c = 1; c < k; ++c) mx = std::max(mx, logits.at(row, c));
    std::vector<double> p(static_cast<std::size_t>(k));
    double sum = 0.0;
    for (int c = 0; c < k; ++c) {
        p[static_cast<std::size_t>(c)] = std::exp(logits.at(row, c) - mx);
        sum += p[static_cast<std::size_t>(c)];
    }
    for (double& v : p) v /= sum;
    return p;
}

/// Inverse standard-normal CDF, Acklam's rational approximation
/// (relative error below 1.2e-9 across the open unit interval).
inline double inverse_normal_cdf(double p) {
    if (!(p > 0.0 && p < 1.0)) throw ContractError("inverse_normal_cdf: p must be in (0,1)");
    static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                   -2.759285104469687e+02, 1.383577518672690e+02,
                                   -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                   -1.556989798598866e+02, 6.680131188771972e+01,
                                   -1.328068155288572e+01};
    static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                   -2.400758277161838e+00, -2.549732539343734e+00,
                                   4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                   2.445134137142996e+00, 3.754408661907416e+00};
    constexpr double plow = 0.02425;
    double q, r;
    if (p < plow) {
        q = std::sqrt(-2.0 * std::log(p));
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    if (p > 1.0 - plow) {
        q = std::sqrt(-2.0 * std::log(1.0 - p));
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    q = p - 0.5;
    r = q * q;
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

}  // namespace detail

/// STRIP's randomness score: blend the input with each overlay, classify all
/// blends, and take the entropy of the mean softmax. Low entropy means the
/// prediction survives perturbation, the signature of a triggered input.
inline double strip_entropy(const ModelSpec& spec, const ModelParams& params, const Tensor& x,
                            const std::vector<Tensor>& overlays, double blend) {
    if (overlays.empty()) throw ContractError("strip_entropy: need at least one overlay");
    const int n = static_cast<int>(overlays.size());
    Tensor batch({n, static_cast<int>(x.size())});
    for (int i = 0; i < n; ++i) {
        if (overlays[static_cast<std::size_t>(i)].size() != x.size())
            throw ContractError("strip_entropy: overlay size mismatch");
        for (std::size_t p = 0; p < x.size(); ++p) {
            const double v = blend * x[p] + (1.0 - blend) * overlays[static_cast<std::size_t>(i)][p];
            batch.vec()[static_cast<std::size_t>(i) * x.size() + p] = std::clamp(v, 0.0, 1.0);
        }
    }
    const Tensor logits = forward(spec, params, batch);
    const int k = logits.dim(1);
    std::vector<double> mean(static_cast<std::size_t>(k), 0.0);
    for (int i = 0; i < n; ++i) {
        const auto p = detail::softmax_row(logits, i);
        for (int c = 0; c < k; ++c) mean[static_cast<std::size_t>(c)] += p[static_cast<std::size_t>(c)] / n;
    }
    double entropy = 0.0;
    for (double p : mean)
        if (p > 0.0) entropy -= p * std::log(p);
    return entropy;
}

/// Normal-fit percent-point calibration: fit N(mu, sigma) to the benign
/// entropies and return the inverse CDF at the target false-rejection rate.
inline double strip_calibrate(const std::vector<double>& benign_entropies, double frr_target) {
    if (benign_entropies.empty()) throw ContractError("strip_calibrate: no benign entropies");
    if (!(frr_target > 0.0 && frr_target < 1.0))
        throw ConfigError("strip_calibrate: frr_target must be in (0, 1)");
    double mean = 0.0;
    for (double e : benign_entropies) mean += e;
    mean /= static_cast<double>(benign_entropies.size());
    double var = 0.0;
    for (double e : benign_entropies) var += (e - mean) * (e - mean);
    var /= static_cast<double>(benign_entropies.size());
    return mean + std::sqrt(var) * detail::inverse_normal_cdf(frr_target);
}

/// Flags a sample as backdoored iff its entropy falls below the calibrated
/// threshold. FRR is measured on the benign set, FAR on the triggered set.
/// The first n_overlays benign images serve as the overlay samples.
inline DetectionReport strip_detect(const ModelSpec& spec, const ModelParams& params,
                                    const LabeledImageSet& benign,
                                    const LabeledImageSet& triggered, const StripConfig& cfg) {
    cfg.validate();
    if (benign.size() < cfg.n_overlays)
        throw ContractError("strip_detect: benign set smaller than the overlay count");

    std::vector<Tensor> overlays;
    for (int i = 0; i < cfg.n_overlays; ++i) overlays.push_back(benign.image(i));

    DetectionReport report;
    for (int i = 0; i < benign.size(); ++i)
        report.benign_scores.push_back(
            strip_entropy(spec, params, benign.image(i), overlays, cfg.blend));
    for (int i = 0; i < triggered.size(); ++i)
        report.triggered_scores.push_back(
            strip_entropy(spec, params, triggered.image(i), overlays, cfg.blend));

    report.threshold = strip_calibrate(report.benign_scores, cfg.frr_target);
    int rejected = 0;
    for (double e : report.benign_scores) rejected += (e < report.threshold);
    int accepted = 0;
    for (double e : report.triggered_scores) accepted += (e >= report.threshold);
    report.frr = static_cast<double>(rejected) / static_cast<double>(benign.size());
    report.far = triggered.size() > 0
                     ? static_cast<double>(accepted) / static_cast<double>(triggered.size())
                     : 0.0;
    return report;
}

/// Spectral-signature outlier scores for one class's feature matrix [N, P]:
/// center the features, take the top right singular vector v of the
/// centered matrix, and score each sample by its squared projection on v.
inline std::vector<double> spectral_scores(const Tensor& features) {
    if (features.rank() != 2) throw ContractError("spectral_scores: features must be [N, P]");
    const int n = features.dim(0), p = features.dim(1);
    if (n < 1) throw ContractError("spectral_scores: empty feature matrix");

    Eigen::MatrixXd centered(n, p);
    for (int j = 0; j < p; ++j) {
        double mean = 0.0;
        for (int i = 0; i < n; ++i) mean += features.at(i, j);
        mean /= n;
        for (int i = 0; i < n; ++i) centered(i, j) = features.at(i, j) - mean;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(centered.transpose() * centered);
    const Eigen::VectorXd v = eig.eigenvectors().col(p - 1);  // largest eigenvalue last

    std::vector<double> scores(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double proj = centered.row(i).dot(v);
        scores[static_cast<std::size_t>(i)] = proj * proj;
    }
    return scores;
}

// ---------------------------------------------------------------------------
// Input-purification autoencoders: a small conv encoder-decoder trained to
// reconstruct clean images from corrupted ones.
// ---------------------------------------------------------------------------

struct AutoencoderConfig {
    int width = 8;  // conv channels, capped at 16
    int epochs = 40;
    double learning_rate = 2e-3;
    int batch_size = 32;
    double noise_std = 0.1;  // denoising corruption
    std::uint64_t seed = 0;

    void validate() const {
        if (width < 1 || width > 16) throw ConfigError("autoencoder: width must be in [1, 16]");
        if (epochs < 1) throw ConfigError("autoencoder: epochs must be >= 1");
        if (!(learning_rate > 0.0)) throw ConfigError("autoencoder: learning rate must be > 0");
        if (batch_size < 1) throw ConfigError("autoencoder: batch_size must be >= 1");
        if (noise_std < 0.0) throw ConfigError("autoencoder: noise_std must be >= 0");
    }
};

/// Two 3x3-conv down blocks, two up blocks, one output conv. Stored in the
/// same layer containers as classifier parameters so MPR1 checkpoints apply.
struct Autoencoder {
    int width = 8;
    int in_h = 0, in_w = 0, in_c = 0;
    ModelParams params;  // conv1, conv2, conv3, conv4, conv_out
};

namespace detail {

inline Graph::Id ae_conv(Graph& g, Graph::Id x, Graph::ImageDims d, Graph::Id w, Graph::Id b,
                         bool relu) {
    Graph::Id lin = g.matmul(g.im2col3(x, d), w);
    lin = g.add(lin, g.broadcast_row(b, d.n * d.h * d.w));
    Graph::Id out = relu ? g.relu(lin) : lin;
    return g.reshape(out, {d.n, d.h, d.w, static_cast<int>(g.value(w).dim(1))});
}

inline Graph::Id ae_forward_graph(Graph& g, const Autoencoder& ae,
                                  const std::vector<Graph::Id>& w,
                                  const std::vector<Graph::Id>& b, Graph::Id x, int n) {
    const int h = ae.in_h, wd = ae.in_w, c = ae.in_c, f = ae.width;
    Graph::Id e1 = ae_conv(g, x, {n, h, wd, c}, w[0], b[0], true);
    Graph::Id p1 = g.avgpool2(e1, {n, h, wd, f});
    Graph::Id e2 = ae_conv(g, p1, {n, h / 2, wd / 2, f}, w[1], b[1], true);
    Graph::Id p2 = g.avgpool2(e2, {n, h / 2, wd / 2, f});
    Graph::Id u1 = g.upsample2(p2, {n, h / 2, wd / 2, f});
    Graph::Id d1 = ae_conv(g, u1, {n, h / 2, wd / 2, f}, w[2], b[2], true);
    Graph::Id u2 = g.upsample2(d1, {n, h, wd, f});
    Graph::Id d2 = ae_conv(g, u2, {n, h, wd, f}, w[3], b[3], true);
    return ae_conv(g, d2, {n, h, wd, f}, w[4], b[4], false);  // linear output conv
}

struct AdamState {
    std::vector<Tensor> m, v;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long t = 0;

    void init_like(const ModelParams& p) {
        for (const Layer& l : p.layers) {
            m.push_back(Tensor(l.w.shape()));
            m.push_back(Tensor(l.b.shape()));
            v.push_back(Tensor(l.w.shape()));
            v.push_back(Tensor(l.b.shape()));
        }
    }

    void step(ModelParams& p, const std::vector<Tensor>& grads, double lr) {
        ++t;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t i = 0; i < grads.size(); ++i) {
            Tensor& target = (i % 2 == 0) ? p.layers[i / 2].w : p.layers[i / 2].b;
            for (std::size_t j = 0; j < grads[i].size(); ++j) {
                const double gval = grads[i][j];
                m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * gval;
                v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * gval * gval;
                target[j] -= lr * (m[i][j] / c1) / (std::sqrt(v[i][j] / c2) + eps);
            }
        }
    }
};

using CorruptFn = std::function<Tensor(const Tensor& clean, int sample_index, int epoch)>;

inline Autoencoder train_autoencoder(const LabeledImageSet& clean, const AutoencoderConfig& cfg,
                                     const CorruptFn& corrupt) {
    cfg.validate();
    if (clean.height() % 4 != 0 || clean.width() % 4 != 0)
        throw ConfigError("autoencoder: image sides must be divisible by 4");

    Autoencoder ae;
    ae.width = cfg.width;
    ae.in_h = clean.height();
    ae.in_w = clean.width();
    ae.in_c = clean.channels();

    const int f = cfg.width, c = ae.in_c;
    const int fan[5] = {9 * c, 9 * f, 9 * f, 9 * f, 9 * f};
    const int outs[5] = {f, f, f, f, c};
    for (int l = 0; l < 5; ++l) {
        Layer layer;
        layer.is_conv = true;
        layer.w = Tensor({fan[l], outs[l]});
        layer.b = Tensor({outs[l]});
        const double bound = std::sqrt(6.0 / fan[l]);
        Rng rng(derive_seed(cfg.seed, "ae-init", static_cast<std::uint64_t>(l)));
        for (double& v : layer.w.vec()) v = rng.uniform(-bound, bound);
        ae.params.layers.push_back(std::move(layer));
    }

    AdamState adam;
    adam.init_like(ae.params);
    const int n = clean.size();
    const int batch = std::min(cfg.batch_size, n);
    const std::size_t per = clean.pixels_per_image();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng order_rng(derive_seed(cfg.seed, "ae-order", static_cast<std::uint64_t>(epoch)));
        std::vector<int> order(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
        order_rng.shuffle(order);

        for (int start = 0; start < n; start += batch) {
            const int count = std::min(batch, n - start);
            Tensor inputs({count, ae.in_h, ae.in_w, ae.in_c});
            Tensor targets({count, ae.in_h, ae.in_w, ae.in_c});
            for (int i = 0; i < count; ++i) {
                const int src = order[static_cast<std::size_t>(start + i)];
                const Tensor clean_img = clean.image(src);
                const Tensor corrupted = corrupt(clean_img, src, epoch);
                std::copy(corrupted.data(), corrupted.data() + per, inputs.data() + static_cast<std::size_t>(i) * per);
                std::copy(clean_img.data(), clean_img.data() + per, targets.data() + static_cast<std::size_t>(i) * per);
            }

            Graph g;
            std::vector<Graph::Id> w, b;
            w = params_as_inputs(g, ae.params, b);
            Graph::Id recon = ae_forward_graph(g, ae, w, b, g.constant(inputs), count);
            Graph::Id diff = g.sub(recon, g.constant(targets.reshaped(g.value(recon).shape())));
            Graph::Id loss = g.scale(g.sum_all(g.mul(diff, diff)),
                                     1.0 / static_cast<double>(g.value(diff).size()));
            if (!std::isfinite(g.value(loss)[0]))
                throw DivergenceError("autoencoder training: non-finite loss", epoch);

            std::vector<Graph::Id> wrt = w;
            wrt.insert(wrt.end(), b.begin(), b.end());
            auto grads = g.backward(loss, wrt);
            // interleave as (w0, b0, w1, b1, ...) for the optimizer
            std::vector<Tensor> interleaved;
            for (std::size_t i = 0; i < w.size(); ++i) {
                interleaved.push_back(g.value(grads[i]));
                interleaved.push_back(g.value(grads[w.size() + i]));
            }
            adam.step(ae.params, interleaved, cfg.learning_rate);
        }
    }
    return ae;
}

}  // namespace detail

/// De-noising autoencoder: learns to reconstruct clean images from
/// Gaussian-corrupted counterparts.
inline Autoencoder denoise_ae_train(const LabeledImageSet& clean, const AutoencoderConfig& cfg) {
    const double sigma = cfg.noise_std;
    const std::uint64_t seed = cfg.seed;
    return detail::train_autoencoder(
        clean, cfg, [sigma, seed](const Tensor& img, int index, int epoch) {
            if (sigma == 0.0) return img;
            Tensor out = img;
            Rng rng(derive_seed(seed, "ae-noise",
                                static_cast<std::uint64_t>(index) * 1000003ULL +
                                    static_cast<std::uint64_t>(epoch)));
            for (double& v : out.vec()) v = std::clamp(v + sigma * rng.normal(), 0.0, 1.0);
            return out;
        });
}

/// De-trigger autoencoder: corruption applies a trigger sampled from the
/// supplied trajectory, one draw per example per epoch.
inline Autoencoder detrigger_ae_train(const LabeledImageSet& clean,
                                      const TriggerTrajectory& trajectory,
                                      const AutoencoderConfig& cfg) {
    if (trajectory.empty()) throw ConfigError("detrigger_ae_train: empty trajectory");
    const std::uint64_t seed = cfg.seed;
    const TriggerTrajectory* traj = &trajectory;
    return detail::train_autoencoder(
        clean, cfg, [traj, seed](const Tensor& img, int index, int epoch) {
            Rng rng(derive_seed(seed, "ae-trigger",
                                static_cast<std::uint64_t>(index) * 1000003ULL +
                                    static_cast<std::uint64_t>(epoch)));
            const auto& snap =
                traj->snapshots[static_cast<std::size_t>(rng.below(traj->snapshots.size()))];
            return apply_trigger(img, snap);
        });
}

/// Maps every image through the autoencoder; output clipped to [0,1].
inline LabeledImageSet ae_filter(const Autoencoder& ae, const LabeledImageSet& set) {
    if (set.height() != ae.in_h || set.width() != ae.in_w || set.channels() != ae.in_c)
        throw ContractError("ae_filter: image dims do not match the autoencoder");
    Graph g;
    std::vector<Graph::Id> w, b;
    w = params_as_constants(g, ae.params, b);
    Graph::Id recon = detail::ae_forward_graph(g, ae, w, b, g.constant(set.images), set.size());

    LabeledImageSet out;
    out.num_classes = set.num_classes;
    out.labels = set.labels;
    out.images = g.value(recon).reshaped(set.images.shape());
    out.images.clip(0.0, 1.0);
    out.images.snap_f32();
    return out;
}

}  // namespace ddlab
