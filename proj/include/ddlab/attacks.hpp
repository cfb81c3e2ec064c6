#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "ddlab/datasets.hpp"
#include "ddlab/distill.hpp"
#include "ddlab/models.hpp"

namespace ddlab {

enum class TriggerKind { Patch, Optimized, Invisible };

enum class TriggerPosition { BottomRight, BottomLeft, TopRight, TopLeft, Center };

/// A trigger is a full-image pattern plus a binary mask naming where it is
/// inserted, and the class every poisoned sample is relabeled to.
struct Trigger {
    Tensor pattern;  // [H, W, C]
    Tensor mask;     // [H, W], entries exactly 0 or 1
    int target_label = 0;
    TriggerKind kind = TriggerKind::Patch;
    int produced_epoch = 0;

    int height() const { return pattern.dim(0); }
    int width() const { return pattern.dim(1); }
    int channels() const { return pattern.dim(2); }

    void validate() const {
        if (pattern.rank() != 3 || mask.rank() != 2) throw ContractError("trigger: bad ranks");
        if (mask.dim(0) != pattern.dim(0) || mask.dim(1) != pattern.dim(1))
            throw ContractError("trigger: mask/pattern dims differ");
        for (double v : mask.vec())
            if (v != 0.0 && v != 1.0) throw ContractError("trigger: mask must be exactly 0/1");
        if (!pattern.all_finite()) throw ContractError("trigger: non-finite pattern");
    }
};

struct AttackConfig {
    double poison_ratio = 0.01;
    int trigger_size = 2;
    TriggerPosition position = TriggerPosition::BottomRight;
    int target_label = 0;
    int top_k = 1;
    double alpha = 10.0;
    double trigger_lr = 0.08;
    double stop_threshold = 0.5;
    int max_steps = 10000;

    void validate() const {
        if (!(poison_ratio > 0.0) || poison_ratio > 1.0)
            throw ConfigError("attack: poison_ratio must be in (0, 1]");
        if (trigger_size < 1) throw ConfigError("attack: trigger_size must be >= 1");
        if (top_k < 1) throw ConfigError("attack: top_k must be >= 1");
        if (!(alpha > 1.0)) throw ConfigError("attack: alpha must be > 1");
        if (!(stop_threshold > 0.0)) throw ConfigError("attack: stop threshold must be > 0");
        if (max_steps < 0) throw ConfigError("attack: max_steps must be >= 0");
        if (target_label < 0) throw ConfigError("attack: target_label must be >= 0");
    }
};

/// Per-epoch snapshots of the trigger, epochs strictly increasing.
struct TriggerTrajectory {
    std::vector<Trigger> snapshots;

    void append(Trigger t) {
        if (!snapshots.empty() && t.produced_epoch <= snapshots.back().produced_epoch)
            throw ContractError("trajectory: epochs must be strictly increasing");
        snapshots.push_back(std::move(t));
    }

    std::size_t size() const { return snapshots.size(); }
    bool empty() const { return snapshots.empty(); }
};

namespace detail {

inline std::pair<int, int> patch_origin(TriggerPosition pos, int h, int w, int s) {
    switch (pos) {
        case TriggerPosition::BottomRight: return {h - s, w - s};
        case TriggerPosition::BottomLeft: return {h - s, 0};
        case TriggerPosition::TopRight: return {0, w - s};
        case TriggerPosition::TopLeft: return {0, 0};
        case TriggerPosition::Center: return {(h - s) / 2, (w - s) / 2};
    }
    return {h - s, w - s};
}

}  // namespace detail

/// White square of cfg.trigger_size at the configured position.
inline Trigger make_patch_trigger(const AttackConfig& cfg, int h, int w, int c) {
    if (cfg.trigger_size > h || cfg.trigger_size > w)
        throw ConfigError("attack: trigger larger than the image");
    Trigger t;
    t.kind = TriggerKind::Patch;
    t.target_label = cfg.target_label;
    t.pattern = Tensor({h, w, c});
    t.mask = Tensor({h, w});
    const auto [oy, ox] = detail::patch_origin(cfg.position, h, w, cfg.trigger_size);
    for (int y = oy; y < oy + cfg.trigger_size; ++y)
        for (int x = ox; x < ox + cfg.trigger_size; ++x) {
            t.mask.at(y, x) = 1.0;
            for (int ch = 0; ch < c; ++ch)
                t.pattern.vec()[(static_cast<std::size_t>(y) * w + x) * c + ch] = 1.0;
        }
    return t;
}

/// DoorPing's starting point: the patch geometry with seeded uniform values
/// instead of white.
inline Trigger make_random_patch_trigger(const AttackConfig& cfg, int h, int w, int c,
                                         std::uint64_t seed) {
    Trigger t = make_patch_trigger(cfg, h, w, c);
    t.kind = TriggerKind::Optimized;
    Rng rng(derive_seed(seed, "trigger-init"));
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (t.mask.at(y, x) == 1.0)
                for (int ch = 0; ch < c; ++ch)
                    t.pattern.vec()[(static_cast<std::size_t>(y) * w + x) * c + ch] = rng.uniform();
    t.pattern.snap_f32();
    return t;
}

/// The invisible variant starts from a seeded image of the target class in
/// the test set and optimizes the whole image (full mask).
inline Trigger make_invisible_trigger(const LabeledImageSet& test, const AttackConfig& cfg,
                                      std::uint64_t seed) {
    const auto pool = test.indices_of_class(cfg.target_label);
    if (pool.empty()) throw ConfigError("attack: no test images of the target class");
    Rng rng(derive_seed(seed, "invisible-init"));
    const int pick = pool[static_cast<std::size_t>(rng.below(pool.size()))];
    Trigger t;
    t.kind = TriggerKind::Invisible;
    t.target_label = cfg.target_label;
    t.pattern = test.image(pick);
    t.mask = Tensor({test.height(), test.width()}, 1.0);
    return t;
}

/// x_hat = x * (1 - m) + t * m, clipped to [0,1]. Pixels outside the mask
/// are bit-identical to the input.
inline Tensor apply_trigger(const Tensor& x, const Trigger& trig) {
    if (x.size() != trig.pattern.size()) throw ContractError("apply_trigger: size mismatch");
    const int h = trig.height(), w = trig.width(), c = trig.channels();
    Tensor out = x;
    for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
            if (trig.mask.at(y, xx) == 1.0)
                for (int ch = 0; ch < c; ++ch) {
                    const std::size_t off = (static_cast<std::size_t>(y) * w + xx) * c + ch;
                    out.vec()[off] =
                        static_cast<double>(static_cast<float>(std::clamp(trig.pattern.vec()[off], 0.0, 1.0)));
                }
    return out;
}

/// Poisons exactly ceil(ratio * N) samples, drawn uniformly without
/// replacement: the trigger is applied and the label set to the target.
inline LabeledImageSet poison_training_set(const LabeledImageSet& set, const Trigger& trig,
                                           double ratio, std::uint64_t seed) {
    if (!(ratio > 0.0) || ratio > 1.0)
        throw ConfigError("poison_training_set: ratio must be in (0, 1]");
    if (trig.target_label >= set.num_classes)
        throw ContractError("poison_training_set: target label out of range");
    const std::size_t count =
        static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(set.size())));
    Rng rng(derive_seed(seed, "poison-picks"));
    const auto picks = rng.sample_without_replacement(static_cast<std::size_t>(set.size()), count);

    LabeledImageSet out = set;
    for (std::size_t i : picks) {
        out.set_image(static_cast<int>(i), apply_trigger(set.image(static_cast<int>(i)), trig));
        out.labels[i] = trig.target_label;
    }
    return out;
}

/// Backdoor test set: drops samples whose true label is already the target,
/// triggers the rest, and relabels them all to the target.
inline LabeledImageSet make_backdoor_testset(const LabeledImageSet& test, const Trigger& trig) {
    std::vector<int> keep;
    for (int i = 0; i < test.size(); ++i)
        if (test.labels[static_cast<std::size_t>(i)] != trig.target_label) keep.push_back(i);
    if (keep.empty())
        throw ContractError("make_backdoor_testset: every test sample is of the target class");

    LabeledImageSet out;
    out.num_classes = test.num_classes;
    out.images = Tensor({static_cast<int>(keep.size()), test.height(), test.width(),
                         test.channels()});
    out.labels.assign(keep.size(), trig.target_label);
    for (std::size_t i = 0; i < keep.size(); ++i) {
        const Tensor triggered = apply_trigger(test.image(keep[i]), trig);
        std::copy(triggered.data(), triggered.data() + triggered.size(),
                  out.images.data() + i * test.pixels_per_image());
    }
    return out;
}

/// Ranks penultimate neurons by the sum of absolute incoming and outgoing
/// weights, descending, ties broken by lower index. Returns the first k.
inline std::vector<int> select_topk_neurons(const ModelSpec& spec, const ModelParams& params,
                                            int k) {
    if (k < 1) throw ContractError("select_topk_neurons: k must be >= 1");
    const int p = spec.penultimate_width();
    const Tensor& out_w = params.layers.back().w;  // [P, K]
    if (out_w.dim(0) != p) throw ContractError("select_topk_neurons: params do not match spec");

    std::vector<double> score(static_cast<std::size_t>(p), 0.0);
    for (int j = 0; j < p; ++j)
        for (int c = 0; c < out_w.dim(1); ++c) score[static_cast<std::size_t>(j)] += std::abs(out_w.at(j, c));

    if (params.layers.size() >= 2 && spec.fc_layers >= 2) {
        // incoming weights: the column of the layer producing the penultimate units
        const Tensor& in_w = params.layers[params.layers.size() - 2].w;  // [*, P]
        for (int j = 0; j < p; ++j)
            for (int i = 0; i < in_w.dim(0); ++i) score[static_cast<std::size_t>(j)] += std::abs(in_w.at(i, j));
    } else if (spec.family == ModelFamily::ConvNet && params.layers.size() >= 2) {
        // penultimate units are pooled conv planes; incoming weights are the
        // producing filter column of the channel the unit belongs to
        const Tensor& conv_w = params.layers[static_cast<std::size_t>(spec.conv_blocks) - 1].w;  // [9c, width]
        for (int j = 0; j < p; ++j) {
            const int channel = j % spec.width;
            for (int i = 0; i < conv_w.dim(0); ++i)
                score[static_cast<std::size_t>(j)] += std::abs(conv_w.at(i, channel));
        }
    }

    std::vector<int> order(static_cast<std::size_t>(p));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&score](int a, int b) {
        if (score[static_cast<std::size_t>(a)] != score[static_cast<std::size_t>(b)])
            return score[static_cast<std::size_t>(a)] > score[static_cast<std::size_t>(b)];
        return a < b;
    });
    order.resize(static_cast<std::size_t>(std::min(k, p)));
    return order;
}

namespace detail {

/// Scalar node: mean squared error between the selected penultimate entries
/// and a constant target vector.
inline Graph::Id selected_mse(Graph& g, Graph::Id penult, const std::vector<int>& selected,
                              const Tensor& target) {
    auto rows = std::make_shared<const std::vector<int>>(selected);
    Graph::Id sel = g.gather_rows(g.transpose(penult), rows);  // [k, 1]
    Graph::Id diff = g.sub(g.reshape(sel, {static_cast<int>(selected.size())}), g.constant(target));
    return g.scale(g.sum_all(g.mul(diff, diff)), 1.0 / static_cast<double>(selected.size()));
}

inline Tensor selected_activations(const ModelSpec& spec, const ModelParams& params,
                                   const Trigger& trig, const std::vector<int>& selected) {
    Tensor img = trig.pattern.reshaped({1, trig.height(), trig.width(), trig.channels()});
    const Tensor penult = ddlab::penultimate(spec, params, img);
    Tensor out({static_cast<int>(selected.size())});
    for (std::size_t i = 0; i < selected.size(); ++i)
        out[i] = penult.at(0, selected[i]);
    return out;
}

/// Shared masked-update loop for the optimized and invisible variants.
/// `make_target` maps the current selected activations to the per-step
/// constant target; `l1_toward_black` adds the invisible variant's pull
/// toward the all-zero image.
template <class TargetFn>
Trigger masked_trigger_descent(const ModelSpec& spec, const ModelParams& params, Trigger trig,
                               const AttackConfig& cfg, const TargetFn& make_target,
                               bool early_stop, bool l1_toward_black) {
    const auto selected = select_topk_neurons(spec, params, cfg.top_k);
    const int h = trig.height(), w = trig.width(), c = trig.channels();

    for (int step = 0; step < cfg.max_steps; ++step) {
        Graph g;
        std::vector<Graph::Id> biases;
        auto weights = params_as_constants(g, params, biases);
        Graph::Id t_in = g.input(trig.pattern.reshaped({1, h, w, c}));
        ModelNodes m = build_model_graph(g, spec, weights, biases, t_in, 1);

        Tensor now({static_cast<int>(selected.size())});
        for (std::size_t i = 0; i < selected.size(); ++i)
            now[i] = g.value(m.penultimate).at(0, selected[i]);

        Graph::Id loss = selected_mse(g, m.penultimate, selected, make_target(now));
        if (l1_toward_black) loss = g.add(loss, g.sum_all(g.abs(t_in)));

        const double loss_value = g.value(loss)[0];
        if (!std::isfinite(loss_value))
            throw DivergenceError("trigger optimization: non-finite loss", step);
        if (early_stop && loss_value < cfg.stop_threshold) break;

        auto grads = g.backward(loss, {t_in});
        const Tensor& grad = g.value(grads[0]);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                if (trig.mask.at(y, x) != 1.0) continue;  // Eq-8 style masked update
                for (int ch = 0; ch < c; ++ch) {
                    const std::size_t off = (static_cast<std::size_t>(y) * w + x) * c + ch;
                    double v = trig.pattern.vec()[off] - cfg.trigger_lr * grad.vec()[off];
                    trig.pattern.vec()[off] = std::clamp(v, 0.0, 1.0);
                }
            }
    }
    return trig;
}

}  // namespace detail

/// DoorPing's per-epoch trigger loop: the selected top-k activations are
/// pushed toward alpha times their current value, the target re-snapshotted
/// every step so the activations keep growing, with an early stop once the
/// loss falls under the threshold. Pixels outside the mask never change.
inline Trigger optimize_trigger(const ModelSpec& spec, const ModelParams& params,
                                const Trigger& trig, const AttackConfig& cfg) {
    if (trig.kind != TriggerKind::Optimized)
        throw ContractError("optimize_trigger: trigger kind must be optimized");
    trig.validate();
    const double alpha = cfg.alpha;
    return detail::masked_trigger_descent(
        spec, params, trig, cfg,
        [alpha](const Tensor& now) {
            Tensor target = now;
            for (double& v : target.vec()) v *= alpha;
            return target;
        },
        /*early_stop=*/true, /*l1_toward_black=*/false);
}

/// Invisible variant: selected activations are driven toward the constant
/// 100 under a full-image mask, with an L1 pull toward the black image. No
/// early stop; runs exactly cfg.max_steps steps.
inline Trigger optimize_invisible_trigger(const ModelSpec& spec, const ModelParams& params,
                                          const Trigger& trig, const AttackConfig& cfg) {
    if (trig.kind != TriggerKind::Invisible)
        throw ContractError("optimize_invisible_trigger: trigger kind must be invisible");
    trig.validate();
    return detail::masked_trigger_descent(
        spec, params, trig, cfg,
        [](const Tensor& now) { return Tensor(now.shape(), 100.0); },
        /*early_stop=*/false, /*l1_toward_black=*/true);
}

/// NaiveAttack: build the white patch, poison once, distill as usual.
inline std::pair<LabeledImageSet, Trigger> naive_attack_prepare(const LabeledImageSet& train,
                                                                const AttackConfig& cfg,
                                                                std::uint64_t seed) {
    cfg.validate();
    Trigger trig = make_patch_trigger(cfg, train.height(), train.width(), train.channels());
    LabeledImageSet poisoned =
        poison_training_set(train, trig, cfg.poison_ratio, derive_seed(seed, "naive"));
    return {std::move(poisoned), std::move(trig)};
}

/// Mutable state threaded through the DoorPing hook across epochs.
struct DoorPingState {
    ModelSpec spec;
    AttackConfig cfg;
    Trigger trigger;  // continuously optimized across epochs
    TriggerTrajectory trajectory;
    std::uint64_t seed = 0;
    bool invisible = false;
};

/// The seam into the distillation loop (lines 7-16 of the trigger-update
/// procedure): per epoch, optimize the trigger against the freshly trained
/// model, snapshot it, and poison this epoch's training data.
inline EpochHook doorping_hook(std::shared_ptr<DoorPingState> state) {
    return [state](int epoch, const ModelParams& theta, LabeledImageSet& data) {
        state->trigger = state->invisible
                             ? optimize_invisible_trigger(state->spec, theta, state->trigger,
                                                          state->cfg)
                             : optimize_trigger(state->spec, theta, state->trigger, state->cfg);
        state->trigger.produced_epoch = epoch;
        state->trajectory.append(state->trigger);
        data = poison_training_set(data, state->trigger, state->cfg.poison_ratio,
                                   derive_seed(state->seed, "poison", static_cast<std::uint64_t>(epoch)));
    };
}

// ---------------------------------------------------------------------------
// TRG1 trigger files: magic, u32 H, W, C, float32 pattern, u8 mask raster,
// u16 target label, u32 producing epoch. Trajectories are directories of
// TRG1 files indexed by epoch.
// ---------------------------------------------------------------------------

inline void save_trigger(const Trigger& trig, const std::filesystem::path& path) {
    std::string buf;
    buf.append("TRG1");
    detail::put_u32(buf, static_cast<std::uint32_t>(trig.height()));
    detail::put_u32(buf, static_cast<std::uint32_t>(trig.width()));
    detail::put_u32(buf, static_cast<std::uint32_t>(trig.channels()));
    for (double v : trig.pattern.vec()) detail::put_f32(buf, static_cast<float>(v));
    for (double v : trig.mask.vec()) buf.push_back(v == 1.0 ? '\x01' : '\x00');
    detail::put_u16(buf, static_cast<std::uint16_t>(trig.target_label));
    detail::put_u32(buf, static_cast<std::uint32_t>(trig.produced_epoch));
    detail::write_file(path, buf);
}

inline Trigger load_trigger(const std::filesystem::path& path) {
    detail::ByteReader r(detail::read_file(path), path.string());
    r.expect_magic("TRG1");
    const int h = static_cast<int>(r.u32());
    const int w = static_cast<int>(r.u32());
    const int c = static_cast<int>(r.u32());
    if (h < 1 || w < 1 || c < 1)
        throw FormatError(path.string() + ": bad trigger dims", r.offset() - 12);
    Trigger t;
    t.pattern = Tensor({h, w, c});
    for (std::size_t i = 0; i < t.pattern.size(); ++i) t.pattern[i] = static_cast<double>(r.f32());
    t.mask = Tensor({h, w});
    for (std::size_t i = 0; i < t.mask.size(); ++i) {
        const std::uint8_t bit = r.u8();
        if (bit > 1) throw FormatError(path.string() + ": mask byte not 0/1", r.offset() - 1);
        t.mask[i] = bit;
    }
    t.target_label = static_cast<int>(r.u16());
    t.produced_epoch = static_cast<int>(r.u32());
    r.expect_end();
    t.kind = TriggerKind::Optimized;
    return t;
}

inline void save_trajectory(const TriggerTrajectory& traj, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (const Trigger& t : traj.snapshots) {
        char name[32];
        std::snprintf(name, sizeof(name), "epoch_%05d.trg", t.produced_epoch);
        save_trigger(t, dir / name);
    }
}

inline TriggerTrajectory load_trajectory(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
        if (entry.path().extension() == ".trg") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    TriggerTrajectory traj;
    for (const auto& f : files) traj.append(load_trigger(f));
    return traj;
}

}  // namespace ddlab
