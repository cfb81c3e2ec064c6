#pragma once

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "ddlab/datasets.hpp"
#include "ddlab/models.hpp"

namespace ddlab {

struct EvalConfig {
    ModelSpec model;      // downstream architecture
    int epochs = 200;     // passes over the distilled set
    double learning_rate = 0.01;
    int batch_size = 0;   // 0 = full batch
    int repeats = 1;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 1) throw ConfigError("eval: epochs must be >= 1");
        if (!(learning_rate >= 0.0)) throw ConfigError("eval: learning rate must be >= 0");
        if (batch_size < 0) throw ConfigError("eval: batch_size must be >= 0");
        if (repeats < 1) throw ConfigError("eval: repeats must be >= 1");
        model.validate();
    }
};

struct EvalReport {
    double cta_mean = 0.0, cta_std = 0.0;
    double asr_mean = 0.0, asr_std = 0.0;
    std::vector<double> cta_runs;
    std::vector<double> asr_runs;  // empty when no triggered set was evaluated
    double wall_seconds = 0.0;     // bookkeeping only, excluded from reproducibility
    std::string downstream_arch;
    std::string distill_arch;
};

inline const char* family_name(ModelFamily f) {
    return f == ModelFamily::ConvNet ? "convnet" : "mlp";
}

/// Plain SGD on the given set. `cfg.epochs` passes; each pass is
/// ceil(N / batch) seeded minibatch steps (one step when full-batch).
inline ModelParams train_downstream(const LabeledImageSet& distilled, const EvalConfig& cfg,
                                    std::uint64_t run_seed) {
    cfg.validate();
    if (distilled.height() != cfg.model.in_h || distilled.width() != cfg.model.in_w ||
        distilled.channels() != cfg.model.in_c || distilled.num_classes != cfg.model.num_classes)
        throw ConfigError("eval: distilled set does not match the downstream model dims");

    const int n = distilled.size();
    const int batch = cfg.batch_size == 0 ? n : std::min(cfg.batch_size, n);
    const int steps_per_epoch = (n + batch - 1) / batch;

    ModelSpec spec = cfg.model;
    spec.seed = derive_seed(run_seed, "downstream-init");
    TrainConfig tc;
    tc.steps = cfg.epochs * steps_per_epoch;
    tc.learning_rate = cfg.learning_rate;
    tc.batch_size = batch;
    tc.seed = derive_seed(run_seed, "downstream-batches");
    return sgd_train(cfg.model, init_params(spec), ImageBatch::from_set(distilled), tc);
}

inline std::vector<int> predict(const ModelSpec& spec, const ModelParams& params,
                                const LabeledImageSet& set) {
    const Tensor logits = forward(spec, params, set.images);
    std::vector<int> out(static_cast<std::size_t>(set.size()));
    for (int i = 0; i < set.size(); ++i) {
        int best = 0;
        for (int k = 1; k < logits.dim(1); ++k)
            if (logits.at(i, k) > logits.at(i, best)) best = k;
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

/// Clean test accuracy: exact fraction of argmax-correct predictions.
inline double compute_cta(const ModelSpec& spec, const ModelParams& params,
                          const LabeledImageSet& clean_test) {
    if (clean_test.size() < 1) throw ContractError("compute_cta: empty test set");
    const auto preds = predict(spec, params, clean_test);
    int hits = 0;
    for (int i = 0; i < clean_test.size(); ++i)
        hits += (preds[static_cast<std::size_t>(i)] == clean_test.labels[static_cast<std::size_t>(i)]);
    return static_cast<double>(hits) / clean_test.size();
}

/// Attack success rate: fraction of triggered samples predicted as the
/// target label the triggered set carries.
inline double compute_asr(const ModelSpec& spec, const ModelParams& params,
                          const LabeledImageSet& triggered_test) {
    if (triggered_test.size() < 1) throw ContractError("compute_asr: empty triggered set");
    return compute_cta(spec, params, triggered_test);
}

namespace detail {

inline void mean_std(const std::vector<double>& xs, double& mean, double& std_out) {
    mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    std_out = std::sqrt(var / static_cast<double>(xs.size()));
}

}  // namespace detail

/// `repeats` independent downstream trainings with derived seeds. The
/// triggered set may be null when no attack is under evaluation.
inline EvalReport run_repeated(const LabeledImageSet& distilled,
                               const LabeledImageSet& clean_test,
                               const LabeledImageSet* triggered_test, const EvalConfig& cfg) {
    cfg.validate();
    const auto started = std::chrono::steady_clock::now();
    EvalReport report;
    report.downstream_arch = family_name(cfg.model.family);
    for (int run = 0; run < cfg.repeats; ++run) {
        const std::uint64_t run_seed = derive_seed(cfg.seed, "run", static_cast<std::uint64_t>(run));
        const ModelParams params = train_downstream(distilled, cfg, run_seed);
        report.cta_runs.push_back(compute_cta(cfg.model, params, clean_test));
        if (triggered_test)
            report.asr_runs.push_back(compute_asr(cfg.model, params, *triggered_test));
    }
    detail::mean_std(report.cta_runs, report.cta_mean, report.cta_std);
    if (!report.asr_runs.empty()) detail::mean_std(report.asr_runs, report.asr_mean, report.asr_std);
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return report;
}

/// Downstream evaluation under an architecture other than the one that
/// distilled the data. The report is labeled with both.
inline EvalReport cross_arch_eval(const LabeledImageSet& distilled,
                                  const LabeledImageSet& clean_test,
                                  const LabeledImageSet* triggered_test,
                                  const ModelSpec& distill_spec, const ModelSpec& downstream_spec,
                                  EvalConfig cfg) {
    if (downstream_spec.in_h != distill_spec.in_h || downstream_spec.in_w != distill_spec.in_w ||
        downstream_spec.in_c != distill_spec.in_c ||
        downstream_spec.num_classes != distill_spec.num_classes)
        throw ConfigError("cross_arch_eval: downstream input dims do not match the distilled data");
    cfg.model = downstream_spec;
    EvalReport report = run_repeated(distilled, clean_test, triggered_test, cfg);
    report.distill_arch = family_name(distill_spec.family);
    return report;
}

}  // namespace ddlab
