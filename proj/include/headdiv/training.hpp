// SPDX-License-Identifier: Apache-2.0
//
// Toy sequence-labelling model used to study head diversity under training.
// Embeddings plus fixed sinusoidal positions feed P residual attention layers
// followed by a per-frame linear classifier. The objective is per-frame
// cross-entropy plus lambda times the mean-over-layers diversity loss.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "headdiv/attention.hpp"
#include "headdiv/diversity.hpp"
#include "headdiv/matrix.hpp"
#include "headdiv/random.hpp"

namespace headdiv {

struct SyntheticTaskSpec {
    std::size_t seq_len = 24;
    std::size_t vocab = 16;
    std::vector<int> offsets = {-3, 2};
    std::size_t num_train = 2048;
    std::size_t num_eval = 128;

    void validate() const {
        if (seq_len < 1) throw std::invalid_argument("task.seq_len must be >= 1");
        if (vocab < 2) throw std::invalid_argument("task.vocab must be >= 2");
        if (offsets.empty()) throw std::invalid_argument("task.offsets must not be empty");
        for (int o : offsets)
            if (static_cast<std::size_t>(std::abs(o)) >= seq_len)
                throw std::invalid_argument("task.offsets: |" + std::to_string(o) + "| must be < seq_len");
        if (num_train < 1 || num_eval < 1) throw std::invalid_argument("task.num_train/num_eval must be >= 1");
    }
    bool operator==(const SyntheticTaskSpec&) const = default;
};

/// Labels equal to the vocabulary size mark frames whose source position
/// falls outside the sequence; they carry no target.
struct Example {
    std::vector<int> tokens;
    std::vector<int> labels;
};

struct Dataset {
    std::vector<Example> train;
    std::vector<Example> eval;
};

inline int reserved_label(const SyntheticTaskSpec& spec) { return static_cast<int>(spec.vocab); }

inline Example make_example(const SyntheticTaskSpec& spec, Rng& rng) {
    std::uniform_int_distribution<int> tok(0, static_cast<int>(spec.vocab) - 1);
    Example ex;
    ex.tokens.resize(spec.seq_len);
    for (int& t : ex.tokens) t = tok(rng);
    ex.labels.resize(spec.seq_len);
    const auto t_len = static_cast<long>(spec.seq_len);
    for (long t = 0; t < t_len; ++t) {
        const long src = t + spec.offsets[static_cast<std::size_t>(t) % spec.offsets.size()];
        ex.labels[t] = (src >= 0 && src < t_len) ? ex.tokens[src] : reserved_label(spec);
    }
    return ex;
}

inline Dataset generate_task(const SyntheticTaskSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng train_rng(mix_seed(seed, 101));
    Rng eval_rng(mix_seed(seed, 202));
    Dataset ds;
    ds.train.reserve(spec.num_train);
    for (std::size_t i = 0; i < spec.num_train; ++i) ds.train.push_back(make_example(spec, train_rng));
    ds.eval.reserve(spec.num_eval);
    for (std::size_t i = 0; i < spec.num_eval; ++i) ds.eval.push_back(make_example(spec, eval_rng));
    return ds;
}

struct TrainConfig {
    std::size_t layers = 3;
    std::size_t heads = 4;
    std::size_t model_dim = 32;
    std::size_t head_dim = 8;
    std::vector<HeadMechanism> mechanisms;  // empty: every head is full-context softmax
    std::optional<DiversityKind> diversity_kind;
    double lambda = 0.0;
    ScaleMode scale_mode = ScaleMode::paper;
    std::size_t steps = 3000;
    std::size_t batch_size = 16;
    double learning_rate = 0.05;
    std::uint64_t seed = 1;
    std::size_t log_every = 100;
    SyntheticTaskSpec task;

    HeadMechanism mechanism(std::size_t head) const {
        return mechanisms.empty() ? HeadMechanism{SoftmaxFull{}} : mechanisms[head];
    }

    void validate() const {
        if (heads < 1) throw std::invalid_argument("heads must be >= 1");
        if (model_dim < 1 || head_dim < 1) throw std::invalid_argument("model_dim and head_dim must be >= 1");
        if (!mechanisms.empty() && mechanisms.size() != heads)
            throw std::invalid_argument("mechanisms lists " + std::to_string(mechanisms.size()) +
                                        " entries for " + std::to_string(heads) + " heads");
        for (const auto& m : mechanisms)
            if (const auto* f = std::get_if<Favor>(&m); f && f->num_features < 1)
                throw std::invalid_argument("mechanisms: FAVOR features must be >= 1");
        if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("lambda must be >= 0");
        if (!diversity_kind && lambda != 0.0)
            throw std::invalid_argument("lambda must be 0 when diversity_kind is absent");
        if (steps < 1) throw std::invalid_argument("steps must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
            throw std::invalid_argument("learning_rate must be >= 0");
        if (log_every < 1) throw std::invalid_argument("log_every must be >= 1");
        task.validate();
    }
};

struct ModelParams {
    Matrix embed;                     // V x D
    std::vector<LayerParams> layers;  // P
    Matrix classifier;                // D x V
    Matrix positional;                // T x D, fixed
};

inline Matrix sinusoidal_positions(std::size_t t_len, std::size_t dim) {
    Matrix pos(t_len, dim);
    for (std::size_t t = 0; t < t_len; ++t)
        for (std::size_t i = 0; i < dim; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(dim));
            const double angle = static_cast<double>(t) * freq;
            pos(t, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    return pos;
}

/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] with fan_in = rows.
inline Matrix init_weight(std::size_t rows, std::size_t cols, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(rows));
    return uniform_matrix(rows, cols, -s, s, rng);
}

/// FAVOR projections of layer l are drawn from mix_seed(feature_seed, l) so
/// that equal mechanism entries in different layers get distinct features.
inline ModelParams init_model(const TrainConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    ModelParams p;
    p.embed = init_weight(cfg.task.vocab, cfg.model_dim, rng);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        LayerParams layer;
        for (std::size_t n = 0; n < cfg.heads; ++n) {
            HeadParams w{init_weight(cfg.model_dim, cfg.head_dim, rng), init_weight(cfg.model_dim, cfg.head_dim, rng),
                         init_weight(cfg.model_dim, cfg.head_dim, rng)};
            HeadMechanism mech = cfg.mechanism(n);
            if (auto* f = std::get_if<Favor>(&mech)) f->feature_seed = mix_seed(f->feature_seed, l);
            layer.heads.push_back(make_head(std::move(w), mech));
        }
        layer.w_out = init_weight(cfg.heads * cfg.head_dim, cfg.model_dim, rng);
        p.layers.push_back(std::move(layer));
    }
    p.classifier = init_weight(cfg.model_dim, cfg.task.vocab, rng);
    p.positional = sinusoidal_positions(cfg.task.seq_len, cfg.model_dim);
    return p;
}

/// Make every head of the layer a copy of head 0, including its block of w_out.
inline void clone_heads(LayerParams& layer) {
    const std::size_t h = layer.head_dim();
    for (std::size_t n = 1; n < layer.heads.size(); ++n) {
        layer.heads[n] = layer.heads[0];
        for (std::size_t j = 0; j < h; ++j)
            for (std::size_t c = 0; c < layer.w_out.cols(); ++c) layer.w_out(n * h + j, c) = layer.w_out(j, c);
    }
}

struct ModelForward {
    std::vector<Matrix> layer_inputs;  // P + 1 entries; the last is the classifier input
    std::vector<LayerOutput> layers;
    Matrix logits;                     // T x V
};

inline ModelForward model_forward(const ModelParams& params, const std::vector<int>& tokens, ScaleMode scale_mode,
                                  bool materialize_favor_a = false) {
    const std::size_t t_len = tokens.size();
    if (t_len > params.positional.rows())
        throw ShapeError("sequence of " + std::to_string(t_len) + " steps exceeds positional table " +
                         params.positional.shape());
    Matrix x(t_len, params.embed.cols());
    for (std::size_t t = 0; t < t_len; ++t) {
        const int tok = tokens[t];
        if (tok < 0 || static_cast<std::size_t>(tok) >= params.embed.rows())
            throw std::out_of_range("token id " + std::to_string(tok) + " outside vocabulary");
        auto e = params.embed.row(static_cast<std::size_t>(tok));
        auto pe = params.positional.row(t);
        auto xr = x.row(t);
        for (std::size_t j = 0; j < xr.size(); ++j) xr[j] = e[j] + pe[j];
    }
    ModelForward fw;
    fw.layer_inputs.reserve(params.layers.size() + 1);
    fw.layer_inputs.push_back(std::move(x));
    for (const auto& layer : params.layers) {
        LayerOutput out = layer_forward(fw.layer_inputs.back(), layer, scale_mode, materialize_favor_a);
        Matrix next = fw.layer_inputs.back() + out.y;
        fw.layers.push_back(std::move(out));
        fw.layer_inputs.push_back(std::move(next));
    }
    fw.logits = matmul(fw.layer_inputs.back(), params.classifier);
    return fw;
}

struct CrossEntropy {
    double value = 0.0;
    Matrix d_logits;
    std::size_t counted = 0;
    std::size_t correct = 0;
};

/// Mean over labelled frames; frames with the reserved label are skipped.
inline CrossEntropy cross_entropy(const Matrix& logits, const std::vector<int>& labels) {
    if (labels.size() != logits.rows()) throw ShapeError("cross_entropy: label count differs from frames");
    CrossEntropy ce;
    ce.d_logits = Matrix(logits.rows(), logits.cols());
    const Matrix p = row_softmax(logits);
    for (std::size_t t = 0; t < logits.rows(); ++t) {
        const int lab = labels[t];
        if (lab < 0 || static_cast<std::size_t>(lab) >= logits.cols()) continue;
        ++ce.counted;
        auto row = logits.row(t);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) z += std::exp(v - mx);
        ce.value += std::log(z) - (row[lab] - mx);
        const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        if (best == static_cast<std::size_t>(lab)) ++ce.correct;
    }
    if (ce.counted == 0) return ce;
    const double inv = 1.0 / static_cast<double>(ce.counted);
    ce.value *= inv;
    for (std::size_t t = 0; t < logits.rows(); ++t) {
        const int lab = labels[t];
        if (lab < 0 || static_cast<std::size_t>(lab) >= logits.cols()) continue;
        auto pr = p.row(t);
        auto dr = ce.d_logits.row(t);
        for (std::size_t j = 0; j < pr.size(); ++j) dr[j] = pr[j] * inv;
        dr[lab] -= inv;
    }
    return ce;
}

struct TotalLoss {
    double value = 0.0;
    double task = 0.0;
    double diversity = 0.0;  // mean over layers, 0 when no kind is selected
    Matrix d_logits;
    std::vector<std::vector<TraceGrad>> trace_grads;  // per layer, empty when lambda == 0
    CrossEntropy ce;
};

inline TotalLoss total_loss(const ModelForward& fw, const std::vector<int>& labels,
                            std::optional<DiversityKind> kind, double lambda) {
    if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
    TotalLoss out;
    out.ce = cross_entropy(fw.logits, labels);
    out.task = out.ce.value;
    out.d_logits = out.ce.d_logits;
    if (kind && !fw.layers.empty()) {
        const bool need_grads = lambda > 0.0;
        const double inv_layers = 1.0 / static_cast<double>(fw.layers.size());
        double acc = 0.0;
        for (const auto& layer : fw.layers) {
            DiversityLoss d = layer_diversity(layer.traces, *kind, need_grads);
            acc += d.loss;
            if (need_grads) out.trace_grads.push_back(to_trace_grads(d.grads, *kind, lambda * inv_layers));
        }
        out.diversity = acc * inv_layers;
    }
    out.value = out.task + lambda * out.diversity;
    return out;
}

struct ModelGrads {
    Matrix embed;
    std::vector<LayerGrads> layers;
    Matrix classifier;
};

inline ModelGrads zero_grads(const ModelParams& p) {
    ModelGrads g;
    g.embed = Matrix(p.embed.rows(), p.embed.cols());
    for (const auto& layer : p.layers) {
        LayerGrads lg;
        for (const auto& h : layer.heads)
            lg.heads.push_back({Matrix(h.weights.w_query.rows(), h.weights.w_query.cols()),
                                Matrix(h.weights.w_key.rows(), h.weights.w_key.cols()),
                                Matrix(h.weights.w_value.rows(), h.weights.w_value.cols())});
        lg.w_out = Matrix(layer.w_out.rows(), layer.w_out.cols());
        g.layers.push_back(std::move(lg));
    }
    g.classifier = Matrix(p.classifier.rows(), p.classifier.cols());
    return g;
}

/// acc += weight * g, parameter by parameter.
inline void accumulate(ModelGrads& acc, const ModelGrads& g, double weight) {
    acc.embed += g.embed * weight;
    acc.classifier += g.classifier * weight;
    for (std::size_t l = 0; l < acc.layers.size(); ++l) {
        acc.layers[l].w_out += g.layers[l].w_out * weight;
        for (std::size_t n = 0; n < acc.layers[l].heads.size(); ++n) {
            acc.layers[l].heads[n].w_query += g.layers[l].heads[n].w_query * weight;
            acc.layers[l].heads[n].w_key += g.layers[l].heads[n].w_key * weight;
            acc.layers[l].heads[n].w_value += g.layers[l].heads[n].w_value * weight;
        }
    }
}

inline ModelGrads model_backward(const ModelParams& params, const std::vector<int>& tokens, const ModelForward& fw,
                                 const TotalLoss& loss, ScaleMode scale_mode) {
    ModelGrads g;
    g.classifier = matmul_tn(fw.layer_inputs.back(), loss.d_logits);
    Matrix dx = matmul_nt(loss.d_logits, params.classifier);
    g.layers.resize(params.layers.size());
    for (std::size_t li = params.layers.size(); li-- > 0;) {
        std::span<const TraceGrad> extra;
        if (!loss.trace_grads.empty()) extra = loss.trace_grads[li];
        LayerBackward lb =
            layer_backward(dx, fw.layer_inputs[li], params.layers[li], fw.layers[li].traces, scale_mode, extra);
        dx += lb.d_x;
        g.layers[li] = std::move(lb.grads);
    }
    g.embed = Matrix(params.embed.rows(), params.embed.cols());
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        auto dst = g.embed.row(static_cast<std::size_t>(tokens[t]));
        auto src = dx.row(t);
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
    return g;
}

inline void sgd_step(ModelParams& p, const ModelGrads& g, double lr) {
    p.embed -= g.embed * lr;
    p.classifier -= g.classifier * lr;
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        p.layers[l].w_out -= g.layers[l].w_out * lr;
        for (std::size_t n = 0; n < p.layers[l].heads.size(); ++n) {
            auto& w = p.layers[l].heads[n].weights;
            w.w_query -= g.layers[l].heads[n].w_query * lr;
            w.w_key -= g.layers[l].heads[n].w_key * lr;
            w.w_value -= g.layers[l].heads[n].w_value * lr;
        }
    }
}

struct BatchResult {
    double value = 0.0;
    double task = 0.0;
    double diversity = 0.0;
    ModelGrads grads;
};

/// Batch mean of the total loss and its gradient; sequences reduced in index order.
inline BatchResult batch_loss_and_grads(const ModelParams& params, const std::vector<const Example*>& batch,
                                        std::optional<DiversityKind> kind, double lambda, ScaleMode scale_mode) {
    BatchResult r;
    r.grads = zero_grads(params);
    const double w = 1.0 / static_cast<double>(batch.size());
    const bool materialize = kind == DiversityKind::attention;
    for (const Example* ex : batch) {
        ModelForward fw = model_forward(params, ex->tokens, scale_mode, materialize);
        TotalLoss tl = total_loss(fw, ex->labels, kind, lambda);
        r.value += tl.value * w;
        r.task += tl.task * w;
        r.diversity += tl.diversity * w;
        accumulate(r.grads, model_backward(params, ex->tokens, fw, tl, scale_mode), w);
    }
    return r;
}

struct Evaluation {
    double task_loss = 0.0;
    double accuracy = 0.0;
    DiversityReport report;
};

/// Cross-entropy, frame accuracy and all five diversity kinds on a set of
/// sequences. Per-sequence diversity values and similarity matrices are
/// averaged with equal weights.
inline Evaluation evaluate(const ModelParams& params, const std::vector<Example>& set, ScaleMode scale_mode) {
    Evaluation ev;
    const std::size_t n_layers = params.layers.size();
    ev.report.per_layer.resize(n_layers);
    for (std::size_t l = 0; l < n_layers; ++l)
        for (auto k : kAllKinds)
            ev.report.per_layer[l].similarity[index_of(k)] =
                Matrix(params.layers[l].num_heads(), params.layers[l].num_heads());
    std::size_t counted = 0;
    std::size_t correct = 0;
    const double w = 1.0 / static_cast<double>(set.size());
    for (const auto& ex : set) {
        ModelForward fw = model_forward(params, ex.tokens, scale_mode, true);
        CrossEntropy ce = cross_entropy(fw.logits, ex.labels);
        ev.task_loss += ce.value * w;
        counted += ce.counted;
        correct += ce.correct;
        for (std::size_t l = 0; l < n_layers; ++l)
            for (auto k : kAllKinds) {
                DiversityLoss d = layer_diversity(fw.layers[l].traces, k, false);
                ev.report.per_layer[l][k] += d.loss * w;
                ev.report.per_layer[l].similarity[index_of(k)] += d.similarity * w;
            }
    }
    ev.accuracy = counted ? static_cast<double>(correct) / static_cast<double>(counted) : 0.0;
    return ev;
}

enum class ParamKind { query, key, value };

/// Per-layer, per-head gradients of the batch-mean task loss w.r.t. one projection kind.
inline std::vector<std::vector<Matrix>> capture_head_gradients(const ModelParams& params,
                                                               const std::vector<const Example*>& batch,
                                                               ParamKind kind, ScaleMode scale_mode) {
    BatchResult r = batch_loss_and_grads(params, batch, std::nullopt, 0.0, scale_mode);
    std::vector<std::vector<Matrix>> out;
    for (const auto& layer : r.grads.layers) {
        std::vector<Matrix> heads;
        for (const auto& h : layer.heads)
            heads.push_back(kind == ParamKind::query ? h.w_query : kind == ParamKind::key ? h.w_key : h.w_value);
        out.push_back(std::move(heads));
    }
    return out;
}

struct MetricRow {
    std::size_t step = 0;
    double task_loss = 0.0;
    std::array<double, 5> diversity{};  // summed over layers, indexed by DiversityKind
    double eval_accuracy = 0.0;
};

struct RunArtifacts {
    TrainConfig config;
    std::vector<MetricRow> metrics;
    DiversityReport report;
    double grad_similarity = 0.0;
    ModelParams params;
};

class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(std::size_t step, double value)
        : std::runtime_error("training diverged at step " + std::to_string(step) + " (loss " +
                             std::to_string(value) + ")"),
          step_(step) {}
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

/// The first batch_size evaluation sequences, used for gradient-similarity probes.
inline std::vector<const Example*> held_out_batch(const Dataset& ds, std::size_t batch_size) {
    std::vector<const Example*> b;
    for (std::size_t i = 0; i < std::min(batch_size, ds.eval.size()); ++i) b.push_back(&ds.eval[i]);
    return b;
}

/// Full training run. Metrics are logged at step 0 and every log_every steps;
/// the final step is always logged.
inline RunArtifacts train(const TrainConfig& cfg) {
    cfg.validate();
    const Dataset ds = generate_task(cfg.task, cfg.seed);
    RunArtifacts run;
    run.config = cfg;
    run.params = init_model(cfg, mix_seed(cfg.seed, 1));
    Rng batch_rng(mix_seed(cfg.seed, 2));
    std::uniform_int_distribution<std::size_t> pick(0, ds.train.size() - 1);

    auto log_metrics = [&](std::size_t step) -> Evaluation {
        Evaluation ev = evaluate(run.params, ds.eval, cfg.scale_mode);
        MetricRow row;
        row.step = step;
        row.task_loss = ev.task_loss;
        for (auto k : kAllKinds) row.diversity[index_of(k)] = ev.report.total(k);
        row.eval_accuracy = ev.accuracy;
        run.metrics.push_back(row);
        return ev;
    };

    log_metrics(0);
    std::vector<const Example*> batch(cfg.batch_size);
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        for (auto& e : batch) e = &ds.train[pick(batch_rng)];
        BatchResult r = batch_loss_and_grads(run.params, batch, cfg.diversity_kind, cfg.lambda, cfg.scale_mode);
        if (!std::isfinite(r.value)) throw TrainingDiverged(step, r.value);
        sgd_step(run.params, r.grads, cfg.learning_rate);
        if (step % cfg.log_every == 0 && step != cfg.steps) log_metrics(step);
    }
    run.report = log_metrics(cfg.steps).report;
    if (!std::isfinite(run.metrics.back().task_loss)) throw TrainingDiverged(cfg.steps, run.metrics.back().task_loss);
    if (cfg.layers > 0)
        run.grad_similarity = grad_similarity_loss(capture_head_gradients(
            run.params, held_out_batch(ds, cfg.batch_size), ParamKind::query, cfg.scale_mode));
    return run;
}

}  // namespace headdiv
