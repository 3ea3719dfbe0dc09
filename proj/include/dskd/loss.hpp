#pragma once

// Distillation losses: temperature-softened KL against the teacher at every
// head, feature MSE against the teacher's pooled feature, per-sample
// loss-based adaptive weights over the shallow heads, and the total
// objective. Weights are recomputed each batch from current loss values and
// treated as constants in differentiation (stop-gradient).

#include <set>

#include "model.hpp"
#include "tensor.hpp"

namespace dskd {

struct DistillConfig {
    double alpha = 1.0;
    double beta = 30.0;
    double temperature = 4.0;
    bool enable_shallow_kd = true;
    bool enable_fea = true;
    bool enable_shallow_fea = true;
    bool adaptive_weights = true;       // false => uniform 1/(L-1)
    double kd_grad_scale = 1.0;         // classical KD recipe would use tau^2
    std::set<int> shallow_positions;    // empty => all of 1..L-1

    void validate() const {
        if (temperature <= 0.0) throw std::invalid_argument("DistillConfig: temperature must be positive");
        if (alpha < 0.0) throw std::invalid_argument("DistillConfig: alpha must be nonnegative");
        if (beta < 0.0) throw std::invalid_argument("DistillConfig: beta must be nonnegative");
    }

    bool position_enabled(int l) const {
        return shallow_positions.empty() || shallow_positions.count(l) > 0;
    }
};

struct DistillLossReport {
    Tensor total;  // differentiable scalar
    double ce = 0.0;
    double kd_last = 0.0;
    double kd_shallow = 0.0;
    double fea_last = 0.0;
    double fea_shallow = 0.0;
    std::vector<std::vector<double>> kd_weights;   // N rows of L-1 weights
    std::vector<std::vector<double>> fea_weights;
};

namespace detail {

inline std::vector<double> soften_probs(const std::vector<double>& logits, int n, int K, double temperature) {
    std::vector<double> p(logits.size());
    for (int i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < K; ++k) mx = std::max(mx, logits[i * K + k] / temperature);
        double denom = 0.0;
        for (int k = 0; k < K; ++k) {
            p[i * K + k] = std::exp(logits[i * K + k] / temperature - mx);
            denom += p[i * K + k];
        }
        for (int k = 0; k < K; ++k) p[i * K + k] /= denom;
    }
    return p;
}

}  // namespace detail

// Per-sample KL(softmax(teacher/tau) || softmax(student/tau)), summed over
// classes. Differentiable w.r.t. the student logits only; the teacher side
// is held constant. grad_scale multiplies the backward pass only.
inline Tensor kl_softened(const Tensor& teacher_logits, const Tensor& student_logits, double temperature,
                          double grad_scale = 1.0) {
    if (temperature <= 0.0)
        throw std::invalid_argument("kl_softened: temperature must be positive, got " + std::to_string(temperature));
    if (teacher_logits.shape() != student_logits.shape() || teacher_logits.shape().size() != 2)
        throw std::invalid_argument("kl_softened: shape mismatch " + shape_str(teacher_logits.shape()) + " vs " +
                                    shape_str(student_logits.shape()));
    const int N = teacher_logits.shape()[0], K = teacher_logits.shape()[1];
    const std::vector<double> p = detail::soften_probs(teacher_logits.data(), N, K, temperature);
    const std::vector<double> q = detail::soften_probs(student_logits.data(), N, K, temperature);
    std::vector<double> out(N, 0.0);
    for (int i = 0; i < N; ++i) {
        double s = 0.0;
        for (int k = 0; k < K; ++k)
            if (p[i * K + k] > 0.0) s += p[i * K + k] * (std::log(p[i * K + k]) - std::log(q[i * K + k]));
        out[i] = std::max(s, 0.0);  // clamp tiny negative round-off
    }
    auto res = dskd::detail::make_result(Shape{N}, std::move(out), {student_logits.node()});
    if (res->requires_grad) {
        auto sn = student_logits.node();
        TensorNode* r = res.get();
        res->backward_fn = [r, sn, p, q, N, K, temperature, grad_scale] {
            sn->ensure_grad();
            for (int i = 0; i < N; ++i) {
                const double g = r->grad[i] * grad_scale / temperature;
                for (int k = 0; k < K; ++k) sn->grad[i * K + k] += g * (q[i * K + k] - p[i * K + k]);
            }
        };
    }
    return Tensor::from_node(res);
}

// Per-sample mean squared difference over the feature dimension. Teacher
// side constant; gradients flow into the student feature (and through it
// into the projection parameters).
inline Tensor mse_feature(const Tensor& teacher_feature, const Tensor& student_feature) {
    if (teacher_feature.shape() != student_feature.shape() || teacher_feature.shape().size() != 2)
        throw std::invalid_argument("mse_feature: shape mismatch " + shape_str(teacher_feature.shape()) + " vs " +
                                    shape_str(student_feature.shape()));
    const int N = teacher_feature.shape()[0], D = teacher_feature.shape()[1];
    std::vector<double> out(N, 0.0);
    for (int i = 0; i < N; ++i) {
        double s = 0.0;
        for (int d = 0; d < D; ++d) {
            const double diff = student_feature.data()[i * D + d] - teacher_feature.data()[i * D + d];
            s += diff * diff;
        }
        out[i] = s / D;
    }
    auto res = dskd::detail::make_result(Shape{N}, std::move(out), {student_feature.node()});
    if (res->requires_grad) {
        auto sn = student_feature.node();
        auto tdata = teacher_feature.data();
        TensorNode* r = res.get();
        res->backward_fn = [r, sn, tdata = std::move(tdata), N, D] {
            sn->ensure_grad();
            for (int i = 0; i < N; ++i) {
                const double g = 2.0 * r->grad[i] / D;
                for (int d = 0; d < D; ++d) sn->grad[i * D + d] += g * (sn->data[i * D + d] - tdata[i * D + d]);
            }
        };
    }
    return Tensor::from_node(res);
}

// Per-sample loss-ratio weights: w_l = loss_l / sum_j loss_j. All-zero rows
// fall back to uniform. Plain values in, plain values out; never part of
// the differentiation graph.
inline std::vector<std::vector<double>> adaptive_weights(const std::vector<std::vector<double>>& per_sample_losses) {
    std::vector<std::vector<double>> weights(per_sample_losses.size());
    for (std::size_t i = 0; i < per_sample_losses.size(); ++i) {
        const auto& row = per_sample_losses[i];
        if (row.empty()) throw std::invalid_argument("adaptive_weights: empty loss row");
        double total = 0.0;
        for (double v : row) {
            if (v < 0.0)
                throw std::invalid_argument("adaptive_weights: negative loss " + std::to_string(v) + " at sample " +
                                            std::to_string(i));
            total += v;
        }
        weights[i].resize(row.size());
        if (total > 0.0)
            for (std::size_t l = 0; l < row.size(); ++l) weights[i][l] = row[l] / total;
        else
            std::fill(weights[i].begin(), weights[i].end(), 1.0 / row.size());
    }
    return weights;
}

namespace detail {

struct ShallowTerm {
    Tensor loss;  // scalar
    std::vector<std::vector<double>> weights;
};

// Shared kernel of the two shallow losses: per-sample weighted combination
// of the L-1 per-head losses, averaged over the batch. Positions absent
// from the mask contribute nothing and are excluded from normalization;
// their reported weight is 0.
inline ShallowTerm weighted_shallow_loss(const std::vector<Tensor>& per_head_losses, const DistillConfig& cfg,
                                         const std::vector<std::vector<double>>* fixed_weights) {
    const int n_heads = static_cast<int>(per_head_losses.size());
    const int N = per_head_losses.empty() ? 0 : per_head_losses[0].shape()[0];

    std::vector<int> active;
    for (int l = 1; l <= n_heads; ++l)
        if (cfg.position_enabled(l)) active.push_back(l - 1);

    ShallowTerm term;
    term.weights.assign(N, std::vector<double>(n_heads, 0.0));
    if (active.empty()) {
        term.loss = Tensor::scalar(0.0);
        return term;
    }

    if (fixed_weights) {
        term.weights = *fixed_weights;
    } else if (cfg.adaptive_weights) {
        std::vector<std::vector<double>> rows(N, std::vector<double>(active.size()));
        for (int i = 0; i < N; ++i)
            for (std::size_t a = 0; a < active.size(); ++a) rows[i][a] = per_head_losses[active[a]].data()[i];
        auto w = adaptive_weights(rows);
        for (int i = 0; i < N; ++i)
            for (std::size_t a = 0; a < active.size(); ++a) term.weights[i][active[a]] = w[i][a];
    } else {
        for (int i = 0; i < N; ++i)
            for (int idx : active) term.weights[i][idx] = 1.0 / active.size();
    }

    Tensor acc = Tensor::scalar(0.0);
    for (int idx : active) {
        std::vector<double> coeffs(N);
        for (int i = 0; i < N; ++i) coeffs[i] = term.weights[i][idx] / N;
        acc = add(acc, dot_const(per_head_losses[idx], coeffs));
    }
    term.loss = acc;
    return term;
}

}  // namespace detail

struct KdLossResult {
    Tensor kd_last;     // scalar
    Tensor kd_shallow;  // scalar
    std::vector<std::vector<double>> kd_weights;  // N x (L-1)
};

// Class-prediction loss: batch-mean softened KL for the final head plus the
// adaptively weighted shallow sum. fixed_weights pins the stop-gradient
// weights externally (used by gradient-check oracles).
inline KdLossResult kd_loss(const Tensor& teacher_logits, const std::vector<Tensor>& head_logits,
                            const DistillConfig& cfg,
                            const std::vector<std::vector<double>>* fixed_weights = nullptr) {
    if (head_logits.empty()) throw std::invalid_argument("kd_loss: no heads");
    cfg.validate();
    const int L = static_cast<int>(head_logits.size());
    const int N = teacher_logits.shape()[0];

    KdLossResult res;
    res.kd_last = mean(kl_softened(teacher_logits, head_logits.back(), cfg.temperature, cfg.kd_grad_scale));

    const int n_shallow = L - 1;
    res.kd_weights.assign(N, std::vector<double>(std::max(n_shallow, 0), 0.0));
    if (n_shallow == 0 || !cfg.enable_shallow_kd) {
        res.kd_shallow = Tensor::scalar(0.0);
        if (n_shallow > 0)
            for (auto& row : res.kd_weights) std::fill(row.begin(), row.end(), 1.0 / n_shallow);
        return res;
    }

    std::vector<Tensor> per_head;
    per_head.reserve(n_shallow);
    for (int l = 0; l < n_shallow; ++l)
        per_head.push_back(kl_softened(teacher_logits, head_logits[l], cfg.temperature, cfg.kd_grad_scale));
    auto term = detail::weighted_shallow_loss(per_head, cfg, fixed_weights);
    res.kd_shallow = term.loss;
    res.kd_weights = std::move(term.weights);
    return res;
}

struct FeaLossResult {
    Tensor fea_last;
    Tensor fea_shallow;
    std::vector<std::vector<double>> fea_weights;
};

// Feature-map loss, structurally the KD loss with the MSE kernel. Inputs
// are already projected to the teacher's feature dimension.
inline FeaLossResult fea_loss(const Tensor& teacher_feature, const std::vector<Tensor>& head_features,
                              const DistillConfig& cfg,
                              const std::vector<std::vector<double>>* fixed_weights = nullptr) {
    if (head_features.empty()) throw std::invalid_argument("fea_loss: no heads");
    cfg.validate();
    const int L = static_cast<int>(head_features.size());
    const int N = teacher_feature.shape()[0];
    const int n_shallow = L - 1;

    FeaLossResult res;
    res.fea_weights.assign(N, std::vector<double>(std::max(n_shallow, 0), 0.0));
    if (n_shallow > 0)
        for (auto& row : res.fea_weights) std::fill(row.begin(), row.end(), 1.0 / n_shallow);

    if (!cfg.enable_fea) {
        res.fea_last = Tensor::scalar(0.0);
        res.fea_shallow = Tensor::scalar(0.0);
        return res;
    }
    res.fea_last = mean(mse_feature(teacher_feature, head_features.back()));
    if (n_shallow == 0 || !cfg.enable_shallow_fea) {
        res.fea_shallow = Tensor::scalar(0.0);
        return res;
    }
    std::vector<Tensor> per_head;
    per_head.reserve(n_shallow);
    for (int l = 0; l < n_shallow; ++l) per_head.push_back(mse_feature(teacher_feature, head_features[l]));
    auto term = detail::weighted_shallow_loss(per_head, cfg, fixed_weights);
    res.fea_shallow = term.loss;
    res.fea_weights = std::move(term.weights);
    return res;
}

// Batch-mean cross-entropy of logits against one-hot labels.
inline Tensor cross_entropy_onehot(const Tensor& logits, const Tensor& labels) {
    if (logits.shape() != labels.shape() || logits.shape().size() != 2)
        throw std::invalid_argument("cross_entropy: shape mismatch " + shape_str(logits.shape()) + " vs " +
                                    shape_str(labels.shape()));
    const int N = logits.shape()[0], K = logits.shape()[1];
    for (int i = 0; i < N; ++i) {
        int ones = 0;
        for (int k = 0; k < K; ++k) {
            const double v = labels.data()[i * K + k];
            if (v == 1.0) ++ones;
            else if (v != 0.0)
                throw std::invalid_argument("cross_entropy: labels not one-hot at sample " + std::to_string(i));
        }
        if (ones != 1)
            throw std::invalid_argument("cross_entropy: labels not one-hot at sample " + std::to_string(i));
    }
    const std::vector<double> p = detail::soften_probs(logits.data(), N, K, 1.0);
    double total = 0.0;
    for (int i = 0; i < N; ++i)
        for (int k = 0; k < K; ++k)
            if (labels.data()[i * K + k] == 1.0) total -= std::log(p[i * K + k]);
    auto res = dskd::detail::make_result(Shape{1}, {total / N}, {logits.node()});
    if (res->requires_grad) {
        auto zn = logits.node();
        auto ydata = labels.data();
        TensorNode* r = res.get();
        res->backward_fn = [r, zn, p, ydata = std::move(ydata), N, K] {
            zn->ensure_grad();
            const double g = r->grad[0] / N;
            for (int i = 0; i < N * K; ++i) zn->grad[i] += g * (p[i] - ydata[i]);
        };
    }
    return Tensor::from_node(res);
}

// L_total = CE + alpha * (KD_shallow + KD_last) + beta * (Fea_shallow + Fea_last).
// teacher_out carries the teacher's final-head feature and logits; student
// feature inputs must already be projected to the teacher dimension.
inline DistillLossReport total_loss(const Tensor& labels, const HeadOutput& teacher_out,
                                    const std::vector<Tensor>& student_logits,
                                    const std::vector<Tensor>& student_features_projected, const DistillConfig& cfg,
                                    const std::vector<std::vector<double>>* fixed_kd_weights = nullptr,
                                    const std::vector<std::vector<double>>* fixed_fea_weights = nullptr) {
    cfg.validate();
    DistillLossReport rep;
    Tensor ce = cross_entropy_onehot(student_logits.back(), labels);
    rep.ce = ce.item();
    Tensor total = ce;

    if (cfg.alpha > 0.0) {
        auto kd = kd_loss(teacher_out.logits, student_logits, cfg, fixed_kd_weights);
        rep.kd_last = kd.kd_last.item();
        rep.kd_shallow = kd.kd_shallow.item();
        rep.kd_weights = std::move(kd.kd_weights);
        total = add(total, scale(add(kd.kd_shallow, kd.kd_last), cfg.alpha));
    }
    if (cfg.beta > 0.0 && cfg.enable_fea) {
        auto fea = fea_loss(teacher_out.feature, student_features_projected, cfg, fixed_fea_weights);
        rep.fea_last = fea.fea_last.item();
        rep.fea_shallow = fea.fea_shallow.item();
        rep.fea_weights = std::move(fea.fea_weights);
        total = add(total, scale(add(fea.fea_shallow, fea.fea_last), cfg.beta));
    }
    rep.total = total;
    return rep;
}

}  // namespace dskd
