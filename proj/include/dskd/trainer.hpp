#pragma once

// Training loop: SGD over the distillation objective with a frozen teacher,
// multi-step LR schedule, per-epoch metrics CSV.

#include <cstdio>
#include <fstream>

#include "data.hpp"
#include "loss.hpp"
#include "model.hpp"
#include "optim.hpp"

namespace dskd {

enum class Method { student_only, kd, dsn, dskd };

inline std::string method_name(Method m) {
    switch (m) {
        case Method::student_only: return "student_only";
        case Method::kd: return "kd";
        case Method::dsn: return "dsn";
        case Method::dskd: return "dskd";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    if (s == "student_only") return Method::student_only;
    if (s == "kd") return Method::kd;
    if (s == "dsn") return Method::dsn;
    if (s == "dskd") return Method::dskd;
    throw std::invalid_argument("method: unknown value '" + s + "' (expected student_only|kd|dsn|dskd)");
}

struct EpochMetrics {
    int epoch = 0;
    double lr = 0.0;
    double ce = 0.0;
    double kd_last = 0.0;
    double kd_shallow = 0.0;
    double fea_last = 0.0;
    double fea_shallow = 0.0;
    double total = 0.0;
    double train_acc = 0.0;  // percent
    double test_acc = 0.0;   // percent
};

inline constexpr const char* kMetricsCsvHeader =
    "epoch,lr,ce,kd_last,kd_shallow,fea_last,fea_shallow,total,train_acc,test_acc";

namespace detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline int argmax_row(const std::vector<double>& data, int row, int K) {
    int best = 0;
    for (int k = 1; k < K; ++k)
        if (data[row * K + k] > data[row * K + best]) best = k;
    return best;
}

inline void check_finite(double v, const char* component) {
    if (!std::isfinite(v))
        throw std::runtime_error(std::string("non-finite loss: component '") + component + "' is " +
                                 std::to_string(v));
}

}  // namespace detail

// Head-L accuracy (percent) over a dataset, evaluated in minibatches.
inline double evaluate_accuracy(const StagedNetwork& net, const LabeledDataset& ds, int batch_size = 128) {
    int correct = 0;
    const int N = ds.size();
    for (int start = 0; start < N; start += batch_size) {
        const int n = std::min(batch_size, N - start);
        const auto& sh = ds.images.shape();
        const std::size_t px = static_cast<std::size_t>(sh[1]) * sh[2] * sh[3];
        std::vector<double> img(ds.images.data().begin() + start * px, ds.images.data().begin() + (start + n) * px);
        Tensor batch(Shape{n, sh[1], sh[2], sh[3]}, std::move(img));
        Tensor logits = forward_inference(net, batch);
        for (int i = 0; i < n; ++i)
            if (detail::argmax_row(logits.data(), i, ds.class_count) == ds.label_of(start + i)) ++correct;
    }
    return 100.0 * correct / N;
}

struct TrainResult {
    std::vector<EpochMetrics> history;
    double final_test_acc = 0.0;
};

inline void write_metrics_csv(const std::vector<EpochMetrics>& history, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_metrics_csv: cannot open " + path);
    out << kMetricsCsvHeader << "\n";
    for (const auto& m : history) {
        out << m.epoch << "," << detail::fmt_double(m.lr) << "," << detail::fmt_double(m.ce) << ","
            << detail::fmt_double(m.kd_last) << "," << detail::fmt_double(m.kd_shallow) << ","
            << detail::fmt_double(m.fea_last) << "," << detail::fmt_double(m.fea_shallow) << ","
            << detail::fmt_double(m.total) << "," << detail::fmt_double(m.train_acc) << ","
            << detail::fmt_double(m.test_acc) << "\n";
    }
}

// One seeded training run. teacher may be null for student_only and dsn.
// The teacher is used in evaluation role only: its parameters never receive
// updates and its outputs enter the loss as constants.
inline TrainResult run_training(StagedNetwork& student, const StagedNetwork* teacher, const LabeledDataset& train_set,
                                const LabeledDataset& test_set, Method method, DistillConfig cfg, const OptimSpec& optim,
                                int epochs, int batch_size, std::uint64_t shuffle_seed) {
    cfg.validate();
    optim.validate();
    if (epochs < 1) throw std::invalid_argument("run_training: epochs must be >= 1");
    if ((method == Method::kd || method == Method::dskd) && !teacher)
        throw std::invalid_argument("run_training: method '" + method_name(method) + "' requires a teacher");
    if (student.depth() < 2 && method == Method::dskd && cfg.enable_shallow_kd)
        throw std::invalid_argument("run_training: shallow losses need a student with L >= 2 stages");

    // Gating: kd is dskd with shallow and feature terms switched off.
    if (method == Method::kd) {
        cfg.enable_shallow_kd = false;
        cfg.enable_fea = false;
        cfg.enable_shallow_fea = false;
        cfg.beta = 0.0;
    }

    const bool use_teacher =
        (method == Method::kd || method == Method::dskd) && (cfg.alpha > 0.0 || (cfg.beta > 0.0 && cfg.enable_fea));
    const int teacher_dim = teacher ? teacher->heads.back().feature_dim : 0;

    // Materialize projections up front so the optimizer owns them from step 0.
    if (use_teacher && cfg.beta > 0.0 && cfg.enable_fea) {
        for (auto& head : student.heads)
            if (head.feature_dim != teacher_dim)
                project_feature(head, Tensor::zeros(Shape{1, head.feature_dim}), teacher_dim);
    }

    SgdOptimizer opt(student.parameters(), optim);

    TrainResult result;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        const double lr = optim.lr_at_epoch(epoch);
        EpochMetrics em;
        em.epoch = epoch;
        em.lr = lr;
        int train_correct = 0;
        int seen = 0;

        auto batches = batch_iter(train_set, batch_size, detail::mix_seed(shuffle_seed, 7000 + epoch));
        for (auto& [images, labels] : batches) {
            const int n = images.shape()[0];
            auto outs = forward_all_heads(student, images);
            const Tensor& final_logits = outs.back().logits;

            Tensor loss;
            DistillLossReport rep;
            if (method == Method::student_only) {
                loss = cross_entropy_onehot(final_logits, labels);
                rep.ce = loss.item();
            } else if (method == Method::dsn) {
                // deep supervision baseline: ground-truth CE at every head
                loss = cross_entropy_onehot(final_logits, labels);
                rep.ce = loss.item();
                for (std::size_t l = 0; l + 1 < outs.size(); ++l)
                    loss = add(loss, cross_entropy_onehot(outs[l].logits, labels));
            } else {
                HeadOutput t_out;
                if (use_teacher) {
                    auto t = forward_all_heads(*teacher, images);
                    t_out.logits = t.back().logits.detach();
                    t_out.feature = t.back().feature.detach();
                } else {
                    t_out.logits = Tensor::zeros(Shape{n, student.num_classes});
                    t_out.feature = Tensor::zeros(Shape{n, 1});
                }
                std::vector<Tensor> logits_list;
                std::vector<Tensor> feats;
                for (std::size_t l = 0; l < outs.size(); ++l) {
                    logits_list.push_back(outs[l].logits);
                    if (use_teacher && cfg.beta > 0.0 && cfg.enable_fea)
                        feats.push_back(project_feature(student.heads[l], outs[l].feature, teacher_dim));
                    else
                        feats.push_back(outs[l].feature);
                }
                rep = total_loss(labels, t_out, logits_list, feats, cfg);
                loss = rep.total;
            }

            detail::check_finite(rep.ce, "ce");
            detail::check_finite(rep.kd_last, "kd_last");
            detail::check_finite(rep.kd_shallow, "kd_shallow");
            detail::check_finite(rep.fea_last, "fea_last");
            detail::check_finite(rep.fea_shallow, "fea_shallow");
            detail::check_finite(loss.item(), "total");

            opt.zero_grad();
            backward(loss);
            opt.step(lr);

            em.ce += rep.ce * n;
            em.kd_last += rep.kd_last * n;
            em.kd_shallow += rep.kd_shallow * n;
            em.fea_last += rep.fea_last * n;
            em.fea_shallow += rep.fea_shallow * n;
            em.total += loss.item() * n;
            for (int i = 0; i < n; ++i) {
                const int pred = detail::argmax_row(final_logits.data(), i, student.num_classes);
                int truth = 0;
                for (int k = 0; k < student.num_classes; ++k)
                    if (labels.data()[i * student.num_classes + k] == 1.0) truth = k;
                if (pred == truth) ++train_correct;
            }
            seen += n;
        }

        em.ce /= seen;
        em.kd_last /= seen;
        em.kd_shallow /= seen;
        em.fea_last /= seen;
        em.fea_shallow /= seen;
        em.total /= seen;
        em.train_acc = 100.0 * train_correct / seen;
        em.test_acc = evaluate_accuracy(student, test_set);
        result.history.push_back(em);
    }
    result.final_test_acc = result.history.back().test_acc;
    return result;
}

}  // namespace dskd
