#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dskd/loss.hpp"
#include "dskd/model.hpp"
#include "fd_check.hpp"

using namespace dskd;
using dskd_test::random_vector;

namespace oracle {

// straight-line scalar arithmetic, independent of the library path

std::vector<double> softmax_row(const std::vector<double>& z, double tau) {
    std::vector<double> p(z.size());
    double denom = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) denom += std::exp(z[k] / tau);
    for (std::size_t k = 0; k < z.size(); ++k) p[k] = std::exp(z[k] / tau) / denom;
    return p;
}

double kl_row(const std::vector<double>& t, const std::vector<double>& s, double tau) {
    auto p = softmax_row(t, tau), q = softmax_row(s, tau);
    double kl = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) kl += p[k] * std::log(p[k] / q[k]);
    return kl;
}

double mse_row(const std::vector<double>& t, const std::vector<double>& s) {
    double acc = 0.0;
    for (std::size_t d = 0; d < t.size(); ++d) acc += (s[d] - t[d]) * (s[d] - t[d]);
    return acc / t.size();
}

double ce_row(const std::vector<double>& z, int label) {
    auto p = softmax_row(z, 1.0);
    return -std::log(p[label]);
}

std::vector<double> row_of(const Tensor& t, int i) {
    const int K = t.shape()[1];
    return std::vector<double>(t.data().begin() + i * K, t.data().begin() + (i + 1) * K);
}

}  // namespace oracle

TEST_CASE("kl_softened basics") {
    Tensor z(Shape{2, 3}, {1, 2, 3, -1, 0, 1});
    Tensor per = kl_softened(z, z, 4.0);
    for (double v : per.data()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));

    Tensor t(Shape{1, 2}, {10, 0});
    Tensor s(Shape{1, 2}, {0, 10});
    const double got = kl_softened(t, s, 1.0).data()[0];
    CHECK(got == doctest::Approx(oracle::kl_row({10, 0}, {0, 10}, 1.0)).epsilon(1e-12));

    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor a(Shape{3, 4}, random_vector(12, rng, 5.0));
        Tensor b(Shape{3, 4}, random_vector(12, rng, 5.0));
        Tensor per = kl_softened(a, b, 2.0);
        for (double v : per.data()) CHECK(v >= 0.0);
    }

    CHECK_THROWS_AS(kl_softened(t, Tensor(Shape{1, 3}, {0, 0, 0}), 1.0), std::invalid_argument);
    CHECK_THROWS_AS(kl_softened(t, s, 0.0), std::invalid_argument);
}

TEST_CASE("kl_softened differentiates the student side only") {
    std::mt19937_64 rng(18);
    Tensor t(Shape{2, 3}, random_vector(6, rng), true);
    Tensor s(Shape{2, 3}, random_vector(6, rng), true);
    backward(sum(kl_softened(t, s, 3.0)));
    for (double g : t.grad()) CHECK(g == 0.0);
    bool any = false;
    for (double g : s.grad()) any = any || g != 0.0;
    CHECK(any);
}

TEST_CASE("kl_softened gradient matches finite differences") {
    std::mt19937_64 rng(19);
    Tensor t(Shape{2, 4}, random_vector(8, rng, 2.0));
    Tensor s(Shape{2, 4}, random_vector(8, rng, 2.0), true);
    auto rep = dskd_test::check_gradients({s}, [&] { return sum(kl_softened(t, s, 4.0)); });
    CHECK(rep.max_rel_error < 1e-5);
}

TEST_CASE("mse_feature") {
    Tensor t(Shape{2, 4}, std::vector<double>(8, 0.3));
    CHECK(mse_feature(t, t).data() == std::vector<double>{0, 0});

    Tensor zeros(Shape{1, 4}, std::vector<double>(4, 0.0));
    Tensor ones(Shape{1, 4}, std::vector<double>(4, 1.0));
    CHECK(mse_feature(zeros, ones).data()[0] == doctest::Approx(1.0));

    std::mt19937_64 rng(23);
    Tensor a(Shape{3, 5}, random_vector(15, rng));
    Tensor b(Shape{3, 5}, random_vector(15, rng));
    Tensor per = mse_feature(a, b);
    for (int i = 0; i < 3; ++i)
        CHECK(per.data()[i] == doctest::Approx(oracle::mse_row(oracle::row_of(a, i), oracle::row_of(b, i)))
                                   .epsilon(1e-12));

    CHECK_THROWS_AS(mse_feature(a, Tensor(Shape{3, 4}, std::vector<double>(12))), std::invalid_argument);
}

TEST_CASE("adaptive_weights") {
    auto w = adaptive_weights({{1, 3}});
    CHECK(w[0][0] == doctest::Approx(0.25));
    CHECK(w[0][1] == doctest::Approx(0.75));

    for (double c : {0.5, 2.0, 100.0}) {
        auto eq = adaptive_weights({{c, c}});
        CHECK(eq[0][0] == doctest::Approx(0.5));
        CHECK(eq[0][1] == doctest::Approx(0.5));
    }

    auto fallback = adaptive_weights({{0, 0}});
    CHECK(fallback[0][0] == doctest::Approx(0.5));
    CHECK(fallback[0][1] == doctest::Approx(0.5));

    CHECK_THROWS_AS(adaptive_weights({{1, -0.5}}), std::invalid_argument);
}

TEST_CASE("adaptive_weights properties on random nonnegative inputs") {
    std::mt19937_64 rng(29);
    std::uniform_real_distribution<double> unif(0.0, 10.0);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 1 + static_cast<int>(rng() % 8);
        const int heads = 2 + static_cast<int>(rng() % 3);
        std::vector<std::vector<double>> losses(n, std::vector<double>(heads));
        for (auto& row : losses)
            for (auto& v : row) v = unif(rng);
        auto w = adaptive_weights(losses);
        for (int i = 0; i < n; ++i) {
            double s = 0.0;
            for (int l = 0; l < heads; ++l) {
                CHECK(w[i][l] >= 0.0);
                s += w[i][l];
            }
            CHECK(std::abs(s - 1.0) < 1e-9);
            // monotonicity: larger loss, strictly larger weight
            for (int a = 0; a < heads; ++a)
                for (int b = 0; b < heads; ++b)
                    if (losses[i][a] > losses[i][b]) CHECK(w[i][a] > w[i][b]);
        }
    }
}

TEST_CASE("kd_loss against brute-force scalar oracle") {
    // hand-built L=3, N=2, K=2 instance
    Tensor teacher(Shape{2, 2}, {2.0, -1.0, 0.5, 0.5});
    std::vector<Tensor> heads = {Tensor(Shape{2, 2}, {1.0, 0.0, -0.5, 1.5}),
                                 Tensor(Shape{2, 2}, {0.0, 2.0, 1.0, -1.0}),
                                 Tensor(Shape{2, 2}, {1.5, -0.5, 0.2, 0.8})};
    DistillConfig cfg;
    cfg.temperature = 4.0;
    auto res = kd_loss(teacher, heads, cfg);

    double expect_last = 0.0;
    double expect_shallow = 0.0;
    for (int i = 0; i < 2; ++i) {
        const auto t = oracle::row_of(teacher, i);
        const double kl1 = oracle::kl_row(t, oracle::row_of(heads[0], i), 4.0);
        const double kl2 = oracle::kl_row(t, oracle::row_of(heads[1], i), 4.0);
        const double w1 = kl1 / (kl1 + kl2), w2 = kl2 / (kl1 + kl2);
        expect_shallow += w1 * kl1 + w2 * kl2;
        expect_last += oracle::kl_row(t, oracle::row_of(heads[2], i), 4.0);
        CHECK(res.kd_weights[i][0] == doctest::Approx(w1).epsilon(1e-12));
        CHECK(res.kd_weights[i][1] == doctest::Approx(w2).epsilon(1e-12));
    }
    CHECK(res.kd_last.item() == doctest::Approx(expect_last / 2).epsilon(1e-10));
    CHECK(res.kd_shallow.item() == doctest::Approx(expect_shallow / 2).epsilon(1e-10));
}

TEST_CASE("kd_loss gates and degenerate cases") {
    Tensor teacher(Shape{1, 2}, {1.0, -1.0});
    std::vector<Tensor> equal = {teacher.detach(), teacher.detach(), teacher.detach()};
    DistillConfig cfg;
    auto res = kd_loss(teacher, equal, cfg);
    CHECK(res.kd_last.item() == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(res.kd_shallow.item() == doctest::Approx(0.0).epsilon(1e-12));

    // L=2: the single aux head carries weight 1
    std::vector<Tensor> two = {Tensor(Shape{1, 2}, {0.0, 1.0}), Tensor(Shape{1, 2}, {1.0, 0.0})};
    auto res2 = kd_loss(teacher, two, cfg);
    CHECK(res2.kd_weights[0][0] == doctest::Approx(1.0));
    CHECK(res2.kd_shallow.item() ==
          doctest::Approx(oracle::kl_row({1.0, -1.0}, {0.0, 1.0}, cfg.temperature)).epsilon(1e-10));

    cfg.enable_shallow_kd = false;
    auto gated = kd_loss(teacher, two, cfg);
    CHECK(gated.kd_shallow.item() == 0.0);
    CHECK(gated.kd_weights[0][0] == doctest::Approx(1.0));  // reported uniform
}

TEST_CASE("fea_loss against brute-force scalar oracle and gates") {
    std::mt19937_64 rng(31);
    Tensor teacher(Shape{2, 3}, random_vector(6, rng));
    std::vector<Tensor> feats = {Tensor(Shape{2, 3}, random_vector(6, rng)),
                                 Tensor(Shape{2, 3}, random_vector(6, rng)),
                                 Tensor(Shape{2, 3}, random_vector(6, rng))};
    DistillConfig cfg;
    auto res = fea_loss(teacher, feats, cfg);

    double expect_last = 0.0, expect_shallow = 0.0;
    for (int i = 0; i < 2; ++i) {
        const auto t = oracle::row_of(teacher, i);
        const double m1 = oracle::mse_row(t, oracle::row_of(feats[0], i));
        const double m2 = oracle::mse_row(t, oracle::row_of(feats[1], i));
        expect_shallow += (m1 * m1 + m2 * m2) / (m1 + m2);
        expect_last += oracle::mse_row(t, oracle::row_of(feats[2], i));
    }
    CHECK(res.fea_last.item() == doctest::Approx(expect_last / 2).epsilon(1e-10));
    CHECK(res.fea_shallow.item() == doctest::Approx(expect_shallow / 2).epsilon(1e-10));

    std::vector<Tensor> same = {teacher.detach(), teacher.detach(), teacher.detach()};
    auto zero = fea_loss(teacher, same, cfg);
    CHECK(zero.fea_last.item() == 0.0);
    CHECK(zero.fea_shallow.item() == 0.0);

    cfg.enable_fea = false;
    auto gated = fea_loss(teacher, feats, cfg);
    CHECK(gated.fea_last.item() == 0.0);
    CHECK(gated.fea_shallow.item() == 0.0);
    CHECK(gated.fea_weights[0][0] == doctest::Approx(0.5));
}

TEST_CASE("cross entropy rejects non-one-hot labels") {
    Tensor logits(Shape{1, 3}, {1, 2, 3});
    CHECK_THROWS_AS(cross_entropy_onehot(logits, Tensor(Shape{1, 3}, {0.5, 0.5, 0})), std::invalid_argument);
    CHECK_THROWS_AS(cross_entropy_onehot(logits, Tensor(Shape{1, 3}, {1, 1, 0})), std::invalid_argument);
    CHECK_THROWS_AS(cross_entropy_onehot(logits, Tensor(Shape{1, 3}, {0, 0, 0})), std::invalid_argument);
}

namespace {

struct TinyInstance {
    Tensor labels;
    HeadOutput teacher;
    std::vector<Tensor> logits;
    std::vector<Tensor> feats;
};

TinyInstance make_tiny(std::uint64_t seed, bool student_grads = false) {
    std::mt19937_64 rng(seed);
    TinyInstance t;
    t.labels = Tensor(Shape{2, 3}, {1, 0, 0, 0, 0, 1});
    t.teacher.logits = Tensor(Shape{2, 3}, random_vector(6, rng, 2.0));
    t.teacher.feature = Tensor(Shape{2, 4}, random_vector(8, rng));
    for (int l = 0; l < 3; ++l) {
        t.logits.push_back(Tensor(Shape{2, 3}, random_vector(6, rng, 2.0), student_grads));
        t.feats.push_back(Tensor(Shape{2, 4}, random_vector(8, rng), student_grads));
    }
    return t;
}

}  // namespace

TEST_CASE("total_loss assembles the objective") {
    auto t = make_tiny(40);
    DistillConfig cfg;
    cfg.alpha = 1.0;
    cfg.beta = 30.0;
    cfg.temperature = 4.0;
    auto rep = total_loss(t.labels, t.teacher, t.logits, t.feats, cfg);

    // end-to-end scalar oracle
    double ce = 0.0, kd_last = 0.0, kd_shallow = 0.0, fea_last = 0.0, fea_shallow = 0.0;
    for (int i = 0; i < 2; ++i) {
        const auto tz = oracle::row_of(t.teacher.logits, i);
        const auto tf = oracle::row_of(t.teacher.feature, i);
        ce += oracle::ce_row(oracle::row_of(t.logits[2], i), i == 0 ? 0 : 2);
        kd_last += oracle::kl_row(tz, oracle::row_of(t.logits[2], i), 4.0);
        const double kl1 = oracle::kl_row(tz, oracle::row_of(t.logits[0], i), 4.0);
        const double kl2 = oracle::kl_row(tz, oracle::row_of(t.logits[1], i), 4.0);
        kd_shallow += (kl1 * kl1 + kl2 * kl2) / (kl1 + kl2);
        fea_last += oracle::mse_row(tf, oracle::row_of(t.feats[2], i));
        const double m1 = oracle::mse_row(tf, oracle::row_of(t.feats[0], i));
        const double m2 = oracle::mse_row(tf, oracle::row_of(t.feats[1], i));
        fea_shallow += (m1 * m1 + m2 * m2) / (m1 + m2);
    }
    ce /= 2; kd_last /= 2; kd_shallow /= 2; fea_last /= 2; fea_shallow /= 2;

    CHECK(rep.ce == doctest::Approx(ce).epsilon(1e-10));
    CHECK(rep.kd_last == doctest::Approx(kd_last).epsilon(1e-10));
    CHECK(rep.kd_shallow == doctest::Approx(kd_shallow).epsilon(1e-10));
    CHECK(rep.fea_last == doctest::Approx(fea_last).epsilon(1e-10));
    CHECK(rep.fea_shallow == doctest::Approx(fea_shallow).epsilon(1e-10));
    const double expect_total = ce + cfg.alpha * (kd_shallow + kd_last) + cfg.beta * (fea_shallow + fea_last);
    CHECK(rep.total.item() == doctest::Approx(expect_total).epsilon(1e-10));

    // report invariant
    CHECK(std::abs(rep.total.item() -
                   (rep.ce + cfg.alpha * (rep.kd_shallow + rep.kd_last) + cfg.beta * (rep.fea_shallow + rep.fea_last))) <
          1e-10);
    for (const auto& row : rep.kd_weights) CHECK(std::abs(row[0] + row[1] - 1.0) < 1e-9);
    for (const auto& row : rep.fea_weights) CHECK(std::abs(row[0] + row[1] - 1.0) < 1e-9);
}

TEST_CASE("total_loss gate contracts") {
    auto t = make_tiny(41);
    DistillConfig cfg;
    cfg.alpha = 0.0;
    cfg.beta = 0.0;
    auto rep = total_loss(t.labels, t.teacher, t.logits, t.feats, cfg);
    CHECK(rep.total.item() == rep.ce);

    // vanilla KD: CE + alpha * softened KL at the final head
    DistillConfig kd_cfg;
    kd_cfg.alpha = 0.7;
    kd_cfg.beta = 0.0;
    kd_cfg.enable_shallow_kd = false;
    auto kd_rep = total_loss(t.labels, t.teacher, t.logits, t.feats, kd_cfg);
    double ce = 0.0, kd_last = 0.0;
    for (int i = 0; i < 2; ++i) {
        ce += oracle::ce_row(oracle::row_of(t.logits[2], i), i == 0 ? 0 : 2);
        kd_last += oracle::kl_row(oracle::row_of(t.teacher.logits, i), oracle::row_of(t.logits[2], i),
                                  kd_cfg.temperature);
    }
    CHECK(kd_rep.total.item() == doctest::Approx(ce / 2 + 0.7 * kd_last / 2).epsilon(1e-12));
}

TEST_CASE("vanilla KD reduction on random instances") {
    std::mt19937_64 rng(47);
    for (int trial = 0; trial < 100; ++trial) {
        auto t = make_tiny(1000 + trial);
        DistillConfig cfg;
        cfg.alpha = 0.5 + 0.01 * trial;
        cfg.beta = 0.0;
        cfg.enable_shallow_kd = false;
        auto rep = total_loss(t.labels, t.teacher, t.logits, t.feats, cfg);
        double ce = 0.0, kd = 0.0;
        for (int i = 0; i < 2; ++i) {
            ce += oracle::ce_row(oracle::row_of(t.logits[2], i), i == 0 ? 0 : 2);
            kd += oracle::kl_row(oracle::row_of(t.teacher.logits, i), oracle::row_of(t.logits[2], i), cfg.temperature);
        }
        CHECK(std::abs(rep.total.item() - (ce / 2 + cfg.alpha * kd / 2)) < 1e-12);
    }
}

TEST_CASE("loss gradients match finite differences with weights held constant") {
    auto t = make_tiny(51, true);
    DistillConfig cfg;
    cfg.alpha = 1.0;
    cfg.beta = 30.0;

    // freeze the stop-gradient weights at the base point
    auto base = total_loss(t.labels, t.teacher, t.logits, t.feats, cfg);
    const auto kd_w = base.kd_weights;
    const auto fea_w = base.fea_weights;

    std::vector<Tensor> leaves;
    for (auto& x : t.logits) leaves.push_back(x);
    for (auto& x : t.feats) leaves.push_back(x);
    auto rep = dskd_test::check_gradients(leaves, [&] {
        return total_loss(t.labels, t.teacher, t.logits, t.feats, cfg, &kd_w, &fea_w).total;
    });
    CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("no gradient reaches the teacher") {
    auto t = make_tiny(52, true);
    Tensor t_logits(t.teacher.logits.shape(), t.teacher.logits.data(), true);
    Tensor t_feature(t.teacher.feature.shape(), t.teacher.feature.data(), true);
    HeadOutput teacher{t_feature, t_logits};
    DistillConfig cfg;
    auto rep = total_loss(t.labels, teacher, t.logits, t.feats, cfg);
    backward(rep.total);
    for (double g : t_logits.grad()) CHECK(g == 0.0);
    for (double g : t_feature.grad()) CHECK(g == 0.0);
}

TEST_CASE("shallow position mask restricts the shallow sums") {
    auto t = make_tiny(53);
    DistillConfig cfg;
    cfg.shallow_positions = {1};
    auto res = kd_loss(t.teacher.logits, t.logits, cfg);
    double expect = 0.0;
    for (int i = 0; i < 2; ++i) {
        expect += oracle::kl_row(oracle::row_of(t.teacher.logits, i), oracle::row_of(t.logits[0], i), cfg.temperature);
        CHECK(res.kd_weights[i][0] == doctest::Approx(1.0));
        CHECK(res.kd_weights[i][1] == 0.0);
    }
    CHECK(res.kd_shallow.item() == doctest::Approx(expect / 2).epsilon(1e-10));
}
