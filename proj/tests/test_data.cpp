#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "dskd/data.hpp"

using namespace dskd;

TEST_CASE("synthetic generation is deterministic with the documented split sizes") {
    auto [train1, test1] = generate_synthetic(10, 50, 16, 5);
    auto [train2, test2] = generate_synthetic(10, 50, 16, 5);
    CHECK(train1.images.data() == train2.images.data());
    CHECK(test1.labels.data() == test2.labels.data());

    CHECK(train1.size() == 400);
    CHECK(test1.size() == 100);
    CHECK(train1.class_count == 10);

    auto [train3, test3] = generate_synthetic(10, 50, 16, 6);
    CHECK(train1.images.data() != train3.images.data());
}

TEST_CASE("synthetic validation") {
    CHECK_THROWS_AS(generate_synthetic(1, 50, 16, 0), std::invalid_argument);
    CHECK_THROWS_AS(generate_synthetic(10, 50, 4, 0), std::invalid_argument);
}

TEST_CASE("images in range, labels one-hot") {
    auto [train, test] = generate_synthetic(6, 30, 12, 9);
    for (double v : train.images.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    for (int i = 0; i < train.size(); ++i) {
        int ones = 0;
        for (int k = 0; k < 6; ++k)
            if (train.labels.data()[i * 6 + k] == 1.0) ++ones;
        CHECK(ones == 1);
    }
}

TEST_CASE("class-conditional mean images separate beyond the noise floor") {
    const int K = 6, per_class = 50, S = 16;
    auto [train, test] = generate_synthetic(K, per_class, S, 42);
    const int per_train = train.size() / K;
    std::vector<std::vector<double>> means(K, std::vector<double>(S * S, 0.0));
    for (int i = 0; i < train.size(); ++i) {
        const int c = train.label_of(i);
        for (int p = 0; p < S * S; ++p) means[c][p] += train.images.data()[i * S * S + p] / per_train;
    }
    // within-class pixel std as noise estimate
    double var = 0.0;
    for (int i = 0; i < per_train; ++i)
        for (int p = 0; p < S * S; ++p) {
            const double d = train.images.data()[i * S * S + p] - means[0][p];
            var += d * d;
        }
    const double noise_std = std::sqrt(var / (per_train * S * S));
    const double mean_noise = noise_std / std::sqrt(per_train);

    for (int a = 0; a < K; ++a)
        for (int b = a + 1; b < K; ++b) {
            double rms = 0.0;
            for (int p = 0; p < S * S; ++p) rms += (means[a][p] - means[b][p]) * (means[a][p] - means[b][p]);
            rms = std::sqrt(rms / (S * S));
            CHECK(rms > 3.0 * mean_noise);
        }
}

TEST_CASE("raster round trip preserves pixels and labels") {
    auto dir = std::filesystem::temp_directory_path() / "dskd_data_test";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "ds.dskr").string();

    auto [train, test] = generate_synthetic(4, 20, 10, 3);
    save_raster_dataset(test, path);
    auto loaded = load_raster_dataset(path);

    CHECK(loaded.size() == test.size());
    CHECK(loaded.class_count == test.class_count);
    for (int i = 0; i < test.size(); ++i) CHECK(loaded.label_of(i) == test.label_of(i));
    // pixels survive up to the 8-bit quantization of the container
    for (std::size_t i = 0; i < test.images.data().size(); ++i)
        CHECK(std::abs(loaded.images.data()[i] - test.images.data()[i]) <= 0.5 / 255.0 + 1e-12);

    // byte-exact second write
    const std::string path2 = (dir / "ds2.dskr").string();
    save_raster_dataset(loaded, path2);
    std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
    CHECK(sa == sb);
}

TEST_CASE("raster loader error contracts") {
    auto dir = std::filesystem::temp_directory_path() / "dskd_data_test";
    std::filesystem::create_directories(dir);

    const std::string bad_magic = (dir / "bad_magic.dskr").string();
    { std::ofstream f(bad_magic, std::ios::binary); f << "NOPE12345678901234567890"; }
    CHECK_THROWS_WITH_AS(load_raster_dataset(bad_magic), doctest::Contains("bad magic"), std::runtime_error);

    const std::string truncated = (dir / "trunc.dskr").string();
    {
        auto [train, test] = generate_synthetic(4, 20, 10, 3);
        save_raster_dataset(test, (dir / "full.dskr").string());
        std::ifstream in((dir / "full.dskr").string(), std::ios::binary);
        std::string all((std::istreambuf_iterator<char>(in)), {});
        std::ofstream out(truncated, std::ios::binary);
        out.write(all.data(), static_cast<std::streamsize>(all.size() / 2));
    }
    CHECK_THROWS_WITH_AS(load_raster_dataset(truncated), doctest::Contains("byte offset"), std::runtime_error);

    const std::string bad_label = (dir / "bad_label.dskr").string();
    {
        std::ifstream in((dir / "full.dskr").string(), std::ios::binary);
        std::string all((std::istreambuf_iterator<char>(in)), {});
        all[24] = static_cast<char>(200);  // label byte >= K
        std::ofstream out(bad_label, std::ios::binary);
        out.write(all.data(), static_cast<std::streamsize>(all.size()));
    }
    CHECK_THROWS_WITH_AS(load_raster_dataset(bad_label), doctest::Contains("label"), std::runtime_error);
}

TEST_CASE("batch_iter partitions the dataset") {
    auto [train, test] = generate_synthetic(5, 25, 10, 8);
    REQUIRE(train.size() == 100);
    auto batches = batch_iter(train, 64, 17);
    REQUIRE(batches.size() == 2);
    CHECK(batches[0].first.shape()[0] == 64);
    CHECK(batches[1].first.shape()[0] == 36);

    auto again = batch_iter(train, 64, 17);
    CHECK(batches[0].first.data() == again[0].first.data());

    // union of batches covers the dataset exactly once (multiset of label sums)
    std::vector<double> seen;
    for (auto& [img, lab] : batches)
        for (int i = 0; i < img.shape()[0]; ++i) {
            double s = 0.0;
            for (std::size_t p = 0; p < 100; ++p) s += img.data()[i * 100 + p];
            seen.push_back(s);
        }
    std::vector<double> expect;
    for (int i = 0; i < train.size(); ++i) {
        double s = 0.0;
        for (std::size_t p = 0; p < 100; ++p) s += train.images.data()[i * 100 + p];
        expect.push_back(s);
    }
    std::sort(seen.begin(), seen.end());
    std::sort(expect.begin(), expect.end());
    CHECK(seen == expect);

    CHECK_THROWS_AS(batch_iter(train, 0, 1), std::invalid_argument);
}
