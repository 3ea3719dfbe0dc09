#pragma once

// Experiment orchestration: flat key=value config with strict unknown-key
// rejection, teacher pretraining, multi-seed method runs, method/position
// grids, and per-sample weight export.

#include <filesystem>
#include <map>
#include <optional>

#include "trainer.hpp"

namespace dskd {

struct ExperimentConfig {
    Method method = Method::dskd;
    std::vector<StageSpec> teacher_arch;
    std::vector<StageSpec> student_arch;
    std::uint64_t teacher_seed = 1234;

    std::string dataset_kind = "synthetic";  // synthetic | raster
    int dataset_classes = 10;
    int dataset_per_class = 50;
    int dataset_image_size = 16;
    std::uint64_t dataset_seed = 99;
    std::string dataset_train_path;
    std::string dataset_test_path;

    DistillConfig distill;
    OptimSpec optim;
    int epochs = 60;
    int batch_size = 64;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::optional<std::set<int>> shallow_positions;  // nullopt = all; empty set = none

    std::string output_dir = "out";
    std::string teacher_checkpoint;
};

struct RunResult {
    std::string run_dir;
    std::vector<double> seed_accuracies;  // percent
    double mean = 0.0;
    double stddev = 0.0;
    std::vector<std::string> metrics_csv_paths;
    std::vector<std::string> checkpoint_paths;
};

namespace detail {

inline std::vector<StageSpec> parse_stage_list(const std::string& text, const std::string& field) {
    std::vector<StageSpec> specs;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        StageSpec s;
        int fields = 0;
        std::stringstream fs(item);
        std::string tok;
        while (std::getline(fs, tok, ':')) {
            if (fields == 0) s.channels_out = std::stoi(tok);
            else if (fields == 1) s.conv_count = std::stoi(tok);
            else if (fields == 2 && tok == "d") s.downsample = true;
            else throw std::invalid_argument(field + ": bad stage token '" + item + "'");
            ++fields;
        }
        if (fields < 2 || s.channels_out < 1 || s.conv_count < 1)
            throw std::invalid_argument(field + ": bad stage token '" + item + "' (expected channels:convs[:d])");
        specs.push_back(s);
    }
    if (specs.empty()) throw std::invalid_argument(field + ": empty stage list");
    return specs;
}

inline std::string stage_list_str(const std::vector<StageSpec>& specs) {
    std::string out;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(specs[i].channels_out) + ":" + std::to_string(specs[i].conv_count);
        if (specs[i].downsample) out += ":d";
    }
    return out;
}

inline bool parse_bool(const std::string& v, const std::string& field) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument(field + ": expected true/false, got '" + v + "'");
}

template <typename T, typename Parse>
inline std::vector<T> parse_list(const std::string& text, Parse parse) {
    std::vector<T> out;
    std::stringstream ss(text);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(parse(tok));
    return out;
}

}  // namespace detail

class ConfigMap {
public:
    explicit ConfigMap(std::map<std::string, std::string> kv) : kv_(std::move(kv)) {}

    static ConfigMap from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("parse_config: cannot open " + path);
        std::map<std::string, std::string> kv;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            const auto first = line.find_first_not_of(" \t\r");
            if (first == std::string::npos) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument("parse_config: line " + std::to_string(lineno) + " is not key=value");
            auto trim = [](std::string s) {
                const auto a = s.find_first_not_of(" \t\r");
                const auto b = s.find_last_not_of(" \t\r");
                return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
            };
            kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
        }
        return ConfigMap(std::move(kv));
    }

    void set(const std::string& key, const std::string& value) { kv_[key] = value; }

    std::optional<std::string> take(const std::string& key) {
        auto it = kv_.find(key);
        if (it == kv_.end()) return std::nullopt;
        std::string v = it->second;
        kv_.erase(it);
        return v;
    }

    void reject_leftovers() const {
        if (!kv_.empty())
            throw std::invalid_argument("parse_config: unknown key '" + kv_.begin()->first + "'");
    }

private:
    std::map<std::string, std::string> kv_;
};

inline ExperimentConfig materialize_config(ConfigMap map) {
    ExperimentConfig cfg;
    cfg.teacher_arch = detail::parse_stage_list("8:2,16:2:d,32:2:d", "teacher.stages");
    cfg.student_arch = detail::parse_stage_list("4:1,8:1:d,16:1:d", "student.stages");

    auto take_double = [&map](const std::string& key, double& dst) {
        if (auto v = map.take(key)) dst = std::stod(*v);
    };
    auto take_int = [&map](const std::string& key, int& dst) {
        if (auto v = map.take(key)) dst = std::stoi(*v);
    };
    auto take_u64 = [&map](const std::string& key, std::uint64_t& dst) {
        if (auto v = map.take(key)) dst = std::stoull(*v);
    };
    auto take_bool = [&map](const std::string& key, bool& dst) {
        if (auto v = map.take(key)) dst = detail::parse_bool(*v, key);
    };

    if (auto v = map.take("method")) cfg.method = parse_method(*v);
    if (auto v = map.take("teacher.stages")) cfg.teacher_arch = detail::parse_stage_list(*v, "teacher.stages");
    if (auto v = map.take("student.stages")) cfg.student_arch = detail::parse_stage_list(*v, "student.stages");
    take_u64("teacher.seed", cfg.teacher_seed);

    if (auto v = map.take("dataset.kind")) {
        if (*v != "synthetic" && *v != "raster")
            throw std::invalid_argument("dataset.kind: expected synthetic|raster, got '" + *v + "'");
        cfg.dataset_kind = *v;
    }
    take_int("dataset.classes", cfg.dataset_classes);
    take_int("dataset.per_class", cfg.dataset_per_class);
    take_int("dataset.image_size", cfg.dataset_image_size);
    take_u64("dataset.seed", cfg.dataset_seed);
    if (auto v = map.take("dataset.train_path")) cfg.dataset_train_path = *v;
    if (auto v = map.take("dataset.test_path")) cfg.dataset_test_path = *v;

    take_double("distill.alpha", cfg.distill.alpha);
    take_double("distill.beta", cfg.distill.beta);
    take_double("distill.temperature", cfg.distill.temperature);
    take_bool("distill.enable_shallow_kd", cfg.distill.enable_shallow_kd);
    take_bool("distill.enable_fea", cfg.distill.enable_fea);
    take_bool("distill.enable_shallow_fea", cfg.distill.enable_shallow_fea);
    take_bool("distill.adaptive_weights", cfg.distill.adaptive_weights);
    take_double("distill.kd_grad_scale", cfg.distill.kd_grad_scale);

    take_double("optim.lr0", cfg.optim.lr0);
    take_double("optim.momentum", cfg.optim.momentum);
    take_double("optim.weight_decay", cfg.optim.weight_decay);
    take_double("optim.decay_factor", cfg.optim.decay_factor);
    if (auto v = map.take("optim.milestones")) {
        cfg.optim.milestones =
            v->empty() ? std::vector<int>{} : detail::parse_list<int>(*v, [](const std::string& s) { return std::stoi(s); });
    }

    take_int("epochs", cfg.epochs);
    take_int("batch_size", cfg.batch_size);
    if (auto v = map.take("seeds"))
        cfg.seeds = detail::parse_list<std::uint64_t>(*v, [](const std::string& s) { return std::stoull(s); });

    if (auto v = map.take("shallow_positions")) {
        if (*v == "all") {
            cfg.shallow_positions.reset();
        } else if (*v == "none") {
            cfg.shallow_positions = std::set<int>{};
        } else {
            std::set<int> pos;
            for (int p : detail::parse_list<int>(*v, [](const std::string& s) { return std::stoi(s); })) pos.insert(p);
            cfg.shallow_positions = pos;
        }
    }

    if (auto v = map.take("output_dir")) cfg.output_dir = *v;
    if (auto v = map.take("teacher_checkpoint")) cfg.teacher_checkpoint = *v;

    map.reject_leftovers();

    // Validation with field names.
    if (cfg.distill.temperature <= 0.0) throw std::invalid_argument("distill.temperature: must be positive");
    if (cfg.distill.alpha < 0.0) throw std::invalid_argument("distill.alpha: must be nonnegative");
    if (cfg.distill.beta < 0.0) throw std::invalid_argument("distill.beta: must be nonnegative");
    if (cfg.epochs < 1) throw std::invalid_argument("epochs: must be >= 1");
    if (cfg.batch_size < 1) throw std::invalid_argument("batch_size: must be >= 1");
    if (cfg.seeds.empty()) throw std::invalid_argument("seeds: must list at least one seed");
    if (cfg.dataset_kind == "synthetic") {
        if (cfg.dataset_classes < 2) throw std::invalid_argument("dataset.classes: must be >= 2");
        if (cfg.dataset_image_size < 8) throw std::invalid_argument("dataset.image_size: must be >= 8");
    } else if (cfg.dataset_train_path.empty() || cfg.dataset_test_path.empty()) {
        throw std::invalid_argument("dataset.train_path/dataset.test_path: required for raster datasets");
    }
    try {
        cfg.optim.validate();
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument("optim: " + std::string(e.what()));
    }
    if (cfg.shallow_positions && !cfg.shallow_positions->empty()) {
        const int L = static_cast<int>(cfg.student_arch.size());
        for (int p : *cfg.shallow_positions)
            if (p < 1 || p > L - 1)
                throw std::invalid_argument("shallow_positions: position " + std::to_string(p) +
                                            " outside 1.." + std::to_string(L - 1));
    }
    return cfg;
}

inline ExperimentConfig parse_config(const std::string& path,
                                     const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
    ConfigMap map = path.empty() ? ConfigMap({}) : ConfigMap::from_file(path);
    for (const auto& [k, v] : overrides) map.set(k, v);
    return materialize_config(std::move(map));
}

inline std::string resolved_config_text(const ExperimentConfig& cfg) {
    std::ostringstream os;
    char buf[40];
    auto d = [&buf](double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return std::string(buf);
    };
    os << "method = " << method_name(cfg.method) << "\n";
    os << "teacher.stages = " << detail::stage_list_str(cfg.teacher_arch) << "\n";
    os << "student.stages = " << detail::stage_list_str(cfg.student_arch) << "\n";
    os << "teacher.seed = " << cfg.teacher_seed << "\n";
    os << "dataset.kind = " << cfg.dataset_kind << "\n";
    if (cfg.dataset_kind == "synthetic") {
        os << "dataset.classes = " << cfg.dataset_classes << "\n";
        os << "dataset.per_class = " << cfg.dataset_per_class << "\n";
        os << "dataset.image_size = " << cfg.dataset_image_size << "\n";
        os << "dataset.seed = " << cfg.dataset_seed << "\n";
    } else {
        os << "dataset.train_path = " << cfg.dataset_train_path << "\n";
        os << "dataset.test_path = " << cfg.dataset_test_path << "\n";
    }
    os << "distill.alpha = " << d(cfg.distill.alpha) << "\n";
    os << "distill.beta = " << d(cfg.distill.beta) << "\n";
    os << "distill.temperature = " << d(cfg.distill.temperature) << "\n";
    os << "distill.enable_shallow_kd = " << (cfg.distill.enable_shallow_kd ? "true" : "false") << "\n";
    os << "distill.enable_fea = " << (cfg.distill.enable_fea ? "true" : "false") << "\n";
    os << "distill.enable_shallow_fea = " << (cfg.distill.enable_shallow_fea ? "true" : "false") << "\n";
    os << "distill.adaptive_weights = " << (cfg.distill.adaptive_weights ? "true" : "false") << "\n";
    os << "distill.kd_grad_scale = " << d(cfg.distill.kd_grad_scale) << "\n";
    os << "optim.lr0 = " << d(cfg.optim.lr0) << "\n";
    os << "optim.momentum = " << d(cfg.optim.momentum) << "\n";
    os << "optim.weight_decay = " << d(cfg.optim.weight_decay) << "\n";
    os << "optim.milestones = ";
    for (std::size_t i = 0; i < cfg.optim.milestones.size(); ++i) os << (i ? "," : "") << cfg.optim.milestones[i];
    os << "\n";
    os << "optim.decay_factor = " << d(cfg.optim.decay_factor) << "\n";
    os << "epochs = " << cfg.epochs << "\n";
    os << "batch_size = " << cfg.batch_size << "\n";
    os << "seeds = ";
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) os << (i ? "," : "") << cfg.seeds[i];
    os << "\n";
    if (cfg.shallow_positions) {
        if (cfg.shallow_positions->empty()) {
            os << "shallow_positions = none\n";
        } else {
            os << "shallow_positions = ";
            bool first = true;
            for (int p : *cfg.shallow_positions) {
                os << (first ? "" : ",") << p;
                first = false;
            }
            os << "\n";
        }
    } else {
        os << "shallow_positions = all\n";
    }
    os << "output_dir = " << cfg.output_dir << "\n";
    if (!cfg.teacher_checkpoint.empty()) os << "teacher_checkpoint = " << cfg.teacher_checkpoint << "\n";
    return os.str();
}

inline std::pair<LabeledDataset, LabeledDataset> load_dataset(const ExperimentConfig& cfg) {
    if (cfg.dataset_kind == "synthetic")
        return generate_synthetic(cfg.dataset_classes, cfg.dataset_per_class, cfg.dataset_image_size,
                                  cfg.dataset_seed);
    return {load_raster_dataset(cfg.dataset_train_path), load_raster_dataset(cfg.dataset_test_path)};
}

// Translates the position toggle into the DistillConfig the trainer consumes.
inline DistillConfig effective_distill_config(const ExperimentConfig& cfg) {
    DistillConfig d = cfg.distill;
    if (cfg.shallow_positions) {
        if (cfg.shallow_positions->empty()) {
            d.enable_shallow_kd = false;
            d.enable_shallow_fea = false;
        } else {
            d.shallow_positions = *cfg.shallow_positions;
        }
    }
    return d;
}

namespace detail {

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << text;
}

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
    double m = 0.0;
    for (double x : xs) m += x;
    m /= xs.size();
    double s = 0.0;
    if (xs.size() > 1) {
        for (double x : xs) s += (x - m) * (x - m);
        s = std::sqrt(s / (xs.size() - 1));
    }
    return {m, s};
}

}  // namespace detail

// Pretrains the teacher with CE only and saves a checkpoint. Returns the
// checkpoint path and final test accuracy.
inline std::pair<std::string, double> pretrain_teacher(const ExperimentConfig& cfg) {
    std::filesystem::create_directories(cfg.output_dir);
    auto [train, test] = load_dataset(cfg);
    StagedNetwork teacher = build_network(cfg.teacher_arch, train.class_count, false, cfg.teacher_seed,
                                          train.images.shape()[1]);
    auto result = run_training(teacher, nullptr, train, test, Method::student_only, effective_distill_config(cfg),
                               cfg.optim, cfg.epochs, cfg.batch_size, cfg.teacher_seed);
    const std::string csv = cfg.output_dir + "/teacher_metrics.csv";
    write_metrics_csv(result.history, csv);
    const std::string ckpt = cfg.output_dir + "/teacher.ckpt";
    save_checkpoint(teacher, ckpt);
    detail::write_text_file(cfg.output_dir + "/teacher_summary.txt",
                            "teacher_test_acc = " + detail::fmt_double(result.final_test_acc) + "\n");
    return {ckpt, result.final_test_acc};
}

// Runs one method across all configured seeds; writes resolved config,
// per-seed metrics CSVs and checkpoints, and a mean/std summary.
inline RunResult run_method(const ExperimentConfig& cfg) {
    const bool needs_teacher = cfg.method == Method::kd || cfg.method == Method::dskd;
    if (needs_teacher && cfg.teacher_checkpoint.empty())
        throw std::invalid_argument("teacher_checkpoint: required for method '" + method_name(cfg.method) + "'");

    std::filesystem::create_directories(cfg.output_dir);
    detail::write_text_file(cfg.output_dir + "/config.resolved", resolved_config_text(cfg));

    auto [train, test] = load_dataset(cfg);
    std::optional<StagedNetwork> teacher;
    if (needs_teacher) teacher = load_checkpoint(cfg.teacher_checkpoint);

    const DistillConfig dcfg = effective_distill_config(cfg);
    RunResult res;
    res.run_dir = cfg.output_dir;
    for (std::uint64_t seed : cfg.seeds) {
        StagedNetwork student = build_network(cfg.student_arch, train.class_count, cfg.method != Method::student_only,
                                              seed, train.images.shape()[1]);
        auto out = run_training(student, teacher ? &*teacher : nullptr, train, test, cfg.method, dcfg, cfg.optim,
                                cfg.epochs, cfg.batch_size, seed);
        const std::string csv = cfg.output_dir + "/metrics_seed" + std::to_string(seed) + ".csv";
        write_metrics_csv(out.history, csv);
        const std::string ckpt = cfg.output_dir + "/student_seed" + std::to_string(seed) + ".ckpt";
        save_checkpoint(student, ckpt);
        res.metrics_csv_paths.push_back(csv);
        res.checkpoint_paths.push_back(ckpt);
        res.seed_accuracies.push_back(out.final_test_acc);
    }
    auto [m, s] = detail::mean_std(res.seed_accuracies);
    res.mean = m;
    res.stddev = s;

    std::ostringstream sum;
    sum << "method = " << method_name(cfg.method) << "\n";
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i)
        sum << "seed" << cfg.seeds[i] << "_test_acc = " << detail::fmt_double(res.seed_accuracies[i]) << "\n";
    sum << "mean = " << detail::fmt_double(res.mean) << "\n";
    sum << "std = " << detail::fmt_double(res.stddev) << "\n";
    detail::write_text_file(cfg.output_dir + "/summary.txt", sum.str());
    return res;
}

// Per-sample shallow KD weights of a trained student on the test split.
inline std::vector<std::vector<double>> compute_test_kd_weights(const StagedNetwork& student,
                                                                const StagedNetwork& teacher,
                                                                const LabeledDataset& test, const DistillConfig& cfg,
                                                                int batch_size = 128) {
    std::vector<std::vector<double>> all;
    const auto& sh = test.images.shape();
    const std::size_t px = static_cast<std::size_t>(sh[1]) * sh[2] * sh[3];
    for (int start = 0; start < test.size(); start += batch_size) {
        const int n = std::min(batch_size, test.size() - start);
        std::vector<double> img(test.images.data().begin() + start * px,
                                test.images.data().begin() + (start + n) * px);
        Tensor batch(Shape{n, sh[1], sh[2], sh[3]}, std::move(img));
        auto t_out = forward_all_heads(teacher, batch);
        auto s_out = forward_all_heads(student, batch);
        std::vector<Tensor> logits;
        for (const auto& h : s_out) logits.push_back(h.logits);
        auto kd = kd_loss(t_out.back().logits.detach(), logits, cfg);
        for (auto& row : kd.kd_weights) all.push_back(std::move(row));
    }
    return all;
}

// Writes one weight per line for the chosen shallow layer, one row per test
// sample. For L-1 = 2 the complementary layer's distribution is 1 - w.
inline std::string export_weight_distribution(const ExperimentConfig& cfg, const std::string& student_checkpoint,
                                              int layer) {
    StagedNetwork student = load_checkpoint(student_checkpoint);
    if (cfg.teacher_checkpoint.empty())
        throw std::invalid_argument("teacher_checkpoint: required for export-weights");
    StagedNetwork teacher = load_checkpoint(cfg.teacher_checkpoint);
    const int n_shallow = static_cast<int>(student.heads.size()) - 1;
    if (layer < 1 || layer > n_shallow)
        throw std::invalid_argument("layer: " + std::to_string(layer) + " outside 1.." + std::to_string(n_shallow));

    auto [train, test] = load_dataset(cfg);
    (void)train;
    auto weights = compute_test_kd_weights(student, teacher, test, effective_distill_config(cfg));

    std::filesystem::create_directories(cfg.output_dir);
    const std::string path = cfg.output_dir + "/weights_layer" + std::to_string(layer) + ".csv";
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("export_weight_distribution: cannot open " + path);
    out << "sample,weight\n";
    for (std::size_t i = 0; i < weights.size(); ++i)
        out << i << "," << detail::fmt_double(weights[i][layer - 1]) << "\n";
    return path;
}

// Method comparison grid; emits a small comparison table.
inline std::vector<std::pair<std::string, RunResult>> run_method_grid(const ExperimentConfig& base,
                                                                      const std::vector<Method>& methods) {
    std::vector<std::pair<std::string, RunResult>> results;
    for (Method m : methods) {
        ExperimentConfig cfg = base;
        cfg.method = m;
        cfg.output_dir = base.output_dir + "/" + method_name(m);
        results.emplace_back(method_name(m), run_method(cfg));
    }
    std::filesystem::create_directories(base.output_dir);
    std::ostringstream table;
    table << "method,mean,std\n";
    for (const auto& [name, r] : results)
        table << name << "," << detail::fmt_double(r.mean) << "," << detail::fmt_double(r.stddev) << "\n";
    detail::write_text_file(base.output_dir + "/comparison.csv", table.str());
    return results;
}

// Shallow-position grid over DSKD variants; entries like {}, {1}, {2}, {1,2}.
inline std::vector<std::pair<std::string, RunResult>> run_position_grid(const ExperimentConfig& base,
                                                                        const std::vector<std::set<int>>& position_sets) {
    std::vector<std::pair<std::string, RunResult>> results;
    for (const auto& pos : position_sets) {
        ExperimentConfig cfg = base;
        cfg.method = Method::dskd;
        cfg.shallow_positions = pos;
        std::string tag = "pos_";
        if (pos.empty()) tag += "none";
        for (int p : pos) tag += std::to_string(p);
        cfg.output_dir = base.output_dir + "/" + tag;
        results.emplace_back(tag, run_method(cfg));
    }
    std::filesystem::create_directories(base.output_dir);
    std::ostringstream table;
    table << "positions,mean,std\n";
    for (const auto& [name, r] : results)
        table << name << "," << detail::fmt_double(r.mean) << "," << detail::fmt_double(r.stddev) << "\n";
    detail::write_text_file(base.output_dir + "/positions.csv", table.str());
    return results;
}

}  // namespace dskd
