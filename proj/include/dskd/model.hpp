#pragma once

// Staged CNN with optional auxiliary classifier heads. Each head attached
// after stage l carries fresh bridge stages mirroring the remaining main
// branch, global average pooling, and a linear classifier. Auxiliary heads
// exist only for training; inference touches the main branch and head L.

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <optional>
#include <random>
#include <utility>

#include "tensor.hpp"

namespace dskd {

struct StageSpec {
    int channels_out = 0;
    int conv_count = 1;
    bool downsample = false;  // stride-2 first conv
};

inline bool operator==(const StageSpec& a, const StageSpec& b) {
    return a.channels_out == b.channels_out && a.conv_count == b.conv_count && a.downsample == b.downsample;
}

struct ConvLayer {
    Tensor weight;  // O x C x 3 x 3
    Tensor bias;    // O
    int stride = 1;
};

struct Stage {
    std::vector<ConvLayer> convs;
};

struct HeadOutput {
    Tensor feature;  // N x D, post-pool, pre-linear
    Tensor logits;   // N x K
};

struct ClassifierHead {
    std::vector<Stage> bridge;
    Tensor lin_weight;  // D x K
    Tensor lin_bias;    // K
    int feature_dim = 0;
    std::uint64_t proj_seed = 0;
    std::optional<Tensor> projection;  // feature_dim x teacher_dim, created on demand
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a + 0x9e3779b97f4a7c15ull * (b + 1);
    x ^= x >> 30; x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27; x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
}

inline Tensor kaiming_uniform(Shape shape, int fan_in, std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / fan_in);
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : d) v = dist(rng);
    return Tensor(std::move(shape), std::move(d), true);
}

inline Stage make_stage(int in_channels, const StageSpec& spec, std::mt19937_64& rng) {
    Stage st;
    int c_in = in_channels;
    for (int j = 0; j < spec.conv_count; ++j) {
        ConvLayer layer;
        layer.weight = kaiming_uniform(Shape{spec.channels_out, c_in, 3, 3}, c_in * 9, rng);
        layer.bias = Tensor::zeros(Shape{spec.channels_out}, true);
        layer.stride = (j == 0 && spec.downsample) ? 2 : 1;
        st.convs.push_back(std::move(layer));
        c_in = spec.channels_out;
    }
    return st;
}

inline Tensor stage_forward(const Stage& st, Tensor x) {
    for (const auto& layer : st.convs) {
        x = conv2d(x, layer.weight, layer.stride, 1);
        x = add_channel_bias(x, layer.bias);
        x = relu(x);
    }
    return x;
}

}  // namespace detail

struct StagedNetwork {
    std::vector<StageSpec> specs;
    std::vector<Stage> stages;
    std::vector<ClassifierHead> heads;  // heads[l-1] attached after stage l; last is the final classifier
    int num_classes = 0;
    int in_channels = 1;
    std::uint64_t seed = 0;
    bool with_aux = false;

    int depth() const { return static_cast<int>(stages.size()); }

    // Fixed traversal order so checkpoints and optimizer state line up.
    std::vector<Parameter> parameters() const {
        std::vector<Parameter> out;
        auto add_stage = [&out](const Stage& st, const std::string& prefix) {
            for (std::size_t j = 0; j < st.convs.size(); ++j) {
                out.push_back({prefix + ".conv" + std::to_string(j) + ".weight", st.convs[j].weight});
                out.push_back({prefix + ".conv" + std::to_string(j) + ".bias", st.convs[j].bias});
            }
        };
        for (std::size_t i = 0; i < stages.size(); ++i)
            add_stage(stages[i], "stage" + std::to_string(i + 1));
        for (std::size_t l = 0; l < heads.size(); ++l) {
            const std::string hp = "head" + std::to_string(l + 1);
            for (std::size_t b = 0; b < heads[l].bridge.size(); ++b)
                add_stage(heads[l].bridge[b], hp + ".bridge" + std::to_string(b));
            out.push_back({hp + ".linear.weight", heads[l].lin_weight});
            out.push_back({hp + ".linear.bias", heads[l].lin_bias});
            if (heads[l].projection) out.push_back({hp + ".proj.weight", *heads[l].projection});
        }
        return out;
    }
};

// Builds a staged network with deterministic per-component seeding, so the
// main branch is bitwise identical whether or not auxiliary heads exist.
inline StagedNetwork build_network(const std::vector<StageSpec>& stage_specs, int num_classes, bool with_aux_heads,
                                   std::uint64_t seed, int in_channels = 1) {
    if (stage_specs.empty()) throw std::invalid_argument("build_network: empty stage list");
    if (num_classes < 2) throw std::invalid_argument("build_network: num_classes must be >= 2");
    for (const auto& s : stage_specs)
        if (s.channels_out < 1 || s.conv_count < 1)
            throw std::invalid_argument("build_network: invalid stage spec");

    StagedNetwork net;
    net.specs = stage_specs;
    net.num_classes = num_classes;
    net.in_channels = in_channels;
    net.seed = seed;
    net.with_aux = with_aux_heads;

    const int L = static_cast<int>(stage_specs.size());
    int c_in = in_channels;
    for (int i = 0; i < L; ++i) {
        std::mt19937_64 rng(detail::mix_seed(seed, 1000 + i));
        net.stages.push_back(detail::make_stage(c_in, stage_specs[i], rng));
        c_in = stage_specs[i].channels_out;
    }

    const int first_head = with_aux_heads ? 1 : L;
    for (int l = first_head; l <= L; ++l) {
        std::mt19937_64 rng(detail::mix_seed(seed, 2000 + l));
        ClassifierHead head;
        int hc = stage_specs[l - 1].channels_out;
        for (int i = l; i < L; ++i) {
            head.bridge.push_back(detail::make_stage(hc, stage_specs[i], rng));
            hc = stage_specs[i].channels_out;
        }
        head.feature_dim = hc;
        head.lin_weight = detail::kaiming_uniform(Shape{hc, num_classes}, hc, rng);
        head.lin_bias = Tensor::zeros(Shape{num_classes}, true);
        head.proj_seed = detail::mix_seed(seed, 3000 + l);
        net.heads.push_back(std::move(head));
    }
    return net;
}

inline HeadOutput head_forward(const ClassifierHead& head, Tensor x) {
    for (const auto& st : head.bridge) x = detail::stage_forward(st, x);
    Tensor feature = global_avg_pool(x);
    Tensor logits = linear(feature, head.lin_weight, head.lin_bias);
    return {feature, logits};
}

// One HeadOutput per head; main-branch activations computed once and shared.
inline std::vector<HeadOutput> forward_all_heads(const StagedNetwork& net, const Tensor& batch) {
    if (batch.shape().size() != 4 || batch.shape()[1] != net.in_channels)
        throw std::invalid_argument("forward_all_heads: batch shape " + shape_str(batch.shape()) +
                                    " incompatible with in_channels " + std::to_string(net.in_channels));
    std::vector<HeadOutput> outs;
    Tensor x = batch;
    const int L = net.depth();
    const int first_head = static_cast<int>(net.heads.size()) == L ? 1 : L;
    for (int l = 1; l <= L; ++l) {
        x = detail::stage_forward(net.stages[l - 1], x);
        if (l >= first_head) outs.push_back(head_forward(net.heads[l - first_head], x));
    }
    return outs;
}

// Logits of the final head only.
inline Tensor forward_inference(const StagedNetwork& net, const Tensor& batch) {
    if (batch.shape().size() != 4 || batch.shape()[1] != net.in_channels)
        throw std::invalid_argument("forward_inference: batch shape " + shape_str(batch.shape()) +
                                    " incompatible with in_channels " + std::to_string(net.in_channels));
    Tensor x = batch;
    for (const auto& st : net.stages) x = detail::stage_forward(st, x);
    return head_forward(net.heads.back(), x).logits;
}

// Applies r(.): identity when dimensions match, otherwise a learned linear
// map to teacher_dim. The projection parameter is created on first use with
// a seed fixed at build time and joins the training graph.
inline Tensor project_feature(ClassifierHead& head, const Tensor& feature, int teacher_dim) {
    if (teacher_dim < 1) throw std::invalid_argument("project_feature: teacher_dim must be >= 1");
    if (head.feature_dim == teacher_dim && !head.projection) return feature;
    if (!head.projection) {
        std::mt19937_64 rng(head.proj_seed);
        head.projection = detail::kaiming_uniform(Shape{head.feature_dim, teacher_dim}, head.feature_dim, rng);
    }
    if (head.projection->shape()[1] != teacher_dim)
        throw std::invalid_argument("project_feature: teacher_dim changed from " +
                                    std::to_string(head.projection->shape()[1]) + " to " + std::to_string(teacher_dim));
    return matmul(feature, *head.projection);
}

// ---------------------------------------------------------------------------
// Checkpoint format: line-oriented text, hexfloat values, byte-stable.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const StagedNetwork& net, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out << "DSKD-CKPT 1\n";
    out << "stages " << net.specs.size() << "\n";
    for (const auto& s : net.specs)
        out << "stage " << s.channels_out << " " << s.conv_count << " " << (s.downsample ? 1 : 0) << "\n";
    out << "num_classes " << net.num_classes << "\n";
    out << "in_channels " << net.in_channels << "\n";
    out << "seed " << net.seed << "\n";
    out << "with_aux " << (net.with_aux ? 1 : 0) << "\n";
    auto params = net.parameters();
    out << "params " << params.size() << "\n";
    char buf[64];
    for (const auto& p : params) {
        out << p.name << " " << p.value.shape().size();
        for (int d : p.value.shape()) out << " " << d;
        out << "\n";
        const auto& data = p.value.data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%a", data[i]);
            out << buf << (i + 1 == data.size() ? "\n" : " ");
        }
    }
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline StagedNetwork load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    std::string magic; int version = 0;
    in >> magic >> version;
    if (magic != "DSKD-CKPT" || version != 1)
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    auto expect = [&in, &path](const std::string& key) {
        std::string tok;
        in >> tok;
        if (tok != key) throw std::runtime_error("load_checkpoint: expected '" + key + "', got '" + tok + "' in " + path);
    };
    std::size_t n_stages = 0;
    expect("stages"); in >> n_stages;
    std::vector<StageSpec> specs(n_stages);
    for (auto& s : specs) {
        int ds = 0;
        expect("stage"); in >> s.channels_out >> s.conv_count >> ds;
        s.downsample = ds != 0;
    }
    int num_classes = 0, in_channels = 0, with_aux = 0;
    std::uint64_t seed = 0;
    expect("num_classes"); in >> num_classes;
    expect("in_channels"); in >> in_channels;
    expect("seed"); in >> seed;
    expect("with_aux"); in >> with_aux;
    std::size_t n_params = 0;
    expect("params"); in >> n_params;
    if (!in) throw std::runtime_error("load_checkpoint: truncated header in " + path);

    StagedNetwork net = build_network(specs, num_classes, with_aux != 0, seed, in_channels);

    std::vector<Parameter> params = net.parameters();
    std::size_t next = 0;
    for (std::size_t i = 0; i < n_params; ++i) {
        std::string name;
        std::size_t ndim = 0;
        in >> name >> ndim;
        Shape shape(ndim);
        for (auto& d : shape) in >> d;
        if (!in) throw std::runtime_error("load_checkpoint: truncated at parameter " + std::to_string(i));
        // Projections are created lazily; materialize when the file has one.
        if (next >= params.size() || params[next].name != name) {
            bool matched = false;
            auto pos = name.find(".proj.weight");
            if (pos != std::string::npos && name.rfind("head", 0) == 0) {
                const int l = std::stoi(name.substr(4, pos - 4));
                const int idx = l - (net.with_aux ? 1 : net.depth());
                if (idx >= 0 && idx < static_cast<int>(net.heads.size()) && shape.size() == 2) {
                    project_feature(net.heads[idx], Tensor::zeros(Shape{1, net.heads[idx].feature_dim}), shape[1]);
                    params = net.parameters();
                    while (next < params.size() && params[next].name != name) ++next;
                    matched = next < params.size();
                }
            }
            if (!matched)
                throw std::runtime_error("load_checkpoint: unexpected parameter '" + name + "' in " + path);
        }
        Parameter& p = params[next++];
        if (p.value.shape() != shape)
            throw std::runtime_error("load_checkpoint: shape mismatch for '" + name + "': file " + shape_str(shape) +
                                     " vs model " + shape_str(p.value.shape()));
        std::string tok;
        for (auto& v : p.value.data()) {
            in >> tok;
            if (!in) throw std::runtime_error("load_checkpoint: truncated values for '" + name + "'");
            v = std::strtod(tok.c_str(), nullptr);
        }
    }
    return net;
}

}  // namespace dskd
