#include <cmath>
#include <vector>

#include "doctest.h"
#include "metamorph/checkpoint.hpp"
#include "metamorph/errors.hpp"
#include "metamorph/sampler.hpp"

using namespace metamorph;

namespace {

ArchSpec tiny_arch() {
    ArchSpec a;
    a.widths = {4, 6};
    a.blocks_per_layer = 3;
    a.num_classes = 4;
    a.in_channels = 1;
    return a;
}

INRBundle tiny_bundle(uint64_t seed = 17) {
    INRBundle b;
    b.arch = tiny_arch();
    b.kernel_cfg = INRConfig{3, 16, 48, 9, true};
    b.bias_cfg = INRConfig{3, 16, 48, 1, true};
    b.fourier = FourierSpec{4};
    RngStream r0(seed), r1(seed + 1);
    b.blocks.push_back(make_block_inr(b.arch, BlockId{0, 1}, b.kernel_cfg, b.bias_cfg, true, r0));
    b.blocks.push_back(make_block_inr(b.arch, BlockId{1, 1}, b.kernel_cfg, b.bias_cfg, true, r1));
    return b;
}

NetworkConfig mid_config(const INRBundle& b) {
    return instantiate_config(b.block_ids(), b.references(), 0.25);
}

bool same_weights(const std::vector<MetaBlockWeights>& a,
                  const std::vector<MetaBlockWeights>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i].conv1_kernel.data() != b[i].conv1_kernel.data()) return false;
        if (a[i].conv1_bias.data() != b[i].conv1_bias.data()) return false;
        if (a[i].conv2_kernel.data() != b[i].conv2_kernel.data()) return false;
        if (a[i].conv2_bias.data() != b[i].conv2_bias.data()) return false;
    }
    return true;
}

double stddev(const std::vector<double>& xs) {
    double mean = 0;
    for (double x : xs) mean += x;
    mean /= double(xs.size());
    double var = 0;
    for (double x : xs) var += (x - mean) * (x - mean);
    return std::sqrt(var / double(xs.size() - 1));
}

}  // namespace

TEST_CASE("disabled perturbation short-circuits: any K equals K = 1 exactly") {
    INRBundle bundle = tiny_bundle();
    NetworkConfig cfg = mid_config(bundle);

    SamplerSpec one;
    one.K = 1;
    one.perturbation.enabled = false;
    SamplerSpec many = one;
    many.K = 16;

    CHECK(same_weights(sample_weights(bundle, cfg, one), sample_weights(bundle, cfg, many)));
}

TEST_CASE("sampling is deterministic per seed and varies across seeds") {
    INRBundle bundle = tiny_bundle();
    NetworkConfig cfg = mid_config(bundle);

    SamplerSpec spec;
    spec.K = 4;
    spec.seed = 33;
    auto a = sample_weights(bundle, cfg, spec);
    auto b = sample_weights(bundle, cfg, spec);
    CHECK(same_weights(a, b));

    spec.seed = 34;
    CHECK_FALSE(same_weights(a, sample_weights(bundle, cfg, spec)));
}

TEST_CASE("K = 2 mean matches a hand-rolled average of the two passes") {
    INRBundle bundle = tiny_bundle();
    NetworkConfig cfg = mid_config(bundle);

    SamplerSpec spec;
    spec.K = 2;
    spec.seed = 7;
    auto mean = sample_weights(bundle, cfg, spec);

    NoGradGuard guard;
    RngStream root(spec.seed);
    RngStream ra = root.split("sample").split(uint64_t(0));
    RngStream rb = root.split("sample").split(uint64_t(1));
    for (size_t b = 0; b < bundle.blocks.size(); ++b) {
        MetaBlockWeights wa = generate_block_weights(bundle.blocks[b], cfg.blocks[b].width,
                                                     spec.perturbation, ra, bundle.fourier);
        MetaBlockWeights wb = generate_block_weights(bundle.blocks[b], cfg.blocks[b].width,
                                                     spec.perturbation, rb, bundle.fourier);
        const auto& got = mean[b].conv1_kernel.data();
        const auto& xa = wa.conv1_kernel.data();
        const auto& xb = wb.conv1_kernel.data();
        for (size_t i = 0; i < got.size(); ++i) CHECK(got[i] == (xa[i] + xb[i]) / 2.0f);
    }
}

TEST_CASE("averaging K = 16 generations shrinks the spread about fourfold") {
    INRBundle bundle = tiny_bundle();
    NetworkConfig cfg = mid_config(bundle);

    std::vector<double> v1, v16;
    for (int r = 0; r < 200; ++r) {
        SamplerSpec spec;
        spec.seed = uint64_t(1000 + r);
        spec.K = 1;
        v1.push_back(double(sample_weights(bundle, cfg, spec)[0].conv1_kernel.data()[0]));
        spec.K = 16;
        v16.push_back(double(sample_weights(bundle, cfg, spec)[0].conv1_kernel.data()[0]));
    }
    double ratio = stddev(v1) / stddev(v16);
    CHECK(ratio > 4.0 * 0.7);
    CHECK(ratio < 4.0 * 1.3);
}

TEST_CASE("sample_weights contract checks") {
    INRBundle bundle = tiny_bundle();
    NetworkConfig cfg = mid_config(bundle);

    SamplerSpec bad;
    bad.K = 0;
    CHECK_THROWS_AS(sample_weights(bundle, cfg, bad), ContractError);

    NetworkConfig shorter = cfg;
    shorter.blocks.pop_back();
    CHECK_THROWS_AS(sample_weights(bundle, shorter, SamplerSpec{}), ContractError);

    NetworkConfig wrong = cfg;
    wrong.blocks[0].block = BlockId{0, 2};
    CHECK_THROWS_AS(sample_weights(bundle, wrong, SamplerSpec{}), ContractError);
}

TEST_CASE("sample_model assembles a working network and flags out-of-pool ratios") {
    RngStream rng(3);
    PriorNetwork prior = PriorNetwork::random_init(tiny_arch(), rng);
    fold_network(prior);
    INRBundle bundle = tiny_bundle();
    std::vector<Tensor> alphas{Tensor::scalar(0.25f), Tensor::scalar(-0.5f)};

    SamplerSpec spec;
    spec.K = 2;
    spec.seed = 5;

    std::string warning = "sentinel";
    MorphModel in_pool = sample_model(prior, bundle, alphas, 0.25, spec, &warning);
    CHECK(warning.empty());
    CHECK(in_pool.config.blocks[0].width == 3);
    CHECK(in_pool.config.blocks[1].width == 5);
    CHECK(in_pool.alphas[0].data()[0] == 0.25f);

    Tensor x = Tensor::ones({2, 1, 8, 8});
    Tensor y = in_pool.forward(x);
    CHECK(y.shape() == Shape{2, 4});
    for (float v : y.data()) CHECK(std::isfinite(v));

    MorphModel extrapolated = sample_model(prior, bundle, alphas, 0.75, spec, &warning);
    CHECK_FALSE(warning.empty());
    CHECK(warning.find("outside the training pool") != std::string::npos);
    Tensor z = extrapolated.forward(x);
    CHECK(z.shape() == Shape{2, 4});

    std::vector<Tensor> short_alphas{Tensor::scalar(0.0f)};
    CHECK_THROWS_AS(sample_model(prior, bundle, short_alphas, 0.25, spec), ContractError);
}

TEST_CASE("exports are byte-identical under a fixed seed") {
    RngStream rng(3);
    PriorNetwork prior = PriorNetwork::random_init(tiny_arch(), rng);
    fold_network(prior);
    INRBundle bundle = tiny_bundle();
    std::vector<Tensor> alphas{Tensor::scalar(0.1f), Tensor::scalar(0.2f)};

    SamplerSpec spec;
    spec.K = 3;
    spec.seed = 21;

    auto encode = [&] {
        return encode_checkpoint(to_checkpoint(sample_model(prior, bundle, alphas, 0.5, spec)));
    };
    auto a = encode();
    auto b = encode();
    CHECK(a == b);

    spec.seed = 22;
    CHECK(a != encode_checkpoint(
                   to_checkpoint(sample_model(prior, bundle, alphas, 0.5, spec))));
}
