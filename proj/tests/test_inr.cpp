#include "doctest.h"
#include "metamorph/inr.hpp"
#include "metamorph/optim.hpp"

#include "gradcheck.hpp"

#include <cmath>

using namespace metamorph;

namespace {

INRConfig small_cfg(int input_dim, int output_dim, bool residual = true) {
    INRConfig cfg;
    cfg.depth = 8;
    cfg.width = 16;
    cfg.input_dim = input_dim;
    cfg.output_dim = output_dim;
    cfg.residual = residual;
    return cfg;
}

// double-precision replica of the INR forward, used as the oracle below
gradcheck::DTensor forward_replica(const std::vector<gradcheck::DTensor>& w,
                                   const std::vector<gradcheck::DTensor>& b,
                                   const gradcheck::DTensor& x, bool residual) {
    auto h = metamorph::elu(metamorph::linear(x, w[0], b[0]));
    for (size_t i = 1; i + 1 < w.size(); ++i) {
        auto z = metamorph::elu(metamorph::linear(h, w[i], b[i]));
        h = residual ? metamorph::add(z, h) : z;
    }
    return metamorph::linear(h, w.back(), b.back());
}

}  // namespace

TEST_CASE("inr: zero final layer gives zero output for any input") {
    RngStream rng(1);
    INRModel m(small_cfg(12, 5), rng);
    auto& w = m.weights();
    auto& b = m.biases();
    std::fill(w.back().data().begin(), w.back().data().end(), 0.f);
    std::fill(b.back().data().begin(), b.back().data().end(), 0.f);
    Tensor e = Tensor::uniform({4, 12}, rng, -1.f, 1.f);
    Tensor y = m.forward(e);
    for (float v : y.data()) CHECK(v == 0.f);
}

TEST_CASE("inr: deterministic forward and shape checks") {
    RngStream rng(2);
    INRModel m(small_cfg(12, 9), rng);
    Tensor e = Tensor::uniform({3, 12}, rng, -1.f, 1.f);
    Tensor y1 = m.forward(e);
    Tensor y2 = m.forward(e);
    CHECK(y1.shape() == Shape{3, 9});
    CHECK(y1.data() == y2.data());
    CHECK_THROWS_AS(m.forward(Tensor::zeros({3, 11})), ShapeError);
    CHECK_THROWS_AS(INRModel().forward(e), ContractError);
}

TEST_CASE("inr: residual connections are wired") {
    RngStream r1(3), r2(3);
    INRModel with_res(small_cfg(8, 4, true), r1);
    INRModel without(small_cfg(8, 4, false), r2);
    // same draws, so identical parameters; only the wiring differs
    RngStream re(4);
    Tensor e = Tensor::uniform({2, 8}, re, -1.f, 1.f);
    Tensor a = with_res.forward(e), b = without.forward(e);
    CHECK(a.shape() == b.shape());
    bool any_diff = false;
    for (size_t i = 0; i < a.data().size(); ++i)
        if (a.data()[i] != b.data()[i]) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("inr: gradient w.r.t. W matches finite differences (64-bit replica)") {
    RngStream rng(5);
    INRModel m(small_cfg(6, 3), rng);

    // copy float parameters into a double replica of the same architecture
    std::vector<gradcheck::DTensor> w, b;
    for (auto& t : m.weights()) {
        std::vector<double> vals(t.data().begin(), t.data().end());
        w.push_back(gradcheck::DTensor::from_data(t.shape(), std::move(vals), true));
    }
    for (auto& t : m.biases()) {
        std::vector<double> vals(t.data().begin(), t.data().end());
        b.push_back(gradcheck::DTensor::from_data(t.shape(), std::move(vals), true));
    }
    RngStream re(6);
    auto x = gradcheck::rand_t({4, 6}, re);
    x.set_requires_grad(false);

    gradcheck::Instance inst;
    for (auto& t : w) inst.params.push_back(t);
    for (auto& t : b) inst.params.push_back(t);
    inst.loss = [=]() { return metamorph::sum(forward_replica(w, b, x, true)); };
    CHECK(gradcheck::max_rel_error(inst) < 1e-4);

    // production float gradients agree with the double replica
    for (auto& p : inst.params) p.zero_grad();
    backward(inst.loss());
    Tensor xe = Tensor::zeros({4, 6});
    for (size_t i = 0; i < xe.data().size(); ++i) xe.data()[i] = float(x.data()[i]);
    backward(sum(m.forward(xe)));
    for (size_t li = 0; li < w.size(); ++li) {
        auto& fg = m.weights()[li].grad();
        auto& dg = w[li].grad();
        for (size_t i = 0; i < fg.size(); ++i) {
            double denom = std::max(std::abs(dg[i]), 0.1);
            CHECK(std::abs(double(fg[i]) - dg[i]) / denom < 1e-3);
        }
    }
}

TEST_CASE("extract_kernel: windows and contract errors") {
    std::vector<float> nine = {0, 1, 2, 3, 4, 5, 6, 7, 8};
    CHECK(extract_kernel(nine, 3) == nine);

    std::vector<float> d25(25);
    for (int i = 0; i < 25; ++i) d25[size_t(i)] = float(i);
    std::vector<float> want = {6, 7, 8, 11, 12, 13, 16, 17, 18};
    CHECK(extract_kernel(d25, 3) == want);

    std::vector<float> d16(16, 0.f);
    CHECK_THROWS_AS(extract_kernel(d16, 3), ContractError);  // d = 4 even
    std::vector<float> d8(8, 0.f);
    CHECK_THROWS_AS(extract_kernel(d8, 3), ContractError);  // not a square
    std::vector<float> d1(1, 0.f);
    CHECK_THROWS_AS(extract_kernel(d1, 3), ContractError);  // d < k
}

namespace {

LayerINR make_entry(RngStream& rng, const FourierSpec& fourier, bool disentangled,
                    int head_dim = 9) {
    LayerINR entry;
    entry.info.name = "block.conv1";
    entry.info.layer_index = 2;
    entry.info.num_layers = 5;
    entry.info.in_ref = 4;
    entry.info.out_ref = 6;
    entry.info.normalizer = 8;
    entry.disentangled = disentangled;
    entry.kernel_inr = INRModel(small_cfg(fourier.embedding_length(), head_dim), rng);
    if (disentangled) entry.bias_inr = INRModel(small_cfg(fourier.embedding_length(), 1), rng);
    return entry;
}

}  // namespace

TEST_CASE("generate_layer_weights: shapes, batching, determinism") {
    FourierSpec fourier;
    fourier.num_frequencies = 4;
    RngStream rng(7);
    LayerINR entry = make_entry(rng, fourier, true);

    PerturbationSpec off;
    off.enabled = false;
    RngStream g1(8), g2(9);
    GeneratedLayer a = generate_layer_weights(entry, 2, 3, off, g1, fourier);
    CHECK(a.kernel.shape() == Shape{2, 3, 3, 3});
    CHECK(a.bias.shape() == Shape{2});

    // 2x3 widths -> exactly 6 kernel evaluations and 2 bias evaluations
    RngStream ge(10);
    CHECK(embed_kernel_grid(entry.info, 2, 3, off, ge, fourier).dim(0) == 6);
    CHECK(embed_bias_grid(entry.info, 2, 3, off, ge, fourier).dim(0) == 2);

    // perturbation disabled: identical output regardless of rng state
    GeneratedLayer b = generate_layer_weights(entry, 2, 3, off, g2, fourier);
    CHECK(a.kernel.data() == b.kernel.data());
    CHECK(a.bias.data() == b.bias.data());

    // enabled perturbation changes the result but stays seed-reproducible
    PerturbationSpec on;
    RngStream p1(11), p2(11), p3(12);
    GeneratedLayer c = generate_layer_weights(entry, 2, 3, on, p1, fourier);
    GeneratedLayer d = generate_layer_weights(entry, 2, 3, on, p2, fourier);
    GeneratedLayer e = generate_layer_weights(entry, 2, 3, on, p3, fourier);
    CHECK(c.kernel.data() == d.kernel.data());
    CHECK(c.kernel.data() != e.kernel.data());
    CHECK(c.kernel.data() != a.kernel.data());
}

TEST_CASE("generate_layer_weights: every kernel slice equals its own forward pass") {
    FourierSpec fourier;
    fourier.num_frequencies = 4;
    RngStream rng(13);
    LayerINR entry = make_entry(rng, fourier, true);
    PerturbationSpec off;
    off.enabled = false;
    RngStream g(14);
    GeneratedLayer gen = generate_layer_weights(entry, 2, 3, off, g, fourier);

    for (int co = 1; co <= 2; ++co)
        for (int ci = 1; ci <= 3; ++ci) {
            LayerIndexRef ref{.layer = 2, .num_layers = 5, .in_index = ci, .in_ref = 4,
                              .out_index = co, .out_ref = 6, .normalizer = 8};
            auto emb = fourier_embed(build_coordinate(ref), fourier);
            Tensor one = Tensor::from_data({1, int(emb.size())},
                                           std::vector<float>(emb.begin(), emb.end()));
            Tensor out = entry.kernel_inr.forward(one);
            for (int r = 0; r < 3; ++r)
                for (int cc = 0; cc < 3; ++cc)
                    CHECK(gen.kernel.at({co - 1, ci - 1, r, cc}) ==
                          out.data()[size_t(r * 3 + cc)]);
        }
}

TEST_CASE("generate_layer_weights: disentangled bias is independent of the kernel head") {
    FourierSpec fourier;
    fourier.num_frequencies = 4;
    RngStream rng(15);
    LayerINR entry = make_entry(rng, fourier, true);
    PerturbationSpec off;
    off.enabled = false;
    RngStream g(16);
    GeneratedLayer before = generate_layer_weights(entry, 3, 2, off, g, fourier);

    for (auto& w : entry.kernel_inr.weights())
        for (auto& v : w.data()) v += 0.25f;
    GeneratedLayer after = generate_layer_weights(entry, 3, 2, off, g, fourier);
    CHECK(before.bias.data() == after.bias.data());
    CHECK(before.kernel.data() != after.kernel.data());
}

TEST_CASE("generate_layer_weights: legacy shared head takes central window and first bias value") {
    FourierSpec fourier;
    fourier.num_frequencies = 4;
    RngStream rng(17);
    LayerINR entry = make_entry(rng, fourier, false, 25);
    PerturbationSpec off;
    off.enabled = false;
    RngStream g(18);
    GeneratedLayer gen = generate_layer_weights(entry, 2, 2, off, g, fourier);
    CHECK(gen.kernel.shape() == Shape{2, 2, 3, 3});

    // oracle: raw forward rows -> extract_kernel
    RngStream ge(19);
    Tensor grid = embed_kernel_grid(entry.info, 2, 2, off, ge, fourier);
    Tensor raw = entry.kernel_inr.forward(grid);
    for (int row = 0; row < 4; ++row) {
        std::vector<float> d25(raw.data().begin() + row * 25, raw.data().begin() + (row + 1) * 25);
        auto window = extract_kernel(d25, 3);
        for (int i = 0; i < 9; ++i)
            CHECK(gen.kernel.data()[size_t(row * 9 + i)] == window[size_t(i)]);
    }

    Tensor bgrid = embed_bias_grid(entry.info, 2, 2, off, ge, fourier);
    Tensor braw = entry.kernel_inr.forward(bgrid);
    CHECK(gen.bias.data()[0] == braw.data()[0]);
    CHECK(gen.bias.data()[1] == braw.data()[25]);
}

TEST_CASE("generate_linear_weights: legacy mean-of-D rule") {
    FourierSpec fourier;
    fourier.num_frequencies = 4;
    RngStream rng(20);
    LayerINR entry = make_entry(rng, fourier, false, 9);
    entry.info.kernel_size = 1;
    PerturbationSpec off;
    off.enabled = false;
    RngStream g(21);
    GeneratedLayer gen = generate_linear_weights(entry, 3, 4, off, g, fourier);
    CHECK(gen.kernel.shape() == Shape{3, 4});
    CHECK(gen.bias.shape() == Shape{3});

    RngStream ge(22);
    Tensor raw = entry.kernel_inr.forward(embed_kernel_grid(entry.info, 3, 4, off, ge, fourier));
    for (int r = 0; r < 12; ++r) {
        float mean = 0.f;
        for (int j = 0; j < 9; ++j) mean += raw.data()[size_t(r * 9 + j)];
        mean /= 9.f;
        CHECK(gen.kernel.data()[size_t(r)] == doctest::Approx(mean).epsilon(1e-6));
    }
}

TEST_CASE("generate_layer_weights: gradients reach the INR parameters") {
    FourierSpec fourier;
    fourier.num_frequencies = 4;
    RngStream rng(23);
    LayerINR entry = make_entry(rng, fourier, true);
    PerturbationSpec off;
    off.enabled = false;
    RngStream g(24);
    GeneratedLayer gen = generate_layer_weights(entry, 2, 2, off, g, fourier);
    backward(add(sum(gen.kernel), sum(gen.bias)));

    double knorm = 0, bnorm = 0;
    for (auto& w : entry.kernel_inr.weights())
        for (float v : w.grad()) knorm += std::abs(v);
    for (auto& w : entry.bias_inr.weights())
        for (float v : w.grad()) bnorm += std::abs(v);
    CHECK(knorm > 0.0);
    CHECK(bnorm > 0.0);
}

TEST_CASE("init_from_predecessor: copy semantics and independence") {
    FourierSpec fourier;
    fourier.num_frequencies = 4;
    RngStream r1(25), r2(26);
    INRConfig cfg = small_cfg(fourier.embedding_length(), 9);
    INRModel old_model(cfg, r1);
    INRModel fresh(cfg, r2);
    RngStream re(27);
    Tensor e = Tensor::uniform({3, fourier.embedding_length()}, re, -1.f, 1.f);

    CHECK(old_model.forward(e).data() != fresh.forward(e).data());
    init_from_predecessor(fresh, old_model);
    CHECK(old_model.forward(e).data() == fresh.forward(e).data());

    // independent after the copy: updating one leaves the other unchanged
    Tensor before = old_model.forward(e).clone();
    AdamW opt({.learning_rate = 1e-2f});
    opt.add_params(fresh.parameters());
    backward(sum(fresh.forward(e)));
    opt.step();
    CHECK(fresh.forward(e).data() != old_model.forward(e).data());
    CHECK(old_model.forward(e).data() == before.data());

    INRConfig other = cfg;
    other.width = 8;
    RngStream r3(28);
    INRModel mismatched(other, r3);
    CHECK_THROWS_AS(init_from_predecessor(mismatched, old_model), ContractError);
}
