#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "qunet/losses.hpp"
#include "qunet/model.hpp"
#include "testutil.hpp"

using namespace qunet;

namespace {

// Independent parameter enumeration straight from the architecture table:
// per encoder stage two 3x3 convs with channel doubling, bottleneck block,
// per decoder stage one 2x2 transpose conv plus two 3x3 convs on the
// concatenated channels, and a 1x1 head. All layers carry biases.
int64_t enumerate_params(int64_t base, int64_t in_ch, int64_t out_ch, int depth) {
    auto conv = [](int64_t ci, int64_t co, int64_t k) { return co * ci * k * k + co; };
    std::vector<int64_t> ch;
    for (int i = 0; i <= depth; ++i) ch.push_back(base << i);
    int64_t total = 0;
    int64_t prev = in_ch;
    for (int i = 0; i < depth; ++i) {
        total += conv(prev, ch[i], 3) + conv(ch[i], ch[i], 3);
        prev = ch[i];
    }
    total += conv(ch[depth - 1], ch[depth], 3) + conv(ch[depth], ch[depth], 3);
    for (int i = depth - 1; i >= 0; --i) {
        total += ch[i + 1] * ch[i] * 4 + ch[i];  // transpose conv
        total += conv(2 * ch[i], ch[i], 3) + conv(ch[i], ch[i], 3);
    }
    total += conv(ch[0], out_ch, 1);
    return total;
}

}  // namespace

TEST_CASE("parameter enumeration oracle vs built model") {
    UNetConfig cfg;
    cfg.base_channels = 8;
    auto m = build_unet<float>(cfg, 1);
    CHECK(param_count(m) == enumerate_params(8, 1, 1, 4));
    CHECK(param_count(m) == 485673);  // frozen regression constant

    UNetConfig big;
    big.base_channels = 64;
    auto mb = build_unet<float>(big, 1);
    CHECK(param_count(mb) == enumerate_params(64, 1, 1, 4));
    // frozen from the enumeration oracle, cross-checked against a PyTorch
    // model of the same table (both give 31,030,593)
    CHECK(param_count(mb) == 31030593);
}

TEST_CASE("empty model has zero parameters") {
    QuantUNet<float> empty;
    CHECK(param_count(empty) == 0);
}

TEST_CASE("exactly 23 quantized weight layers for any config") {
    for (int base : {1, 4, 8, 16}) {
        UNetConfig cfg;
        cfg.base_channels = base;
        auto m = build_unet<float>(cfg, base);
        CHECK(m.layers.size() == 23);
        CHECK(bitwidth_params(m).size() == 23);
    }
}

TEST_CASE("layer names: order, stability, endpoints") {
    UNetConfig cfg;
    cfg.base_channels = 4;
    auto m1 = build_unet<float>(cfg, 7);
    auto m2 = build_unet<float>(cfg, 999);
    auto n1 = quant_layer_names(m1);
    auto n2 = quant_layer_names(m2);
    REQUIRE(n1.size() == 23);
    CHECK(n1 == n2);
    CHECK(n1.front() == "enc1.conv1");
    CHECK(n1.back() == "outseg");
    CHECK(n1[8] == "bottleneck.conv1");
    CHECK(n1[10] == "up4");
    CHECK(n1[21] == "dec1.conv2");
}

TEST_CASE("layer shapes match the architecture table") {
    UNetConfig cfg;
    cfg.base_channels = 8;
    auto m = build_unet<float>(cfg, 3);
    CHECK(m.layer("enc1.conv1").weight->value.shape == std::vector<int64_t>{8, 1, 3, 3});
    CHECK(m.layer("enc4.conv2").weight->value.shape == std::vector<int64_t>{64, 64, 3, 3});
    CHECK(m.layer("bottleneck.conv1").weight->value.shape == std::vector<int64_t>{128, 64, 3, 3});
    CHECK(m.layer("up4").weight->value.shape == std::vector<int64_t>{128, 64, 2, 2});
    CHECK(m.layer("up4").kind == LayerKind::UpConv);
    CHECK(m.layer("dec4.conv1").weight->value.shape == std::vector<int64_t>{64, 128, 3, 3});
    CHECK(m.layer("outseg").weight->value.shape == std::vector<int64_t>{1, 8, 1, 1});
    CHECK(m.layer("outseg").kind == LayerKind::Conv1x1);
    for (auto& l : m.layers) {
        CHECK(l.bias->value.shape == std::vector<int64_t>{l.weight->value.shape[l.kind == LayerKind::UpConv ? 1 : 0]});
        CHECK(l.qp.value() == 4.0f);
    }
}

TEST_CASE("same seed builds bit-identical weights") {
    UNetConfig cfg;
    cfg.base_channels = 4;
    auto a = build_unet<float>(cfg, 42);
    auto b = build_unet<float>(cfg, 42);
    for (size_t i = 0; i < a.layers.size(); ++i) {
        REQUIRE(a.layers[i].weight->value.data == b.layers[i].weight->value.data);
        REQUIRE(a.layers[i].bias->value.data == b.layers[i].bias->value.data);
    }
    auto c = build_unet<float>(cfg, 43);
    CHECK(a.layers[0].weight->value.data != c.layers[0].weight->value.data);
}

TEST_CASE("invalid configs are rejected") {
    UNetConfig cfg;
    cfg.base_channels = 0;
    CHECK_THROWS_AS(build_unet<float>(cfg, 1), std::invalid_argument);
    UNetConfig bad_bits;
    bad_bits.base_channels = 4;
    bad_bits.act_bits = 9;
    CHECK_THROWS_AS(build_unet<float>(bad_bits, 1), std::invalid_argument);
}

TEST_CASE("forward shape round-trip and probability range at desk scale") {
    UNetConfig cfg;
    cfg.base_channels = 8;
    auto m = build_unet<float>(cfg, 11);
    Rng rng(5);
    Tensor<float> x({2, 1, 64, 64});
    for (auto& v : x.data) v = float(rng.uniform(0, 1));
    auto y = forward(m, x, true);
    REQUIRE(y->value.shape == std::vector<int64_t>{2, 1, 64, 64});
    for (auto v : y->value.data) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
    }
    CHECK(y->value.all_finite());
}

TEST_CASE("shape round-trip holds for several divisible sizes") {
    UNetConfig cfg;
    cfg.base_channels = 2;
    auto m = build_unet<float>(cfg, 1);
    for (int64_t hw : {16, 32, 48}) {
        Tensor<float> x({1, 1, hw, hw});
        auto y = forward(m, x, false);
        CHECK(y->value.shape == std::vector<int64_t>{1, 1, hw, hw});
    }
}

TEST_CASE("indivisible spatial dims are rejected") {
    UNetConfig cfg;
    cfg.base_channels = 2;
    auto m = build_unet<float>(cfg, 1);
    Tensor<float> x({1, 1, 24, 24});
    CHECK_THROWS_AS(forward(m, x, false), std::invalid_argument);
    Tensor<float> wrongc({1, 2, 32, 32});
    CHECK_THROWS_AS(forward(m, wrongc, false), std::invalid_argument);
}

TEST_CASE("baseline forward is pure floating point; quantized at 8 bits stays close") {
    UNetConfig qcfg;
    qcfg.base_channels = 4;
    qcfg.quantized = true;
    qcfg.init_bitwidth = 8.0;
    UNetConfig fcfg = qcfg;
    fcfg.quantized = false;

    auto qm = build_unet<float>(qcfg, 77);
    auto fm = build_unet<float>(fcfg, 77);
    // identical weights from the same seed
    for (size_t i = 0; i < qm.layers.size(); ++i)
        REQUIRE(qm.layers[i].weight->value.data == fm.layers[i].weight->value.data);

    Rng rng(9);
    Tensor<float> x({1, 1, 32, 32});
    for (auto& v : x.data) v = float(rng.uniform(0, 1));

    // converge the EMA ranges on this input before comparing
    for (int i = 0; i < 300; ++i) forward(qm, x, true);

    auto yq = forward(qm, x, false);
    auto yf = forward(fm, x, false);
    float maxdiff = 0;
    for (int64_t i = 0; i < yq->value.numel(); ++i)
        maxdiff = std::max(maxdiff, std::abs(yq->value.data[size_t(i)] - yf->value.data[size_t(i)]));
    CHECK(maxdiff < 0.05f);
}

TEST_CASE("one backward pass reaches every bitwidth parameter") {
    UNetConfig cfg;
    cfg.base_channels = 4;
    auto m = build_unet<float>(cfg, 3);
    Rng rng(21);
    Tensor<float> x({2, 1, 32, 32});
    Tensor<float> t({2, 1, 32, 32});
    for (auto& v : x.data) v = float(rng.uniform(0, 1));
    for (auto& v : t.data) v = rng.uniform() < 0.3 ? 1.0f : 0.0f;

    auto pred = forward(m, x, true);
    auto loss = total_loss(pred, t, bitwidth_params(m), 0.25);
    backward(loss.total);
    for (auto& l : m.layers) {
        REQUIRE(l.qp.b_param->has_grad());
        CHECK(l.qp.b_param->grad.data[0] != 0.0f);
    }
    // weights and biases get gradients too
    for (auto& l : m.layers) {
        CHECK(l.weight->has_grad());
        CHECK(l.bias->has_grad());
    }
}

TEST_CASE("model_cast widens float weights losslessly") {
    UNetConfig cfg;
    cfg.base_channels = 4;
    auto m = build_unet<float>(cfg, 5);
    m.layers[0].act.running_max = 1.5f;
    m.input_act.running_max = 0.75f;
    auto d = model_cast<double>(m);
    CHECK(d.cfg == m.cfg);
    CHECK(d.input_act.running_max == 0.75);
    CHECK(d.layers[0].act.running_max == 1.5);
    for (size_t i = 0; i < m.layers.size(); ++i)
        for (size_t j = 0; j < m.layers[i].weight->value.data.size(); ++j)
            CHECK(d.layers[i].weight->value.data[j] ==
                  double(m.layers[i].weight->value.data[j]));
}

TEST_CASE("layer_input_steps mirrors the forward wiring when frozen") {
    UNetConfig cfg;
    cfg.base_channels = 4;
    auto m = build_unet<float>(cfg, 13);
    Rng rng(31);
    Tensor<float> x({1, 1, 32, 32});
    for (auto& v : x.data) v = float(rng.uniform(0, 1));
    for (int i = 0; i < 20; ++i) forward(m, x, true);
    freeze_act_states(m);

    auto steps = layer_input_steps(m);
    REQUIRE(steps.size() == 23);
    // first conv sees the input site grid
    CHECK(steps[0] == std::max(m.input_act.running_max, float(kQuantEps)) / 255.0f);
    // second conv of a block sees the first conv's site
    CHECK(steps[1] == std::max(m.layer("enc1.conv1").act.running_max, float(kQuantEps)) / 255.0f);
    // dec4.conv1 sees the unified concat grid (signed upconv site has 127 levels)
    float up4 = std::max(m.layer("up4").act.running_max, float(kQuantEps)) / 127.0f;
    float skip = std::max(m.layer("enc4.conv2").act.running_max, float(kQuantEps)) / 255.0f;
    CHECK(steps[11] == std::max(up4, skip));
}
