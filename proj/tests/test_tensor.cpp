#include <doctest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "refmath.hpp"
#include "unips/checkpoint.hpp"
#include "unips/nn.hpp"
#include "unips/ops.hpp"
#include "unips/optim.hpp"

using namespace unips;
using unips::testing::gradcheck;

namespace {
Tensor rand_input(const Shape& shape, uint64_t seed, float scale = 1.0f, bool rg = true) {
    std::mt19937_64 rng(seed);
    return Tensor::randn(shape, rng, scale, rg);
}
}  // namespace

TEST_CASE("matmul identity and hand expansion") {
    Tensor id = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor m = Tensor::from_data({2, 2}, {3, 4, 5, 6});
    Tensor out = matmul(id, m);
    CHECK(out.data() == std::vector<float>({3, 4, 5, 6}));

    Tensor a = Tensor::from_data({1, 2}, {1, 2});
    Tensor b = Tensor::from_data({2, 1}, {3, 4});
    CHECK(matmul(a, b).scalar() == doctest::Approx(11.0f));
}

TEST_CASE("matmul shape error names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradients match finite differences") {
    Tensor a = rand_input({5, 7}, 11);
    Tensor b = rand_input({7, 3}, 12);
    auto report = gradcheck({{"a", a}, {"b", b}},
                            [&] { return matmul(a, b); }, 13);
    CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("batched_matmul gradients") {
    // positive factors keep every gradient bounded away from the FD noise floor
    std::mt19937_64 rng(21);
    Tensor a = Tensor::uniform({3, 4, 5}, rng, 0.3f, 1.3f, true);
    Tensor b = Tensor::uniform({3, 5, 2}, rng, 0.4f, 1.6f, true);
    auto report = gradcheck({{"a", a}, {"b", b}},
                            [&] { return batched_matmul(a, b); }, 23);
    CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("layernorm basics") {
    Tensor gain = Tensor::from_data({3}, {1, 1, 1});
    Tensor bias = Tensor::from_data({3}, {0, 0, 0});
    Tensor constant_row = Tensor::from_data({1, 3}, {5, 5, 5});
    Tensor out = layernorm(constant_row, gain, bias, 1e-5f);
    for (float v : out.data()) CHECK(v == doctest::Approx(0.0f));

    Tensor g2 = Tensor::from_data({2}, {1, 1});
    Tensor b2 = Tensor::from_data({2}, {0, 0});
    Tensor pm = Tensor::from_data({1, 2}, {1, -1});
    Tensor out2 = layernorm(pm, g2, b2, 1e-12f);
    CHECK(out2.data()[0] == doctest::Approx(1.0f).epsilon(1e-5));
    CHECK(out2.data()[1] == doctest::Approx(-1.0f).epsilon(1e-5));

    CHECK_THROWS_AS(layernorm(pm, g2, b2, 0.0f), ConfigError);
    CHECK_THROWS_AS(layernorm(pm, g2, b2, -1.0f), ConfigError);
}

TEST_CASE("layernorm gradients match finite differences") {
    Tensor x = rand_input({4, 8}, 31);
    Tensor gain = rand_input({8}, 32, 0.5f);
    Tensor bias = rand_input({8}, 33, 0.5f);
    auto report = gradcheck({{"x", x}, {"gain", gain}, {"bias", bias}},
                            [&] { return layernorm(x, gain, bias, 1e-5f); }, 34);
    CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("softmax symmetry, stability, normalization") {
    Tensor z = Tensor::from_data({3}, {0, 0, 0});
    Tensor sz = softmax_lastdim(z);
    for (float v : sz.data()) CHECK(v == doctest::Approx(1.0f / 3));

    Tensor big = Tensor::from_data({2}, {1000, 0});
    Tensor s = softmax_lastdim(big);
    CHECK(s.all_finite());
    CHECK(s.data()[0] == doctest::Approx(1.0f));
    CHECK(s.data()[1] == doctest::Approx(0.0f));

    Tensor r = rand_input({1, 9}, 41, 2.0f, false);
    Tensor sr = softmax_lastdim(r);
    double sum = 0;
    for (float v : sr.data()) sum += v;
    CHECK(std::fabs(sum - 1.0) < 1e-6);
}

TEST_CASE("softmax gradients") {
    Tensor x = rand_input({3, 4}, 43, 1.5f);
    auto report = gradcheck({{"x", x}}, [&] { return softmax_lastdim(x); }, 44);
    CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("gelu gradients") {
    Tensor x = rand_input({4, 5}, 51);
    auto report = gradcheck({{"x", x}}, [&] { return gelu(x); }, 52);
    CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("attention core: exact and blas paths") {
    // fused double-accumulation core
    Tensor q = rand_input({2, 3, 4}, 61, 0.7f);
    Tensor k = rand_input({2, 5, 4}, 62, 0.7f);
    Tensor v = rand_input({2, 5, 4}, 63, 0.7f);
    auto report = gradcheck({{"q", q}, {"k", k}, {"v", v}},
                            [&] { return attention_core(q, k, v); }, 64);
    CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("multi_head_attention single token equals value path") {
    ParamStore ps(7);
    AttentionLayer attn(ps, "attn", 8, 2, /*exact_axis=*/false);
    Tensor x = rand_input({1, 1, 8}, 71, 1.0f, false);
    Tensor out = attn.forward(x, x, x);
    // softmax over a singleton forces weight 1: out == wo(wv(x))
    Tensor expected = attn.wo.forward(attn.wv.forward(x));
    for (int64_t i = 0; i < out.numel(); ++i) {
        CHECK(out.data()[i] == doctest::Approx(expected.data()[i]).epsilon(1e-5));
    }
}

TEST_CASE("multi_head_attention invariant to joint key/value permutation") {
    for (bool exact : {false, true}) {
        ParamStore ps(8);
        AttentionLayer attn(ps, "attn", 8, 2, exact);
        Tensor q = rand_input({1, 2, 8}, 81, 1.0f, false);
        Tensor kv = rand_input({1, 4, 8}, 82, 1.0f, false);
        Tensor out1 = attn.forward(q, kv, kv);
        // reverse the token order in k and v jointly
        std::vector<float> rev(kv.numel());
        for (int t = 0; t < 4; ++t) {
            std::copy(kv.ptr() + t * 8, kv.ptr() + (t + 1) * 8, rev.begin() + (3 - t) * 8);
        }
        Tensor kv_rev = Tensor::from_data({1, 4, 8}, rev);
        Tensor out2 = attn.forward(q, kv_rev, kv_rev);
        for (int64_t i = 0; i < out1.numel(); ++i) {
            CHECK(out1.data()[i] == doctest::Approx(out2.data()[i]).epsilon(1e-5));
        }
    }
}

TEST_CASE("multi_head_attention gradcheck on all projection weights") {
    namespace ref = unips::testing::ref;
    ParamStore ps(9);
    AttentionLayer attn(ps, "attn", 8, 2, /*exact_axis=*/true);
    Tensor x = rand_input({2, 3, 8}, 91, 0.8f, false);
    std::vector<std::pair<std::string, Tensor>> params;
    for (auto& e : ps.entries()) params.emplace_back(e.name, e.tensor);
    auto ref_fwd = [&]() {
        ref::MhaWeights w{ref::to_d(attn.wq.w), ref::to_d(attn.wq.b), ref::to_d(attn.wk.w),
                          ref::to_d(attn.wv.w), ref::to_d(attn.wv.b), ref::to_d(attn.wo.w),
                          ref::to_d(attn.wo.b)};
        ref::dvec xd = ref::to_d(x);
        return ref::mha(xd, xd, xd, 2, 3, 3, 8, 2, w);
    };
    auto report = unips::testing::refcheck(params, [&] { return attn.forward(x, x, x); },
                                           ref_fwd, 92);
    CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("attention dim must divide heads") {
    ParamStore ps(10);
    CHECK_THROWS_AS(AttentionLayer(ps, "bad", 10, 4, false), ConfigError);
}

TEST_CASE("transformer block gradcheck (deep composition budget)") {
    ParamStore ps(11);
    TransformerBlock block(ps, "blk", 8, 2, 16, /*exact_axis=*/true);
    Tensor x = rand_input({2, 3, 8}, 111, 0.8f, false);
    std::vector<std::pair<std::string, Tensor>> params;
    for (auto& e : ps.entries()) params.emplace_back(e.name, e.tensor);
    auto report = gradcheck(params, [&] { return block.forward(x); }, 112);
    CHECK(report.max_rel_err < 1e-2);
}

TEST_CASE("gather, concat, permute, reshape, upsample gradients") {
    Tensor x = rand_input({2, 6, 3}, 121);
    auto r1 = gradcheck({{"x", x}}, [&] { return gather_dim1(x, {5, 0, 3}); }, 122);
    CHECK(r1.max_rel_err < 1e-3);

    Tensor a = rand_input({2, 3}, 123);
    Tensor b = rand_input({2, 4}, 124);
    auto r2 = gradcheck({{"a", a}, {"b", b}}, [&] { return concat_lastdim(a, b); }, 125);
    CHECK(r2.max_rel_err < 1e-3);

    Tensor p = rand_input({2, 3, 4}, 126);
    auto r3 = gradcheck({{"p", p}}, [&] { return reshape(permute(p, {2, 0, 1}), {4, 6}); }, 127);
    CHECK(r3.max_rel_err < 1e-3);

    Tensor img = rand_input({1, 3, 3, 2}, 128);
    auto r4 = gradcheck({{"img", img}}, [&] { return bilinear_upsample(img, 6, 6); }, 129);
    CHECK(r4.max_rel_err < 1e-3);
}

TEST_CASE("conv and patch embed layers gradcheck") {
    ParamStore ps(13);
    Conv3x3Layer conv(ps, "conv", 2, 3);
    PatchEmbedLayer embed(ps, "embed", 2, 3, 4);
    Tensor img = rand_input({1, 4, 4, 2}, 131, 0.8f, false);
    Tensor img3 = rand_input({2, 4, 4, 3}, 132, 0.8f, false);
    std::vector<std::pair<std::string, Tensor>> params;
    for (auto& e : ps.entries()) params.emplace_back(e.name, e.tensor);
    auto r1 = gradcheck(params, [&] { return conv.forward(img); }, 133);
    CHECK(r1.max_rel_err < 1e-3);
    auto r2 = gradcheck(params, [&] { return embed.forward(img3); }, 134);
    CHECK(r2.max_rel_err < 1e-3);
}

TEST_CASE("l2 normalize rows and gradients") {
    Tensor x = rand_input({5, 3}, 141);
    Tensor y = l2_normalize_lastdim(x);
    for (int r = 0; r < 5; ++r) {
        double n = 0;
        for (int c = 0; c < 3; ++c) n += double(y.data()[r * 3 + c]) * y.data()[r * 3 + c];
        CHECK(std::fabs(std::sqrt(n) - 1.0) < 1e-6);
    }
    auto report = gradcheck({{"x", x}}, [&] { return l2_normalize_lastdim(x); }, 148);
    CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("pma pools the set axis and is order invariant") {
    ParamStore ps(15);
    PmaLayer pma(ps, "pma", 8, 2);
    Tensor x = rand_input({3, 5, 8}, 151, 1.0f, false);
    Tensor out = pma.forward(x);
    CHECK(out.shape() == Shape({3, 8}));

    // reverse the set axis
    std::vector<float> rev(x.numel());
    for (int b = 0; b < 3; ++b) {
        for (int s = 0; s < 5; ++s) {
            std::copy(x.ptr() + (b * 5 + s) * 8, x.ptr() + (b * 5 + s + 1) * 8,
                      rev.begin() + (b * 5 + (4 - s)) * 8);
        }
    }
    Tensor out2 = pma.forward(Tensor::from_data({3, 5, 8}, rev));
    for (int64_t i = 0; i < out.numel(); ++i) {
        CHECK(out.data()[i] == doctest::Approx(out2.data()[i]).epsilon(1e-6));
    }
}

TEST_CASE("backward: sum and square analytic gradients") {
    Tensor p = rand_input({6}, 161);
    Tape::current().clear();
    backward(sum_all(p));
    for (float g : p.grad()) CHECK(g == doctest::Approx(1.0f));
    Tape::current().clear();
    p.drop_grad();

    backward(sum_all(mul(p, p)));
    for (int i = 0; i < 6; ++i) {
        CHECK(p.grad()[i] == doctest::Approx(2.0f * p.data()[i]).epsilon(1e-5));
    }
    Tape::current().clear();
}

TEST_CASE("backward rejects non-scalar loss") {
    Tensor p = rand_input({3}, 171);
    Tape::current().clear();
    Tensor y = mul(p, p);
    CHECK_THROWS_AS(backward(y), ContractError);
    Tape::current().clear();
}

TEST_CASE("tape accumulates gradients across consumers") {
    Tensor x = rand_input({4}, 181);
    Tape::current().clear();
    Tensor y = scale(x, 2.0f);
    Tensor z = scale(x, 3.0f);
    backward(add(sum_all(y), sum_all(z)));
    for (float g : x.grad()) CHECK(g == doctest::Approx(5.0f));
    Tape::current().clear();
}

TEST_CASE("unreached parameters keep absent gradients") {
    Tensor used = rand_input({3}, 191);
    Tensor unused = rand_input({3}, 192);
    Tape::current().clear();
    backward(sum_all(used));
    CHECK(used.has_grad());
    CHECK(!unused.has_grad());
    Tape::current().clear();
}

TEST_CASE("no-grad guard keeps the tape empty") {
    Tensor x = rand_input({3}, 195);
    Tape::current().clear();
    {
        NoGradGuard guard;
        Tensor y = mul(x, x);
        CHECK(!y.requires_grad());
    }
    CHECK(Tape::current().size() == 0);
}

TEST_CASE("determinism: identical seeds give identical tensors") {
    Tensor a = rand_input({32}, 201);
    Tensor b = rand_input({32}, 201);
    CHECK(a.data() == b.data());
}

TEST_CASE("adamw: zero grad and zero decay leave parameters unchanged") {
    ParamStore ps(21);
    Tensor p = ps.normal("p", {4}, 1.0f);
    std::vector<float> before = p.data();
    AdamWConfig cfg;
    cfg.weight_decay = 0.0f;
    AdamW opt(ps, cfg);
    p.grad();  // allocate zeros
    opt.step(1e-3f);
    CHECK(p.data() == before);
}

TEST_CASE("adamw: update opposes gradient") {
    ParamStore ps(22);
    Tensor p = ps.zeros("p", {1});
    p.data()[0] = 1.0f;
    AdamWConfig cfg;
    cfg.lr = 0.1f;
    cfg.weight_decay = 0.0f;
    AdamW opt(ps, cfg);
    p.grad()[0] = 1.0f;
    opt.step(0.1f);
    CHECK(p.data()[0] < 1.0f);
}

TEST_CASE("adamw converges on a quadratic bowl") {
    ParamStore ps(23);
    Tensor p = ps.zeros("p", {1});
    p.data()[0] = 1.0f;
    AdamWConfig cfg;
    cfg.lr = 0.05f;
    cfg.weight_decay = 0.0f;
    AdamW opt(ps, cfg);
    for (int i = 0; i < 200; ++i) {
        p.drop_grad();
        p.grad()[0] = 2.0f * p.data()[0];
        opt.step(cfg.lr);
    }
    CHECK(std::fabs(p.data()[0]) < 1e-2);
}

TEST_CASE("adamw aborts on NaN gradient naming the parameter") {
    ParamStore ps(24);
    Tensor p = ps.zeros("model.layer.weight", {2});
    AdamW opt(ps, {});
    p.grad()[0] = std::numeric_limits<float>::quiet_NaN();
    try {
        opt.step(1e-3f);
        FAIL("expected error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("model.layer.weight") != std::string::npos);
    }
}

TEST_CASE("lr schedule: warmup then step decay") {
    LrSchedule sched;
    sched.iters_per_epoch = 10;
    sched.warmup_iters = 10;
    sched.decay_every_epochs = 10;
    sched.decay_factor = 0.8f;
    const float base = 1e-4f;
    // linear warmup across epoch 1
    CHECK(sched.lr_at(0, base) == doctest::Approx(base * 0.1f));
    CHECK(sched.lr_at(9, base) == doctest::Approx(base));
    // epochs 2..10 hold the base rate
    CHECK(sched.lr_at(10, base) == doctest::Approx(base));
    CHECK(sched.lr_at(99, base) == doctest::Approx(base));
    // epoch 11 decays once
    CHECK(sched.lr_at(100, base) == doctest::Approx(base * 0.8f));
    CHECK(sched.lr_at(199, base) == doctest::Approx(base * 0.8f));
    CHECK(sched.lr_at(200, base) == doctest::Approx(base * 0.64f));
    for (int64_t i = 0; i < 300; ++i) CHECK(sched.lr_at(i, base) > 0.0f);
}

TEST_CASE("gradient clipping scales to the target norm") {
    ParamStore ps(25);
    Tensor p = ps.zeros("p", {2});
    AdamW opt(ps, {});
    p.grad()[0] = 3.0f;
    p.grad()[1] = 4.0f;
    double norm = opt.clip_grad_norm(1.0);
    CHECK(norm == doctest::Approx(5.0));
    CHECK(p.grad()[0] == doctest::Approx(0.6f));
    CHECK(p.grad()[1] == doctest::Approx(0.8f));
}

TEST_CASE("checkpoint round trip is bit exact") {
    ParamStore ps(26);
    ps.normal("enc.w", {4, 3}, 1.0f);
    ps.normal("dec.w", {2, 2, 2}, 0.5f);
    ps.zeros("dec.b", {5});
    const std::string path = "/tmp/unips_test_ckpt.bin";
    save_checkpoint(path, ps, "{\"kind\":\"test\"}");

    Checkpoint ckpt = load_checkpoint(path);
    CHECK(ckpt.meta_json == "{\"kind\":\"test\"}");
    REQUIRE(ckpt.records.size() == 3);
    for (const auto& rec : ckpt.records) {
        Tensor* t = ps.find(rec.name);
        REQUIRE(t != nullptr);
        CHECK(rec.shape == t->shape());
        CHECK(rec.values == t->data());  // bit-exact f32 payload
    }

    ParamStore ps2(999);  // different seed: values differ until applied
    ps2.normal("enc.w", {4, 3}, 1.0f);
    ps2.normal("dec.w", {2, 2, 2}, 0.5f);
    ps2.zeros("dec.b", {5});
    apply_checkpoint(ckpt, ps2);
    for (size_t i = 0; i < ps.entries().size(); ++i) {
        CHECK(ps.entries()[i].tensor.data() == ps2.entries()[i].tensor.data());
    }
}

TEST_CASE("checkpoint apply rejects shape mismatch") {
    ParamStore ps(27);
    ps.zeros("w", {2, 2});
    const std::string path = "/tmp/unips_test_ckpt2.bin";
    save_checkpoint(path, ps, "");
    Checkpoint ckpt = load_checkpoint(path);

    ParamStore wrong(28);
    wrong.zeros("w", {2, 3});
    CHECK_THROWS_AS(apply_checkpoint(ckpt, wrong), IoError);
}

TEST_CASE("frozen prefix stops gradients and optimizer updates") {
    ParamStore ps(29);
    Tensor frozen = ps.normal("backbone.w", {3}, 1.0f);
    Tensor live = ps.normal("head.w", {3}, 1.0f);
    ps.freeze_prefix("backbone.");
    CHECK(!frozen.requires_grad());
    CHECK(live.requires_grad());

    std::vector<float> frozen_before = frozen.data();
    Tape::current().clear();
    Tensor loss = add(sum_all(scale(frozen, 2.0f)), sum_all(mul(live, live)));
    backward(loss);
    CHECK(!frozen.has_grad());
    CHECK(live.has_grad());

    AdamW opt(ps, {});
    opt.step(1e-2f);
    CHECK(frozen.data() == frozen_before);
    Tape::current().clear();
}
