#include <catch2/catch_amalgamated.hpp>

#include "fixtures.hpp"
#include "mgnerf/field.hpp"
#include "mgnerf/render.hpp"

using namespace mgnerf;

TEST_CASE("field parameter count matches the closed-form layer sum", "[field]") {
    FieldConfig cfg;  // 128 in, 8x256, skip at layer 5 (0-based 4)
    size_t expect = 0;
    expect += size_t(256) * 128 + 256;          // layer 1
    expect += 3 * (size_t(256) * 256 + 256);    // layers 2-4
    expect += size_t(256) * (256 + 128) + 256;  // layer 5 with skip
    expect += 3 * (size_t(256) * 256 + 256);    // layers 6-8
    expect += 256 + 1;                          // density head
    expect += size_t(3) * 256 + 3;              // color head
    CHECK(cfg.param_count() == expect);
}

TEST_CASE("init_field is deterministic and biases density to ~0.1", "[field]") {
    FieldConfig cfg;
    auto a = init_field<double>(7, cfg);
    auto b = init_field<double>(7, cfg);
    CHECK(a == b);
    auto c = init_field<double>(8, cfg);
    CHECK(a != c);
    CHECK(softplus_value(a[cfg.sigma_head_offset() + 256]) == Catch::Approx(0.1).margin(1e-12));
}

TEST_CASE("query_field at zero parameters and zero input", "[field]") {
    FieldConfig cfg;
    cfg.input_dim = 16;
    cfg.width = 8;
    cfg.depth = 3;
    cfg.skip_layer = 1;
    std::vector<double> zeros(cfg.param_count(), 0.0);
    FieldSample s = query_field(zeros, cfg, std::vector<double>(16, 0.0));
    CHECK(s.sigma == Catch::Approx(std::log(2.0)));
    CHECK(s.color.x == Catch::Approx(0.5));
    CHECK(s.color.y == Catch::Approx(0.5));
    CHECK(s.color.z == Catch::Approx(0.5));

    CHECK_THROWS_AS(query_field(zeros, cfg, std::vector<double>(15, 0.0)), ConfigError);
}

TEST_CASE("field outputs stay in range over random inputs", "[field]") {
    FieldConfig cfg;
    cfg.input_dim = 24;
    cfg.width = 32;
    cfg.depth = 4;
    cfg.skip_layer = 2;
    auto params = init_field<double>(3, cfg);
    // exaggerate weights so the heads see large pre-activations
    for (auto& p : params) p *= 20.0;
    Rng rng(9);
    for (int i = 0; i < 10000; ++i) {
        std::vector<double> q(24);
        for (auto& v : q) v = 3.0 * rng.normal();
        FieldSample s = query_field(params, cfg, q);
        CHECK(s.sigma >= 0.0);
        CHECK(s.color.x >= 0.0);
        CHECK(s.color.x <= 1.0);
        CHECK(s.color.y >= 0.0);
        CHECK(s.color.y <= 1.0);
        CHECK(s.color.z >= 0.0);
        CHECK(s.color.z <= 1.0);
    }
}

TEST_CASE("field jacobian w.r.t. the embedding matches finite differences", "[field]") {
    FieldConfig cfg;
    cfg.input_dim = 12;
    cfg.width = 16;
    cfg.depth = 4;
    cfg.skip_layer = 2;
    ParamStore<double> store;
    store.add_array("q", std::vector<double>(12, 0.0));
    store.add_array("field", init_field<double>(5, cfg));
    Rng rng(11);
    for (auto& v : store.arrays[0].w) v = 0.5 * rng.normal();

    auto eval = [&] {
        FieldSample s = query_field(store.arrays[1].w, cfg, store.arrays[0].w);
        return 2.0 * s.sigma + s.color.x - 0.3 * s.color.y + 0.7 * s.color.z;
    };
    GradBuffers<double> gb;
    gb.init_like(store);
    {
        Tape<double> tape;
        std::vector<Var<double>> q;
        for (int i = 0; i < 12; ++i) q.push_back(tape.leaf(store.arrays[0].w[size_t(i)], 0, i));
        auto out = field_tape_apply(tape, cfg, 1, store.arrays[1].w.data(), q, 1);
        auto s = out[0].sigma * 2.0 + out[0].color.x - out[0].color.y * 0.3 + out[0].color.z * 0.7;
        tape.backward(s, gb);
    }
    FdReport rep = finite_diff_check(store, eval, gb, 1e-6, 80, 13);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("initial field renders near-uniform low opacity", "[field][render]") {
    Rig rig = make_procedural_body(4);
    PosedMesh pm = fix::rest_mesh(rig);
    EmbeddingConfig ecfg;
    FieldConfig fcfg;
    auto psi = init_mlp<double>(ecfg.psi_shape(), 31);
    auto fp = init_field<double>(32, fcfg);
    PlainCtx<double> ctx{&ecfg, &fcfg, psi.data(), fp.data(), rig.mesh.latents.data()};
    DiffBody<double> body(rig.mesh, lift_part_transforms<double>(pm.part_transforms));

    Camera cam;
    cam.fx = cam.fy = 120;
    cam.cx = cam.cy = 32;
    cam.width = cam.height = 64;
    cam.rotation = Mat3d::identity();
    cam.translation = {0, -0.95, 4.2};
    RenderParams rp;
    rp.n_coarse = 16;
    rp.n_fine = 16;

    double alpha_sum = 0.0;
    int n = 0;
    Rng rng(17);
    for (int i = 0; i < 64; ++i) {
        int u = 16 + int(rng.below(32)), v = 16 + int(rng.below(32));
        auto r = render_pixel(ctx, body, pm, cam, u, v, rp, derive_seed(3, uint64_t(i)));
        alpha_sum += value_of(r.alpha);
        ++n;
    }
    CHECK(alpha_sum / n < 0.2);
}
