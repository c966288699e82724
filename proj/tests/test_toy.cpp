#include "refsplat/toy.hpp"

#include "refsplat/image_ops.hpp"
#include "refsplat/mask_consolidation.hpp"

#include "test_support.hpp"

#include <doctest.h>

using namespace refsplat;
using namespace refsplat::testing;

namespace {

ToyConfig small_toy() {
    ToyConfig c;
    c.width = 32;
    c.height = 32;
    c.focal = 28.0;
    c.views = 8;
    c.threads = 1;
    return c;
}

bool same_image(const RgbImage& a, const RgbImage& b) {
    return (a[0] == b[0]).all() && (a[1] == b[1]).all() && (a[2] == b[2]).all();
}

}  // namespace

TEST_CASE("toy scenes are deterministic per seed") {
    const ToyScene a = make_toy_scene(11, small_toy());
    const ToyScene b = make_toy_scene(11, small_toy());
    const ToyScene c = make_toy_scene(12, small_toy());
    REQUIRE(a.augmented.size() == b.augmented.size());
    for (std::size_t i = 0; i < a.augmented.size(); ++i) {
        const auto& p = a.augmented.particles[i];
        const auto& q = b.augmented.particles[i];
        CHECK((p.position == q.position && p.log_scale == q.log_scale && p.rotation == q.rotation &&
               p.opacity_logit == q.opacity_logit && p.sh == q.sh && p.label == q.label));
    }
    for (std::size_t v = 0; v < a.views.size(); ++v) {
        CHECK(a.views[v].world_to_camera == b.views[v].world_to_camera);
        CHECK(same_image(a.views[v].image, b.views[v].image));
        CHECK((a.views[v].mask == b.views[v].mask).all());
        CHECK(same_image(a.ground_truth[v], b.ground_truth[v]));
    }
    CHECK(a.augmented.particles[0].position != c.augmented.particles[0].position);
}

TEST_CASE("toy scene structure") {
    const ToyConfig cfg = small_toy();
    const ToyScene toy = make_toy_scene(3, cfg);
    const std::size_t room = 5 * cfg.room_grid * cfg.room_grid;
    CHECK(toy.complete.size() == room + 6 * cfg.hidden_grid * cfg.hidden_grid);
    REQUIRE(toy.augmented.size() == room + cfg.object_particles);
    for (std::size_t i = 0; i < toy.augmented.size(); ++i) {
        CHECK(toy.augmented.particles[i].masked() == (i >= room));
    }
    for (std::size_t i = 0; i < room; ++i) {
        const auto& p = toy.augmented.particles[i];
        const auto& q = toy.complete.particles[i];
        CHECK((p.position == q.position && p.log_scale == q.log_scale && p.sh == q.sh));
    }
    // The hidden box lies inside the object.
    for (std::size_t i = room; i < toy.complete.size(); ++i) {
        CHECK((toy.complete.particles[i].position - Eigen::Vector3d(0, 0, 0.1)).norm() < cfg.object_radius);
    }
    CHECK(make_toy_scene(3).complete.size() == 500 + 96);
    REQUIRE(toy.views.size() == static_cast<std::size_t>(cfg.views));
    for (const auto& v : toy.views) {
        CHECK_NOTHROW(validate_camera(v, 1e-9));
        CHECK((v.mask != 0).count() > 20);
        CHECK((v.mask == 0).count() > 20);
    }
    CHECK_THROWS_AS(make_toy_scene(0, ToyConfig{.views = 0}), InvalidInput);
    CHECK_THROWS_AS(make_toy_scene(0, ToyConfig{.hidden_size = 0.5}), InvalidInput);
}

TEST_CASE("toy masks are the object's thresholded semantic render") {
    const ToyConfig cfg = small_toy();
    const ToyScene toy = make_toy_scene(5, cfg);
    int agree = 0, total = 0;
    for (const auto& v : toy.views) {
        // Independent brute-force compositing of the semantic channel.
        const RenderOutput oracle = naive_render(toy.augmented, v);
        for (int y = 0; y < v.height; ++y) {
            for (int x = 0; x < v.width; ++x) {
                const double s = oracle.semantic(y, x);
                if (std::abs(s - cfg.mask_threshold) < 1e-9) continue;
                ++total;
                agree += (s >= cfg.mask_threshold) == (v.mask(y, x) != 0);
            }
        }
    }
    CHECK(agree == total);
}

TEST_CASE("ground truth shows the hidden box only where the object was") {
    const ToyScene toy = make_toy_scene(6);
    const std::size_t room = toy.augmented.size() - ToyConfig{}.object_particles;
    GaussianScene room_only = toy.augmented;
    room_only.particles.resize(room);
    GaussianScene with_box = toy.augmented;
    for (std::size_t i = room; i < toy.complete.size(); ++i) with_box.particles.push_back(toy.complete.particles[i]);
    RenderOptions opt;
    opt.channels = kChannelRgb;
    opt.threads = 1;
    for (std::size_t v = 0; v < toy.views.size(); ++v) {
        const RgbImage gt = render(toy.complete, toy.views[v], opt).rgb;
        CHECK(same_image(gt, toy.ground_truth[v]));
        // The object hides the box from every view.
        const RgbImage seen = render(with_box, toy.views[v], opt).rgb;
        const RgbImage empty = render(room_only, toy.views[v], opt).rgb;
        double leak = 0.0, outside = 0.0, inside = 0.0, object = 0.0;
        const Mask& mask = toy.views[v].mask;
        for (int c = 0; c < 3; ++c) {
            leak = std::max(leak, (seen[c] - toy.views[v].image[c]).abs().maxCoeff());
            for (int y = 0; y < mask.rows(); ++y) {
                for (int x = 0; x < mask.cols(); ++x) {
                    const double d = std::abs(empty[c](y, x) - gt[c](y, x));
                    if (mask(y, x)) {
                        inside += d;
                        object += std::abs(toy.views[v].image[c](y, x) - gt[c](y, x));
                    } else {
                        outside = std::max(outside, d);
                    }
                }
            }
        }
        CHECK(leak < 0.05);
        // Outside the mask the room alone is the ground truth; inside, the box shows.
        CHECK(outside < 1e-2);
        CHECK(inside > 10.0);
        CHECK(object > inside);
    }
}

TEST_CASE("toy labels are a fixed point of mask consolidation") {
    const ToyScene toy = make_toy_scene(9, small_toy());
    const std::vector<Label> labels =
        label_gaussians(accumulate_contributions(toy.augmented, toy.views, kContributionThreshold, 1), 1.0);
    CHECK(labels == toy.augmented.labels());
}

TEST_CASE("toy reference view") {
    const ToyScene toy = make_toy_scene(2, small_toy());
    const ReferenceView ref = make_toy_reference(toy, 1, 0.5, 0.25, 1);
    CHECK(same_image(ref.camera.image, toy.ground_truth[1]));
    CHECK((ref.camera.mask == toy.views[1].mask).all());
    RenderOptions opt;
    opt.channels = kChannelDepth;
    const Plane depth = render(toy.complete, toy.views[1], opt).depth;
    CHECK(((ref.relative_depth - (0.5 * depth + 0.25)).abs() < 1e-15).all());
    CHECK_THROWS_AS(make_toy_reference(toy, 9), InvalidInput);
}

TEST_CASE("eval_masked") {
    std::mt19937_64 rng(21);
    const int h = 20, w = 20;
    RgbImage gt = make_rgb(h, w);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) gt[c](y, x) = uniform(rng, 0.2, 0.8);
    Mask mask = Mask::Zero(h, w);
    mask.block(5, 0, 10, 10).setOnes();  // x 0..9, y 5..14

    SUBCASE("identical images") {
        const EvalReport r = eval_masked({gt}, {gt}, {mask});
        CHECK(r.per_view[0].l1 == 0.0);
        CHECK(r.per_view[0].psnr == kPsnrCap);
        CHECK(r.per_view[0].ssim == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("constant offset") {
        RgbImage pred = gt;
        for (auto& p : pred) p += 0.1;
        const EvalReport r = eval_masked({pred}, {gt}, {mask});
        CHECK(r.per_view[0].l1 == doctest::Approx(0.1).epsilon(1e-12));
        CHECK(r.per_view[0].psnr == doctest::Approx(20.0).epsilon(1e-9));
        CHECK(r.mean.l1 == r.per_view[0].l1);
    }
    SUBCASE("dilated box clamps at the border") {
        // Box arithmetic: width 10 and height 10 grow by round(0.1·10) = 1 per side,
        // so x spans 0..10 (clamped at 0) and y spans 4..15: 11·12 pixels.
        const int x0 = 0, x1 = std::min(w - 1, 9 + 1), y0 = 5 - 1, y1 = 14 + 1;
        const double area = (x1 - x0 + 1) * (y1 - y0 + 1);
        RgbImage pred = gt;
        const std::vector<std::pair<int, int>> inside = {{10, 4}, {0, 15}, {5, 9}};
        const std::vector<std::pair<int, int>> outside = {{11, 4}, {5, 3}, {5, 16}, {19, 19}};
        for (auto [x, y] : inside) pred[0](y, x) += 0.3;
        for (auto [x, y] : outside) pred[1](y, x) += 0.5;
        const EvalReport r = eval_masked({pred}, {gt}, {mask});
        CHECK(r.per_view[0].l1 == doctest::Approx(3 * 0.3 / (3.0 * area)).epsilon(1e-12));
        CHECK(eval_masked({pred}, {gt}, {mask}, 0.0).per_view[0].l1 ==
              doctest::Approx(0.3 / (3.0 * 100.0)).epsilon(1e-12));
    }
    SUBCASE("L1 is symmetric and means average views") {
        RgbImage a = gt, b = gt;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) a[c](y, x) += normal(rng, 0.05);
        for (auto& p : b) p *= 0.9;
        const EvalReport ab = eval_masked({a, b}, {gt, a}, {mask, mask});
        const EvalReport ba = eval_masked({gt, a}, {a, b}, {mask, mask});
        CHECK(ab.per_view[0].l1 == ba.per_view[0].l1);
        CHECK(ab.per_view[1].l1 == ba.per_view[1].l1);
        CHECK(ab.mean.l1 == doctest::Approx(0.5 * (ab.per_view[0].l1 + ab.per_view[1].l1)));
        CHECK(ab.mean.psnr == doctest::Approx(0.5 * (ab.per_view[0].psnr + ab.per_view[1].psnr)));
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(eval_masked({gt}, {gt}, {Mask::Zero(h, w)}), InvalidInput);
        CHECK_THROWS_AS(eval_masked({gt}, {gt, gt}, {mask}), InvalidInput);
        CHECK_THROWS_AS(eval_masked({}, {}, {}), InvalidInput);
        CHECK_THROWS_AS(eval_masked({make_rgb(5, 5)}, {gt}, {mask}), InvalidInput);
    }
}
