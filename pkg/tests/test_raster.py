import numpy as np
import pytest
from hypothesis import given, strategies as st

from facefit.lighting import ShLighting
from facefit.losses import photometric_loss
from facefit.raster import (interpolate, interpolate_vjp, pixel_centers, rasterize, render_backward, render_face,
                            signed_areas)

BIG = np.array([[-100.0, -100.0], [100.0, -100.0], [0.0, 100.0]])


def brute_force(points2d, depth, tris, W, H, eps=1e-9):
    """Per-pixel oracle: (expected tri id or None when a sample is within eps of an edge)."""
    X, Y = pixel_centers(W, H)
    out = np.full((H, W), -1)
    ambiguous = np.zeros((H, W), bool)
    for i in range(H):
        for j in range(W):
            p = np.array([X[i, j], Y[i, j]])
            best, best_z = -1, np.inf
            for t, (a, b, c) in enumerate(tris):
                A, B, C = points2d[a], points2d[b], points2d[c]
                area = (B[0] - A[0]) * (C[1] - A[1]) - (B[1] - A[1]) * (C[0] - A[0])
                if area == 0:
                    continue
                w0 = ((C[0] - B[0]) * (p[1] - B[1]) - (C[1] - B[1]) * (p[0] - B[0])) / area
                w1 = ((A[0] - C[0]) * (p[1] - C[1]) - (A[1] - C[1]) * (p[0] - C[0])) / area
                w2 = 1 - w0 - w1
                ws = np.array([w0, w1, w2])
                if np.any(np.abs(ws) < eps):
                    ambiguous[i, j] = True
                if np.all(ws > 0):
                    z = ws @ depth[[a, b, c]]
                    if z < best_z:
                        best, best_z = t, z
            out[i, j] = best
    return out, ambiguous


def test_full_cover_constant_attribute():
    frag, attr = rasterize(BIG, np.zeros(3), np.ones(3), [[0, 1, 2]], 8, 6)
    assert frag.mask.all()
    np.testing.assert_allclose(attr[..., 0], 1.0)


def test_centroid_barycentrics():
    # centroid at (0.5, 0.5): the centre of pixel (row 3, col 4) in an 8x8 image
    pts = np.array([[-2.5, -1.5], [3.5, -1.5], [0.5, 4.5]])
    frag, _ = rasterize(pts, np.zeros(3), None, [[0, 1, 2]], 8, 8)
    np.testing.assert_allclose(frag.bary[3, 4], [1 / 3, 1 / 3, 1 / 3], atol=1e-6)


def test_two_triangle_overlap_depth():
    pts = np.array([[-10.0, -10.0], [10.0, -10.0], [0.0, 10.0], [-10.0, 10.0], [10.0, 10.0], [0.0, -10.0]])
    depth = np.array([2.0, 2.0, 2.0, 1.0, 1.0, 1.0])
    tris = np.array([[0, 1, 2], [3, 5, 4]])
    assert np.all(signed_areas(pts, tris) != 0)
    frag, _ = rasterize(pts, depth, None, tris, 20, 20)
    expect, amb = brute_force(pts, depth, tris, 20, 20)
    overlap = (expect >= 0) & ~amb
    both = np.zeros_like(overlap)
    X, Y = pixel_centers(20, 20)
    # inside both triangles: any pixel where the far triangle alone would also be hit
    far_only, _ = brute_force(pts[:3], depth[:3], tris[:1], 20, 20)
    both = (far_only == 0) & (expect == 1)
    assert both.any()
    assert np.all(frag.tri_id[both] == 1)
    assert np.array_equal(frag.tri_id[overlap], expect[overlap])


def test_equal_depth_lower_index_wins():
    tris = np.array([[0, 1, 2], [0, 1, 2]])
    frag, _ = rasterize(BIG, np.ones(3), None, tris, 5, 5)
    assert np.all(frag.tri_id == 0)


@given(st.integers(0, 2 ** 31), st.integers(1, 12))
def test_coverage_and_depth_against_oracle(seed, n_tris):
    rng = np.random.default_rng(seed)
    W, H = 12, 10
    pts = rng.uniform(-8, 8, (3 * n_tris, 2))
    depth = rng.uniform(-5, 5, 3 * n_tris)
    tris = np.arange(3 * n_tris).reshape(-1, 3)
    frag, _ = rasterize(pts, depth, None, tris, W, H)
    expect, amb = brute_force(pts, depth, tris, W, H)
    ok = ~amb
    assert np.array_equal(frag.tri_id[ok], expect[ok])
    # partition: background xor exactly one triangle id, barycentrics valid where covered
    assert np.array_equal(frag.mask, frag.tri_id >= 0)
    b = frag.bary[frag.mask]
    assert np.all(b >= -1e-6)
    np.testing.assert_allclose(b.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(np.isinf(frag.depth[~frag.mask]))


def test_shared_edges_have_no_holes():
    # unit-square grid whose edges pass exactly through pixel centres
    n = 6
    xs = np.arange(n + 1) - n / 2 + 0.5
    gx, gy = np.meshgrid(xs, xs)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    tris = []
    for i in range(n):
        for j in range(n):
            a = i * (n + 1) + j
            tris += [[a, a + 1, a + n + 2], [a, a + n + 2, a + n + 1]]
    tris = np.array(tris)
    frag, _ = rasterize(pts, np.zeros(len(pts)), None, tris, 10, 10)
    X, Y = pixel_centers(10, 10)
    lo, hi = xs[0], xs[-1]
    strictly_inside = (X > lo) & (X < hi) & (Y > lo) & (Y < hi)
    assert frag.mask[strictly_inside].all()
    # each of these samples sits on an edge or a vertex, so exactly one owner was chosen
    assert np.all(frag.tri_id[~frag.mask] == -1)


def test_backface_culling():
    cw = BIG[[0, 2, 1]]
    frag, _ = rasterize(cw, np.zeros(3), None, [[0, 1, 2]], 4, 4, cull_backfaces=True)
    assert not frag.mask.any()
    frag, _ = rasterize(cw, np.zeros(3), None, [[0, 1, 2]], 4, 4)
    assert frag.mask.all()


def test_zero_dimensions_rejected():
    with pytest.raises(ValueError):
        rasterize(BIG, np.zeros(3), None, [[0, 1, 2]], 0, 4)


def test_interpolate_vjp(rng):
    pts = rng.uniform(-6, 6, (9, 2))
    depth = rng.uniform(0, 1, 9)
    tris = np.arange(9).reshape(3, 3)
    attr = rng.standard_normal((9, 2))
    frag, out = rasterize(pts, depth, attr, tris, 12, 12)
    g = rng.standard_normal(out.shape)
    ga, gp = interpolate_vjp(frag, tris, attr, pts, g)
    e = np.zeros_like(attr)
    e[4, 1] = 1e-6
    num = (np.sum(g * interpolate(frag, tris, attr + e)) - np.sum(g * interpolate(frag, tris, attr - e))) / 2e-6
    assert num == pytest.approx(ga[4, 1], rel=1e-6)
    checked = 0
    for k in range(9):
        for d in range(2):
            e = np.zeros_like(pts)
            e[k, d] = 1e-6
            fp, op = rasterize(pts + e, depth, attr, tris, 12, 12)
            fm, om = rasterize(pts - e, depth, attr, tris, 12, 12)
            if not (np.array_equal(fp.tri_id, frag.tri_id) and np.array_equal(fm.tri_id, frag.tri_id)):
                continue
            num = (np.sum(g * op) - np.sum(g * om)) / 2e-6
            assert num == pytest.approx(gp[k, d], rel=1e-4, abs=1e-7)
            checked += 1
    assert checked >= 12


def test_render_zero_light(toy, scene):
    r = render_face(toy, scene.coeffs, scene.pose, ShLighting(np.zeros((9, 3))), 64, 64)
    assert r.mask.any()
    assert np.all(r.color == 0)


def test_render_sanity_and_determinism(toy, scene):
    a = render_face(toy, scene.coeffs, scene.pose, scene.lighting, 140, 128)
    b = render_face(toy, scene.coeffs, scene.pose, scene.lighting, 140, 128)
    assert a.color.shape == (128, 140, 3)
    assert a.mask.any() and not a.mask.all()
    assert not a.mask[0].any() and not a.mask[-1].any()
    assert np.array_equal(a.color, b.color) and np.array_equal(a.tri_id, b.tri_id)
    assert np.all(a.color[~a.mask] == 0)


def test_render_backward_zero_cases(toy, scene):
    r = render_face(toy, scene.coeffs, scene.pose, scene.lighting, 64, 64)
    g = render_backward(r.state, np.zeros((64, 64, 3)))
    assert np.all(g.to_vector() == 0)
    g_bg = np.where(r.mask[:, :, None], 0.0, 1.0) * np.ones((64, 64, 3))
    assert np.all(render_backward(r.state, g_bg).to_vector() == 0)


def test_lighting_gradient_of_photometric_loss(toy, scene, target):
    image = target[0] * 0.9 + 0.02
    W = image.shape[1]

    def loss(sh):
        r = render_face(toy, scene.coeffs, scene.pose, ShLighting(sh), W, W)
        return photometric_loss(image, r.color, r.mask), r

    (val, g_img), r = loss(scene.lighting.coeffs)
    g = render_backward(r.state, g_img).sh
    for k in range(27):
        e = np.zeros(27)
        e[k] = 1e-4
        c = scene.lighting.coeffs.reshape(-1)
        num = (loss((c + e).reshape(9, 3))[0][0] - loss((c - e).reshape(9, 3))[0][0]) / 2e-4
        assert num == pytest.approx(g.reshape(-1)[k], rel=1e-4, abs=1e-9)


def test_texture_and_identity_gradients(toy, scene, target, rng):
    image = target[0] * 0.8
    W = image.shape[1]
    c0 = scene.coeffs

    def loss(c):
        r = render_face(toy, c, scene.pose, scene.lighting, W, W)
        return photometric_loss(image, r.color, r.mask), r

    (_, g_img), r = loss(c0)
    g = render_backward(r.state, g_img)
    for k in range(3):
        e = np.zeros(toy.n_tex)
        e[k] = 1e-4
        plus, minus = c0.copy(), c0.copy()
        plus.x_tex = c0.x_tex + e
        minus.x_tex = c0.x_tex - e
        num = (loss(plus)[0][0] - loss(minus)[0][0]) / 2e-4
        assert num == pytest.approx(g.x_tex[k], rel=1e-4, abs=1e-9)
