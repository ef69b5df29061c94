import numpy as np
import pytest
from hypothesis import given, strategies as st

from facefit.facemodel import (ChecksumError, FaceModel, MalformedHeaderError, ShapeCoeffs, TruncatedPayloadError,
                               decode_model, encode_model, generate_toy_model, grid_triangles, load_model,
                               model_diameter, save_model, synthesize, synthesize_vjp, vertex_normals,
                               vertex_normals_vjp)


def random_coeffs(model, rng, scale=1.0):
    return ShapeCoeffs(scale * rng.standard_normal(model.n_id), scale * rng.standard_normal(model.n_exp),
                       scale * rng.standard_normal(model.n_tex))


def icosphere(subdiv=3):
    t = (1 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
         (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6),
         (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10),
         (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    for _ in range(subdiv):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]
        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return np.array(verts), np.array(f)


def test_zero_coefficients_give_mean(toy):
    v, alb = synthesize(toy, ShapeCoeffs.zeros(toy))
    assert np.array_equal(v, toy.mean_shape.reshape(-1, 3))
    assert np.array_equal(alb, np.clip(toy.mean_albedo, 0, 1).reshape(-1, 3))


def test_unit_identity_coefficient_is_first_column(toy):
    c = ShapeCoeffs.zeros(toy)
    c.x_id[0] = 1.0
    v, _ = synthesize(toy, c)
    np.testing.assert_allclose((v - toy.mean_shape.reshape(-1, 3)).reshape(-1), toy.basis_id[:, 0], atol=1e-12)


def test_synthesize_matches_loop_oracle(small_toy, rng):
    m = small_toy
    c = random_coeffs(m, rng, 0.5)
    v, alb = synthesize(m, c)
    for k in range(3 * m.n_vertices):
        s = m.mean_shape[k]
        for j in range(m.n_id):
            s += m.basis_id[k, j] * c.x_id[j]
        for j in range(m.n_exp):
            s += m.basis_exp[k, j] * c.x_exp[j]
        a = m.mean_albedo[k]
        for j in range(m.n_tex):
            a += m.basis_tex[k, j] * c.x_tex[j]
        assert v.reshape(-1)[k] == pytest.approx(s, rel=1e-12, abs=1e-12)
        assert alb.reshape(-1)[k] == pytest.approx(min(max(a, 0.0), 1.0), abs=1e-12)


def test_length_mismatch_names_basis(toy):
    with pytest.raises(ValueError, match="basis_exp"):
        synthesize(toy, ShapeCoeffs(np.zeros(toy.n_id), np.zeros(toy.n_exp + 1), np.zeros(toy.n_tex)))


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 31))
def test_linearity(a, b, seed):
    m = generate_toy_model(2, 10, 3, 2, 3)
    rng = np.random.default_rng(seed)
    c1, c2 = random_coeffs(m, rng), random_coeffs(m, rng)
    mean = m.mean_shape.reshape(-1, 3)
    mix = ShapeCoeffs(a * c1.x_id + b * c2.x_id, a * c1.x_exp + b * c2.x_exp, a * c1.x_tex + b * c2.x_tex)
    lhs = synthesize(m, mix)[0] - mean
    rhs = a * (synthesize(m, c1)[0] - mean) + b * (synthesize(m, c2)[0] - mean)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-9 * np.abs(rhs).max() + 1e-12)


def test_synthesize_vjp_matches_finite_differences(small_toy, rng):
    m = small_toy
    c = random_coeffs(m, rng, 0.2)
    gv = rng.standard_normal((m.n_vertices, 3))
    ga = rng.standard_normal((m.n_vertices, 3))

    def f(vec):
        cc = ShapeCoeffs(vec[:m.n_id], vec[m.n_id:m.n_id + m.n_exp], vec[m.n_id + m.n_exp:])
        v, a = synthesize(m, cc)
        return np.sum(gv * v) + np.sum(ga * a)

    g = synthesize_vjp(m, c, gv, ga).to_vector()
    x = c.to_vector()
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = 1e-4
        num = (f(x + e) - f(x - e)) / 2e-4
        assert abs(num - g[k]) <= 1e-4 * max(abs(num), abs(g[k]), 1e-8)


def test_albedo_clamp_zeroes_gradient():
    m = generate_toy_model(0, 10, 2, 2, 2)
    c = ShapeCoeffs(np.zeros(2), np.zeros(2), np.array([1e3, 0.0]))
    _, alb = synthesize(m, c)
    sat = (alb.reshape(-1) <= 0) | (alb.reshape(-1) >= 1)
    assert sat.any()
    g = np.zeros((m.n_vertices, 3)).reshape(-1)
    g[sat] = 1.0
    gt = synthesize_vjp(m, c, None, g.reshape(-1, 3)).x_tex
    assert np.all(gt == 0)


def test_flat_square_normals():
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
    n = vertex_normals(v, np.array([[0, 1, 2], [0, 2, 3]]))
    np.testing.assert_allclose(n, np.tile([0, 0, 1.0], (4, 1)))


def test_isolated_vertex_gets_default_normal():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], float)
    n = vertex_normals(v, np.array([[0, 1, 2]]))
    np.testing.assert_array_equal(n[3], [0, 0, 1.0])


def test_icosphere_normals_are_radial():
    v, f = icosphere(3)
    n = vertex_normals(v, f)
    ang = np.arccos(np.clip(np.sum(n * v, axis=1), -1, 1))
    assert ang.max() < 0.05


def test_vertex_normals_vjp(rng):
    v, f = icosphere(1)
    v = v + 0.05 * rng.standard_normal(v.shape)
    g = rng.standard_normal(v.shape)
    an = vertex_normals_vjp(v, f, g)
    for k in rng.choice(v.size, 20, replace=False):
        e = np.zeros(v.size)
        e[k] = 1e-6
        e = e.reshape(v.shape)
        num = (np.sum(g * vertex_normals(v + e, f)) - np.sum(g * vertex_normals(v - e, f))) / 2e-6
        assert num == pytest.approx(an.reshape(-1)[k], rel=1e-5, abs=1e-7)


def test_grid_triangles_counts():
    t = grid_triangles(4, 5)
    assert t.shape == (2 * 3 * 4, 3)
    assert t.max() == 19


def test_toy_model_deterministic():
    a, b = generate_toy_model(7, 16), generate_toy_model(7, 16)
    assert encode_model(a) == encode_model(b)


@given(st.integers(0, 10 ** 6), st.integers(9, 20))
def test_toy_model_invariants(seed, vu):
    m = generate_toy_model(seed, vu, 3, 2, 3)
    m.validate()
    assert m.landmark_indices.size == 68
    # front-facing: winding normals point +z everywhere
    n = vertex_normals(m.mean_shape.reshape(-1, 3), m.triangles)
    assert np.all(n[:, 2] > 0)
    d = model_diameter(m)
    for B in (m.basis_id, m.basis_exp):
        peak = np.linalg.norm(B.reshape(m.n_vertices, 3, -1), axis=1).max()
        assert peak <= 0.05 * d * (1 + 1e-6)


def test_toy_model_size(toy):
    assert 150 < model_diameter(toy) < 260


def test_toy_model_rejects_bad_args():
    with pytest.raises(ValueError):
        generate_toy_model(0, 4)
    with pytest.raises(ValueError):
        generate_toy_model(0, 16, K_id=0)


def test_model_invariants_enforced(toy):
    fields = {k: getattr(toy, k) for k in ("mean_shape", "basis_id", "basis_exp", "mean_albedo", "basis_tex",
                                          "triangles", "uv_coords", "landmark_indices")}
    bad = dict(fields, triangles=np.vstack([toy.triangles, [[0, 0, 1]]]))
    with pytest.raises(ValueError, match="degenerate"):
        FaceModel(**bad)
    bad = dict(fields, landmark_indices=np.r_[toy.landmark_indices[:-1], toy.landmark_indices[0]])
    with pytest.raises(ValueError, match="distinct"):
        FaceModel(**bad)
    bad = dict(fields, uv_coords=toy.uv_coords + 1)
    with pytest.raises(ValueError):
        FaceModel(**bad)


def test_model_is_read_only(toy):
    with pytest.raises(ValueError):
        toy.mean_shape[0] = 1.0


def test_codec_roundtrip(toy, tmp_path):
    save_model(tmp_path / "m.fmm", toy)
    back = load_model(tmp_path / "m.fmm")
    for k in ("mean_shape", "basis_id", "basis_exp", "mean_albedo", "basis_tex", "triangles", "uv_coords",
              "landmark_indices"):
        assert np.array_equal(getattr(back, k), getattr(toy, k)), k


def test_codec_errors(toy):
    blob = encode_model(toy)
    with pytest.raises(MalformedHeaderError):
        decode_model(b"FACEMDL2" + blob[8:])
    with pytest.raises(TruncatedPayloadError):
        decode_model(blob[:-1])
    flipped = bytearray(blob)
    flipped[100] ^= 0xFF
    with pytest.raises(ChecksumError):
        decode_model(bytes(flipped))
