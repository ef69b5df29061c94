"""Acceptance criteria on synthetic fixtures, one test per criterion.

Each test prints a PASS/FAIL line (also repeated in the terminal summary) and
then asserts the criterion at its stated tolerance.
"""

import os
import subprocess
import sys
import time
from dataclasses import replace

import numba
import numpy as np
import pytest

from conftest import ACCEPTANCE
from facefit.camera import rotation_matrix
from facefit.experiments import (CoarseRecoveryConfig, DetailRecoveryConfig, MultiViewConfig, coarse_recovery,
                                 detail_recovery, multiview_blend, zero_detail_control)
from facefit.facemodel import ShapeCoeffs, generate_toy_model
from facefit.losses import (CoarseWeights, FineWeights, SceneParams, coarse_loss, fine_loss, prepare_detail_state)
from facefit.metrics import SimilarityTransform, depth_error, icp_align, point_to_plane, point_to_point_rmse
from facefit.optim import fine_config, gradient_check
from facefit.raster import rasterize, render_face, signed_areas
from facefit.synthetic import SyntheticConfig, random_scene, render_scene, sphere_position_map
from facefit.uvspace import UvMap, _texel_length, uv_to_mesh


pytestmark = pytest.mark.slow


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE[n] = line
    print(line)


@pytest.fixture(scope="module")
def fixture0():
    model = generate_toy_model(0, 32)
    scene = random_scene(model, 0, SyntheticConfig(128, 128))
    image, lms, _ = render_scene(model, scene, 128, 128)
    return model, scene, image, lms


def test_criterion_1_gradients(fixture0):
    model, scene, image, lms = fixture0
    threads = numba.get_num_threads()
    numba.set_num_threads(1)
    t0 = time.perf_counter()
    try:
        start = SceneParams(
            ShapeCoeffs(0.5 * scene.coeffs.x_id, 0.5 * scene.coeffs.x_exp, 0.5 * scene.coeffs.x_tex),
            replace(scene.pose, rx=scene.pose.rx + 0.03, ry=scene.pose.ry - 0.02, tx=scene.pose.tx + 1.3),
            scene.lighting)
        last = {}

        def coarse_fg(vec):
            terms, grad, out = coarse_loss(model, SceneParams.from_vector(model, vec), image, lms)
            last["tri"] = out.tri_id
            return terms.total, grad.to_vector()

        def sig(fg):
            def f(x):
                fg(x)
                return last["tri"]
            return f

        rep_c = gradient_check(coarse_fg, start.to_vector(), eps=1e-4, signature=sig(coarse_fg))

        res = 64
        state = prepare_detail_state(model, scene, res, 128, 128)
        mask = state.coarse_pos.mask
        rng = np.random.default_rng(0)
        d0 = np.where(mask, rng.uniform(-0.5, 0.5, (res, res)), 0.0)

        def fine_fg(x):
            terms, g, out = fine_loss(UvMap(x.reshape(res, res), mask, "scalar"), state, image)
            last["tri"] = out.tri_id
            return terms.total, g.reshape(-1)

        coords = rng.choice(np.flatnonzero(mask), 300, replace=False)
        rep_f = gradient_check(fine_fg, d0.reshape(-1), eps=1e-4, signature=sig(fine_fg), coords=coords)
    finally:
        numba.set_num_threads(threads)
    seconds = time.perf_counter() - t0
    ok = rep_c.passed and rep_f.passed and seconds < 120
    report(1, ok, f"coarse: {rep_c.summary()}; fine: {rep_f.summary()}; {seconds:.0f}s single-threaded")
    assert ok


def test_criterion_2_coarse_recovery():
    r = coarse_recovery(CoarseRecoveryConfig())
    ok = (r["landmark_rmse_px"] < 1.0 and r["photometric"] < 0.01 and r["rotation_error"] < 0.02
          and r["steps"] <= 2000 and r["seconds"] < 300)
    report(2, ok, f"landmark RMSE {r['landmark_rmse_px']:.3f} px, photometric {r['photometric']:.4f}, "
                  f"rotation error {r['rotation_error']:.4f} rad, {r['steps']} steps, {r['seconds']:.0f}s")
    assert ok


@pytest.mark.xfail(strict=True, reason="default fine weights pull the displacement to zero; see README")
def test_criterion_3_detail_recovery():
    cfg = DetailRecoveryConfig()
    r = detail_recovery(cfg)
    z = zero_detail_control(cfg)
    ok = r["rmse_over_A"] < 0.2 and z["rms_over_A"] < 0.02
    report(3, ok, f"bump RMSE {r['rmse_over_A']:.3f} A (limit 0.2 A; zero field scores "
                  f"{r['truth_rms_over_A']:.3f} A), zero-detail control RMS {z['rms_over_A']:.3g} A, "
                  f"res {cfg.res}, {r['steps']} steps")
    assert ok


def test_criterion_4_renderer_invariants():
    # coverage partition on a random soup: every pixel is background or owned by one triangle
    rng = np.random.default_rng(0)
    pts = rng.uniform(-10, 10, (30, 2))
    depth = rng.uniform(-5, 5, 30)
    tris = np.arange(30).reshape(-1, 3)
    frag, _ = rasterize(pts, depth, None, tris, 24, 20)
    partition = (np.array_equal(frag.mask, frag.tri_id >= 0) and np.all(np.isinf(frag.depth[~frag.mask]))
                 and np.allclose(frag.bary[frag.mask].sum(axis=1), 1.0))
    # the nearer of two overlapping triangles wins
    pts2 = np.array([[-10.0, -10.0], [10.0, -10.0], [0.0, 10.0], [-10.0, 10.0], [10.0, 10.0], [0.0, -10.0]])
    d2 = np.array([2.0, 2.0, 2.0, 1.0, 1.0, 1.0])
    tris2 = np.array([[0, 1, 2], [3, 5, 4]])
    assert np.all(signed_areas(pts2, tris2) != 0)
    frag2, _ = rasterize(pts2, d2, None, tris2, 20, 20)
    far, _ = rasterize(pts2, d2, None, tris2[:1], 20, 20)
    near, _ = rasterize(pts2, d2, None, tris2[1:], 20, 20)
    both = far.mask & near.mask
    depth_ok = both.any() and np.all(frag2.tri_id[both] == 1) and np.all(frag2.tri_id[far.mask & ~near.mask] == 0)
    # centroid sample
    c = np.array([[-2.5, -1.5], [3.5, -1.5], [0.5, 4.5]])
    frag3, _ = rasterize(c, np.zeros(3), None, [[0, 1, 2]], 8, 8)
    bary_err = float(np.max(np.abs(frag3.bary[3, 4] - 1 / 3)))
    ok = partition and depth_ok and bary_err <= 1e-6
    report(4, ok, f"partition {partition}, overlap depth {depth_ok}, centroid barycentric error {bary_err:.1e}")
    assert ok


def test_criterion_5_uv_consistency(fixture0):
    model, scene, _, _ = fixture0
    state = prepare_detail_state(model, scene, 256, 128, 128)
    zero = UvMap(np.zeros((256, 256)), state.coarse_pos.mask, "scalar")
    direct = render_face(model, scene.coeffs, scene.pose, scene.lighting, 128, 128)
    from facefit.uvspace import apply_displacement, render_from_uv
    uv = render_from_uv(apply_displacement(state.coarse_pos, zero), state.albedo, state.lighting, 128, 128)
    both = direct.mask & uv.mask
    mad = float(np.mean(np.abs(direct.color[both] - uv.color[both])))
    lost = 1.0 - both.sum() / direct.mask.sum()

    res, radius = 64, 50.0
    pm = sphere_position_map(res, radius)
    mesh = uv_to_mesh(pm)
    texel = _texel_length(pm)
    t = mesh.triangles
    w = rng_dirichlet(len(t))
    on_mesh = np.einsum("nk,nkd->nd", w, mesh.vertices[t])
    mesh_to_sphere = float(np.max(np.abs(np.linalg.norm(on_mesh, axis=1) - radius)))
    g = np.random.default_rng(1)
    u, v = g.uniform(1 / res, 1 - 1 / res, (2, 4000))
    th, ph = np.pi * v, 2 * np.pi * u
    on_sphere = radius * np.stack([np.sin(th) * np.cos(ph), np.cos(th), np.sin(th) * np.sin(ph)], 1)
    sphere_to_mesh = float(point_to_plane(on_sphere, mesh.vertices, t)[1].max())
    ok = mad < 2e-2 and max(mesh_to_sphere, sphere_to_mesh) < texel
    report(5, ok, f"UV-path vs direct render {mad:.4f} mean abs on the common mask ({100 * lost:.1f}% of direct "
                  f"pixels outside it); sphere round trip {max(mesh_to_sphere, sphere_to_mesh):.3f} vs texel "
                  f"{texel:.3f}")
    assert ok


def rng_dirichlet(n):
    return np.random.default_rng(0).dirichlet(np.ones(3), n)


def test_criterion_6_metric_oracles():
    model = generate_toy_model(0, 32)
    v = model.mean_shape.reshape(-1, 3)
    truth = SimilarityTransform(2.0, rotation_matrix(0.0, np.radians(15.0), 0.0), np.array([5.0, 0.0, 0.0]))
    T = icp_align(v, truth.apply(v))
    icp_err = max(abs(T.scale - 2.0), np.max(np.abs(T.rotation - truth.rotation)),
                  np.max(np.abs(T.translation - truth.translation)))
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 50, 3))
    loop = np.sqrt(sum(sum((a[i, k] - b[i, k]) ** 2 for k in range(3)) for i in range(50)) / 50)
    p2p_err = abs(point_to_point_rmse(a, b) - loop)
    pred, gt = rng.uniform(0, 100, (2, 16, 16))
    m = rng.uniform(size=(16, 16)) > 0.3
    p, q = pred[m], gt[m]
    resc = [(x - p.min()) / (p.max() - p.min()) * (q.max() - q.min()) + q.min() for x in p]
    depth_loop = sum(abs(x - y) for x, y in zip(resc, q)) / len(q)
    depth_err = abs(depth_error(pred, gt, m) - depth_loop)
    base = depth_error(pred, gt, m)
    affine = max(abs(depth_error(s * pred + o, gt, m) - base) for s, o in [(2.0, 5.0), (0.1, -3.0), (7.5, 1e3)])
    identity = depth_error(gt, gt, m)
    ok = icp_err < 1e-3 and p2p_err < 1e-9 and depth_err < 1e-9 and affine <= 1e-12 * base and identity == 0.0
    report(6, ok, f"ICP max component error {icp_err:.1e}, p2p oracle {p2p_err:.1e}, depth oracle "
                  f"{depth_err:.1e}, affine change {affine:.1e} (round-off), pred=gt gives {identity}")
    assert ok


def test_criterion_7_constants():
    c, f, cfg = CoarseWeights(), FineWeights(), fine_config()
    checks = {
        "coarse weights": (c.w1, c.w2, c.w3, c.w4) == (1.3, 1.0, 1.5, 20.0),
        "regularizer weights": (c.omega_s, c.omega_e, c.omega_t) == (1.3, 1.0, 1.3),
        "fine weights": (f.omega_p, f.omega_s_fine, f.omega_d) == (1.0, 10.0, 10.0),
        "smoothness": (f.w_sn, f.w_sz) == (20.0, 10.0),
        "displacement": (f.w_dn, f.w_dz) == (0.5, 0.01),
        "fine schedule": (cfg.learning_rate, cfg.decay_rate, cfg.decay_every) == (0.002, 0.98, 5000),
    }
    ok = all(checks.values())
    report(7, ok, ", ".join(f"{k} {'ok' if v else 'WRONG'}" for k, v in checks.items()))
    assert ok


def _pipeline(root, threads):
    env = dict(os.environ, FACEFIT_THREADS="")

    def cli(*args):
        p = subprocess.run([sys.executable, "-m", "facefit.cli", *map(str, args), "--threads", str(threads)],
                           capture_output=True, text=True, env=env)
        assert p.returncode == 0, p.stderr
        return p.stdout

    syn, coarse, detail = root / "syn", root / "coarse", root / "detail"
    cli("synth", "--seed", 5, "--out", syn, "--detail", "--res", 64)
    cli("fit-coarse", "--image", syn / "image.png", "--landmarks", syn / "landmarks.txt", "--model",
        syn / "model.fmm", "--out", coarse, "--steps", 150)
    cli("fit-detail", "--image", syn / "image.png", "--params", coarse / "params.json", "--model",
        syn / "model.fmm", "--out", detail, "--res", 64, "--steps", 40)
    out = cli("eval", "--pred", coarse / "mesh.obj", "--gt", syn / "mesh.obj", "--p2p")
    files = {f"{d.name}/{f.name}": f.read_bytes() for d in (syn, coarse, detail) for f in sorted(d.iterdir())}
    files["eval.json"] = out.encode()
    return files


def test_criterion_8_determinism(tmp_path):
    runs = {name: _pipeline(tmp_path / name, threads)
            for name, threads in (("t1a", 1), ("t1b", 1), ("t4", 4))}
    ref = runs["t1a"]
    diff = sorted({k for r in runs.values() for k in set(r) ^ set(ref)}
                  | {k for r in runs.values() for k in ref if k in r and r[k] != ref[k]})
    ok = not diff
    report(8, ok, f"{len(ref)} artifacts compared over 3 runs (threads 1, 1, 4); differing: {diff or 'none'}")
    assert ok


def test_criterion_9_multiview_blend():
    r = multiview_blend(MultiViewConfig())
    ok = r["coverage"] >= 0.95 and r["rms_deviation"] < r["texel_length"]
    report(9, ok, f"coverage {100 * r['coverage']:.1f}% of the union mask, RMS deviation "
                  f"{r['rms_deviation']:.3f} vs texel length {r['texel_length']:.3f}")
    assert ok
