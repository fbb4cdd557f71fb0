"""Acceptance suite: every criterion at its stated tolerance.

Run with `pytest tests/test_acceptance.py -v -s` to see one line per
criterion. The end-to-end criteria run the real engine on the synthetic
fixtures; nothing here is mocked.
"""

import io
import json
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from latentdrag.baseline import (
    BaselineParams,
    TrackedPoint,
    baseline_run,
    motion_loss,
    motion_step,
    path_deviation,
)
from latentdrag.bench import (
    BASELINE_SUITE_PARAMS,
    centroid_error,
    gen_fixture,
    run_bench,
    run_fixture,
    shape_iou,
    standard_suite,
    threshold_segment,
)
from latentdrag.cli import main as cli_main
from latentdrag.diffusion import (
    IdentityCodec,
    LatentCode,
    ZeroDenoiser,
    invert,
    make_schedule,
    sample,
)
from latentdrag.features import IdentityExtractor, PyramidExtractor
from latentdrag.geometry import BinaryMask, Point, Schedule, eta, rotate_region, round_half_away, translate_region
from latentdrag.instruction import DragType, serialize_spec
from latentdrag.lro import build_states, iteration_count, lro_loss, make_components, pbsi_run
from latentdrag.service import create_app

from tests.test_geometry import boundary_ring, forward_rotate_oracle, _translate
from tests.test_lro import blob_spec, identity_spec
from tests.test_service import png_bytes, upload, wait_terminal


def report(criterion, detail):
    print(f"{criterion} PASS: {detail}")


# ---------------------------------------------------------------------------
# P1


def test_p1_ddim_self_inverse():
    sched = make_schedule()
    rng = np.random.default_rng(0)
    z0 = LatentCode(rng.standard_normal((64, 64, 3)), timestep=0)
    started = time.perf_counter()
    trajectory = invert(z0, 38, ZeroDenoiser(), sched)
    back = sample(trajectory[-1], 38, 0, ZeroDenoiser(), sched)
    elapsed = time.perf_counter() - started
    err = float(np.abs(back.data - z0.data).max())
    assert err <= 1e-6, f"round-trip error {err}"
    assert elapsed < 1.0, f"took {elapsed:.2f}s"
    report("P1", f"round-trip max error {err:.2e} in {elapsed * 1000:.0f}ms")


# ---------------------------------------------------------------------------
# P2


def test_p2_adjoint_exactness():
    rng = np.random.default_rng(1)
    worst = 0.0
    for extractor in (IdentityExtractor((64, 64), (32, 32)),
                      PyramidExtractor((64, 64), (32, 32))):
        for _ in range(10):
            z = LatentCode(rng.standard_normal((64, 64, 3)), timestep=0)
            u = rng.standard_normal((32, 32, extractor.channels_out))
            lhs = float(np.sum(extractor.apply(z) * u))
            rhs = float(np.sum(z.data * extractor.adjoint(u)))
            mismatch = abs(lhs - rhs) / (np.linalg.norm(z.data) * np.linalg.norm(u))
            worst = max(worst, mismatch)
    assert worst <= 1e-10, f"normalized mismatch {worst}"
    report("P2", f"worst normalized inner-product mismatch {worst:.2e}")


# ---------------------------------------------------------------------------
# P3


def test_p3_gradient_correctness():
    rng = np.random.default_rng(2)
    h = 1e-5

    # region-matching loss on a 16x16x3 latent (8x8 feature grid)
    extractor = PyramidExtractor((16, 16), (8, 8))
    bits = np.zeros((16, 16), dtype=bool)
    bits[4:10, 2:8] = True
    theta = BinaryMask(bits)
    rho, pi = translate_region(theta, (4.0, 1.0))
    from latentdrag.geometry import to_feature_grid
    from latentdrag.lro import IntermediateState, warp_reference

    state = IntermediateState(to_feature_grid(rho, (16, 16)),
                              to_feature_grid(pi, (16, 16)), 0, 38, 0)
    m_bits = np.zeros((8, 8), dtype=bool)
    m_bits[0:2, 6:8] = True
    m_feat = BinaryMask(m_bits)
    z = LatentCode(rng.standard_normal((16, 16, 3)), timestep=38)
    ref = rng.standard_normal((8, 8, extractor.channels_out)) * 2.0

    def lro_scalar(data):
        cur = extractor.apply(LatentCode(data, 38))
        loss, _ = lro_loss(cur, ref, [state], m_feat, 1.0)
        return loss

    cur = extractor.apply(z)
    warped = warp_reference(ref, state)
    residuals = np.concatenate([(cur - warped)[state.rho.bits].ravel(),
                                (cur - ref)[m_feat.bits].ravel()])
    assert np.abs(residuals).min() > 1e-3, "degenerate test point, residual too small"
    _, cot = lro_loss(cur, ref, [state], m_feat, 1.0)
    grad = extractor.adjoint(cot)

    worst = 0.0
    for _ in range(20):
        idx = tuple(rng.integers(0, s) for s in (16, 16, 3))
        plus = z.data.copy(); plus[idx] += h
        minus = z.data.copy(); minus[idx] -= h
        fd = (lro_scalar(plus) - lro_scalar(minus)) / (2 * h)
        if abs(fd) < 1e-12 and abs(grad[idx]) < 1e-12:
            continue
        rel = abs(grad[idx] - fd) / max(abs(fd), abs(grad[idx]))
        worst = max(worst, rel)
        assert rel <= 1e-4, f"lro gradient at {idx}: analytic {grad[idx]}, fd {fd}"

    # point motion-supervision loss, gradient through the moved side only
    ex_b = PyramidExtractor((16, 16), (8, 8))
    zb = LatentCode(rng.standard_normal((16, 16, 3)), timestep=38)
    ref_feats = ex_b.apply(zb) + rng.uniform(0.5, 1.0, (8, 8, ex_b.channels_out))
    params = BaselineParams(motion_radius=1, iterations=1, step_size=1.0)
    pt = TrackedPoint((4, 4), ref_feats[4, 4, :] + 5.0)
    frozen = ex_b.apply(zb)

    def baseline_scalar(data):
        return motion_loss(LatentCode(data, 38), [pt], [(7, 4)], ex_b, params,
                           m_feat, 1.0, ref_feats, stop_grad_features=frozen)

    stepped = motion_step(zb, [pt], [(7, 4)], ex_b, params, m_feat, 1.0, ref_feats)
    grad_b = (zb.data - stepped.data) / params.step_size
    worst_b = 0.0
    for _ in range(20):
        idx = tuple(rng.integers(0, s) for s in (16, 16, 3))
        plus = zb.data.copy(); plus[idx] += h
        minus = zb.data.copy(); minus[idx] -= h
        fd = (baseline_scalar(plus) - baseline_scalar(minus)) / (2 * h)
        if abs(fd) < 1e-12 and abs(grad_b[idx]) < 1e-12:
            continue
        rel = abs(grad_b[idx] - fd) / max(abs(fd), abs(grad_b[idx]))
        worst_b = max(worst_b, rel)
        assert rel <= 1e-4, f"motion gradient at {idx}: analytic {grad_b[idx]}, fd {fd}"

    report("P3", f"worst relative error: region loss {worst:.2e}, motion loss {worst_b:.2e}")


# ---------------------------------------------------------------------------
# P4


def test_p4_schedule():
    s = Schedule(T=38, T_prime=33, K=10)
    assert eta(38, 0, s) == 0.0
    values = [eta(t, k, s) for t, k in s.iteration_order()]
    assert all(b > a for a, b in zip(values, values[1:])), "not strictly increasing"
    assert values[-1] == pytest.approx(59 / 60, abs=1e-15)
    assert values[-1] == pytest.approx(1 - 1 / (s.K * (s.T - s.T_prime + 1)), abs=1e-15)
    report("P4", f"eta(38,0)=0, strictly increasing, final {values[-1]:.6f} = 59/60")


# ---------------------------------------------------------------------------
# P5


def test_p5_geometry_vs_brute_force():
    shapes = {}
    m = np.zeros((32, 32), dtype=bool); m[10:20, 8:20] = True
    shapes["rect"] = m
    m = np.zeros((32, 32), dtype=bool); m[14:18, 4:28] = True
    shapes["bar"] = m
    m = np.zeros((32, 32), dtype=bool); m[8:24, 8:12] = True; m[20:24, 8:24] = True
    shapes["lshape"] = m
    yy, xx = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
    shapes["disc"] = (xx - 16) ** 2 + (yy - 16) ** 2 <= 25

    worst_agreement = 1.0
    for name, bits in shapes.items():
        mask = BinaryMask(bits)
        for step in range(1, 24):
            angle = step * np.pi / 12
            rho, _ = rotate_region(mask, Point(15.5, 15.5), angle)
            oracle = forward_rotate_oracle(bits, (15.5, 15.5), angle)
            agreement = float((rho.bits == oracle).mean())
            worst_agreement = min(worst_agreement, agreement)
            assert agreement >= 0.95, f"{name} at {step}pi/12: {agreement:.3f}"
            ring = boundary_ring(oracle) | boundary_ring(rho.bits)
            assert not ((rho.bits ^ oracle) & ~ring).any(), \
                f"{name} at {step}pi/12: non-boundary disagreement"

    rng = np.random.default_rng(3)
    for _ in range(25):
        bits = rng.random((32, 32)) < 0.25
        bits[16, 16] = True
        off = (int(rng.integers(-8, 9)), int(rng.integers(-8, 9)))
        rho, _ = translate_region(BinaryMask(bits), off)
        assert np.array_equal(rho.bits, _translate(bits, off)), \
            f"integer translation {off} not exact"

    report("P5", f"worst rotation agreement {worst_agreement:.3f}, "
                 f"integer translations exact")


# ---------------------------------------------------------------------------
# P6 / P7


def test_p6_end_to_end_translation():
    fixture = gen_fixture("blob", DragType.TRANSLATION, 10, seed=0)
    spec = fixture.spec
    den, ext, cod, sched = make_components(spec, "zero", "pyramid", "identity")
    started = time.perf_counter()
    result = pbsi_run(spec, den, ext, cod, sched, include_previews=False)
    elapsed = time.perf_counter() - started
    err = centroid_error(result.image, fixture.oracle_image)
    iou = shape_iou(result.image, fixture.oracle_image)
    assert err <= 1.5, f"centroid error {err:.2f} px"
    assert iou >= 0.8, f"IoU {iou:.3f}"
    assert elapsed <= 60.0, f"runtime {elapsed:.1f}s"
    report("P6", f"centroid error {err:.2f} px, IoU {iou:.3f}, {elapsed:.1f}s")


def test_p7_end_to_end_rotation():
    fixture = gen_fixture("lshape", DragType.ROTATION, float(np.pi / 2), seed=0)
    spec = fixture.spec
    den, ext, cod, sched = make_components(spec, "zero", "pyramid", "identity")
    result = pbsi_run(spec, den, ext, cod, sched, include_previews=False)
    iou = shape_iou(result.image, fixture.oracle_image)
    assert iou >= 0.7, f"IoU {iou:.3f}"
    report("P7", f"90-degree lshape IoU {iou:.3f}")


# ---------------------------------------------------------------------------
# P8


def test_p8_noop_identity():
    spec = identity_spec()
    den, ext, cod, sched = make_components(spec, "zero", "pyramid", "identity")
    result = pbsi_run(spec, den, ext, cod, sched, include_previews=False)
    np.testing.assert_array_equal(result.image, spec.image)
    assert all(loss == 0.0 for _, _, loss in result.loss_trace), "loss not identically 0"
    assert len(result.loss_trace) == iteration_count(spec.params)
    report("P8", f"output bit-equal to input, all {len(result.loss_trace)} losses exactly 0.0")


# ---------------------------------------------------------------------------
# P9 / P10 (share the standard suite)


@pytest.fixture(scope="module")
def suite_runs():
    suite = standard_suite(seed=0)
    pbsi_report = run_bench(suite, "pbsi")
    frozen_report = run_bench(suite, "frozen")
    return suite, pbsi_report, frozen_report


def test_p9_metric_ordering(suite_runs):
    _, pbsi_report, frozen_report = suite_runs
    successes = [r for r in pbsi_report.rows if r.ok]
    assert len(successes) >= 8, \
        f"only {len(successes)}/12 fixtures succeeded; ordering check would be hollow"
    min_gap = min(r.if_th - r.if_hh for r in successes)
    for r in successes:
        assert r.if_th >= r.if_hh + 0.05, \
            f"{r.name}: if_th {r.if_th:.3f} < if_hh {r.if_hh:.3f} + 0.05"
    min_frozen_gap = min(r.if_hh - r.if_th for r in frozen_report.rows)
    for r in frozen_report.rows:
        assert r.if_hh >= r.if_th + 0.05, \
            f"frozen {r.name}: if_hh {r.if_hh:.3f} < if_th {r.if_th:.3f} + 0.05"
    report("P9", f"{len(successes)}/12 successful, min drag gap +{min_gap:.3f}, "
                 f"min frozen gap +{min_frozen_gap:.3f}")


def test_p10_pbsi_vs_baseline(suite_runs):
    suite, pbsi_report, _ = suite_runs
    longs = [f for f in suite if "translation_20px" in f.name]
    assert len(longs) == 3
    pbsi_errs = {r.name: r.centroid_err for r in pbsi_report.rows}

    base_errs = []
    deviations = []
    for fixture in longs:
        den, ext, cod, sched = make_components(fixture.spec)
        trajectory = []
        result = baseline_run(fixture.spec, den, ext, cod, sched,
                              params=BASELINE_SUITE_PARAMS, trajectory_out=trajectory)
        base_errs.append(centroid_error(result.image, fixture.oracle_image))
        inst = fixture.spec.instructions[0]
        pts = [(2 * x, 2 * y) for step in trajectory for (x, y) in [step[0]]]
        deviations.append(path_deviation(pts, (inst.handle.x, inst.handle.y),
                                         (inst.target.x, inst.target.y)))

    pbsi_agg = float(np.mean([pbsi_errs[f.name] for f in longs]))
    base_agg = float(np.mean(base_errs))
    assert pbsi_agg <= base_agg, \
        f"pbsi aggregate {pbsi_agg:.2f} worse than baseline {base_agg:.2f}"
    assert max(deviations) > 3.0, \
        f"no drag halt: max deviation {max(deviations):.2f} px"
    report("P10", f"centroid aggregate pbsi {pbsi_agg:.2f} vs baseline {base_agg:.2f}; "
                  f"max tracked-point deviation {max(deviations):.2f} px")


# ---------------------------------------------------------------------------
# P11


def test_p11_cli_determinism(tmp_path):
    fixture = gen_fixture("blob", DragType.TRANSLATION, 10, seed=0)
    img_path = tmp_path / "image.png"
    Image.fromarray(fixture.spec.image, mode="RGB").save(img_path)
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(serialize_spec(fixture.spec), encoding="utf-8")

    outputs = []
    for name in ("first", "second"):
        out = tmp_path / f"{name}.png"
        code = cli_main(["run", "--image", str(img_path), "--spec", str(spec_path),
                         "--out", str(out), "--seed", "0"])
        assert code == 0
        outputs.append((out.read_bytes(),
                        (tmp_path / f"{name}_trace.csv").read_bytes()))
    assert outputs[0][0] == outputs[1][0], "PNGs differ between identical runs"
    assert outputs[0][1] == outputs[1][1], "loss traces differ between identical runs"
    report("P11", f"identical invocations: PNG ({len(outputs[0][0])} bytes) and "
                  f"trace bit-identical")


# ---------------------------------------------------------------------------
# P12


def test_p12_service_lifecycle():
    app = create_app(workers=1, queue_size=1)
    with TestClient(app) as client:
        # full run: gap-free indices, result available
        spec = identity_spec()
        sid = upload(client, spec).json()["id"]
        assert client.post(f"/sessions/{sid}/run").status_code == 202
        assert wait_terminal(client, sid) == "done"
        events = client.get(f"/sessions/{sid}/events", params={"after": -1}).json()["events"]
        assert [e["index"] for e in events] == list(range(len(events)))
        assert len(events) == iteration_count(spec.params)
        assert client.get(f"/sessions/{sid}/result").status_code == 200

        # cancel mid-run halts within one iteration of the acknowledgement
        slow = blob_spec(big_k=60, t_prime=28)
        sid2 = upload(client, slow).json()["id"]
        client.post(f"/sessions/{sid2}/run")
        deadline = time.time() + 30
        page = {"events": []}
        while time.time() < deadline and not page["events"]:
            page = client.get(f"/sessions/{sid2}/events",
                              params={"after": -1, "wait_ms": 100}).json()
        assert page["events"], "run never emitted events"
        assert client.post(f"/sessions/{sid2}/cancel").status_code == 200
        at_ack = len(client.get(f"/sessions/{sid2}/events",
                                params={"after": -1}).json()["events"])
        assert wait_terminal(client, sid2) == "cancelled"
        final = client.get(f"/sessions/{sid2}/events", params={"after": -1}).json()
        total = iteration_count(slow.params)
        assert len(final["events"]) < total
        assert len(final["events"]) <= at_ack + 1, \
            f"{len(final['events']) - at_ack} events after cancel acknowledgement"
        indices = [e["index"] for e in final["events"]]
        assert indices == list(range(len(indices)))
    report("P12", f"lifecycle clean; cancel stopped after "
                  f"{len(final['events'])}/{total} iterations, indices gap-free")
