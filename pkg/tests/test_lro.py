"""Engine tests: loss, warp, optimizer steps, and full runs."""

import threading

import numpy as np
import pytest

from latentdrag.diffusion import IdentityCodec, LatentCode, ZeroDenoiser, make_schedule
from latentdrag.features import IdentityExtractor, PyramidExtractor
from latentdrag.geometry import (
    BinaryMask,
    CoordinateMap,
    Point,
    Schedule,
    rotate_region,
    to_feature_grid,
)
from latentdrag.instruction import (
    DragInstruction,
    DragType,
    EditSpec,
    HyperParams,
    Optimizer,
)
from latentdrag.lro import (
    AdamState,
    IntermediateState,
    RunAbortedError,
    adam_step,
    build_states,
    iteration_count,
    lro_loss,
    pbsi_run,
    warp_reference,
)


def single_pixel_state(h=8, w=8, tx=3, ty=3, sx=2, sy=3):
    bits = np.zeros((h, w), dtype=bool)
    bits[ty, tx] = True
    rho = BinaryMask(bits)
    pi = CoordinateMap(np.array([[tx, ty]]), np.array([[sx, sy]]))
    return IntermediateState(rho, pi, instruction_index=0, t=38, k=0)


def blob_spec(drag_px=10, step_size=0.1, big_k=20, t_prime=33, optimizer=Optimizer.ADAM,
              lambda_m=1.0):
    """64x64 gray image, bright 8x8 square at (16..24, 28..36), dragged right.

    The handle region includes trailing background so the move vacates
    cleanly; the uneditable mask covers everything far from the swept
    corridor.
    """
    import scipy.ndimage as ndi

    img = np.full((64, 64, 3), 51, dtype=np.uint8)
    img[28:36, 16:24] = 230
    handle = np.zeros((64, 64), dtype=bool)
    handle[28:36, 4:24] = True
    sweep = np.zeros((64, 64), dtype=bool)
    for dx in range(0, drag_px + 1):
        sweep |= np.roll(handle, dx, axis=1)
    uneditable = ~ndi.binary_dilation(sweep, np.ones((11, 11), dtype=bool))
    inst = DragInstruction(
        DragType.TRANSLATION, BinaryMask(handle), Point(20, 32), Point(20 + drag_px, 32)
    )
    params = HyperParams(step_size=step_size, big_k=big_k, t_prime=t_prime,
                         optimizer=optimizer, lambda_m=lambda_m)
    return EditSpec(img, BinaryMask(uneditable), (inst,), params)


def identity_spec():
    img = np.full((32, 32, 3), 51, dtype=np.uint8)
    img[12:20, 12:20] = 230
    bits = np.zeros((32, 32), dtype=bool)
    bits[12:20, 12:20] = True
    inst = DragInstruction(DragType.TRANSLATION, BinaryMask(bits), Point(15, 15), Point(15, 15))
    return EditSpec(img, BinaryMask.full(32, 32, False), (inst,),
                    HyperParams(big_k=3, t_prime=35))


class TestWarpReference:
    def test_identity_map(self):
        rng = np.random.default_rng(0)
        ref = rng.standard_normal((8, 8, 2))
        bits = np.zeros((8, 8), dtype=bool)
        bits[2:5, 2:5] = True
        state = IntermediateState(BinaryMask(bits), CoordinateMap.identity(BinaryMask(bits)),
                                  0, 38, 0)
        out = warp_reference(ref, state)
        np.testing.assert_array_equal(out[bits], ref[bits])
        assert np.all(out[~bits] == 0)

    def test_one_pixel_shift(self):
        rng = np.random.default_rng(1)
        ref = rng.standard_normal((8, 8, 3))
        state = single_pixel_state()
        out = warp_reference(ref, state)
        np.testing.assert_array_equal(out[3, 3], ref[3, 2])

    def test_rotated_bar_matches_gather_loop(self):
        rng = np.random.default_rng(2)
        ref = rng.standard_normal((16, 16, 3))
        bits = np.zeros((16, 16), dtype=bool)
        bits[8, 4:9] = True
        rho, pi = rotate_region(BinaryMask(bits), Point(4, 8), np.pi / 2)
        state = IntermediateState(rho, pi, 0, 38, 0)
        out = warp_reference(ref, state)
        for (tx, ty), (sx, sy) in pi.as_dict().items():
            np.testing.assert_array_equal(out[ty, tx], ref[sy, sx])


class TestLroLoss:
    def test_exact_match_is_zero(self):
        rng = np.random.default_rng(3)
        ref = rng.standard_normal((8, 8, 3))
        state = single_pixel_state()
        cur = warp_reference(ref, state)
        cur[~state.rho.bits] = ref[~state.rho.bits]
        loss, cot = lro_loss(cur, ref, [state], BinaryMask.full(8, 8, False), 1.0)
        assert loss == 0.0
        np.testing.assert_array_equal(cot, np.zeros_like(cot))

    def test_single_pixel_unit_residual(self):
        ref = np.zeros((8, 8, 1))
        state = single_pixel_state()
        cur = np.zeros((8, 8, 1))
        cur[3, 3, 0] = 1.0  # residual 1 against warped ref 0
        loss, cot = lro_loss(cur, ref, [state], BinaryMask.full(8, 8, False), 0.0)
        assert loss == 1.0
        assert cot[3, 3, 0] == 1.0
        assert np.count_nonzero(cot) == 1

    def test_overlapping_states_sum(self):
        ref = np.zeros((8, 8, 1))
        state_a = single_pixel_state()
        state_b = single_pixel_state(sx=4, sy=3)
        cur = np.zeros((8, 8, 1))
        cur[3, 3, 0] = 0.25
        loss, cot = lro_loss(cur, ref, [state_a, state_b], BinaryMask.full(8, 8, False), 0.0)
        assert loss == pytest.approx(0.5)  # 2 * |r|
        assert cot[3, 3, 0] == 2.0

    def test_uneditable_term(self):
        ref = np.zeros((8, 8, 2))
        cur = np.zeros((8, 8, 2))
        cur[6, 6] = [0.5, -0.5]
        m_bits = np.zeros((8, 8), dtype=bool)
        m_bits[6, 6] = True
        loss, cot = lro_loss(cur, ref, [], BinaryMask(m_bits), 2.0)
        assert loss == pytest.approx(2.0 * 1.0)
        assert cot[6, 6, 0] == 2.0 and cot[6, 6, 1] == -2.0

    def test_perturbation_inside_m_strictly_increases(self):
        rng = np.random.default_rng(4)
        ref = rng.standard_normal((8, 8, 3))
        m_bits = np.zeros((8, 8), dtype=bool)
        m_bits[5:7, 5:7] = True
        base, _ = lro_loss(ref.copy(), ref, [], BinaryMask(m_bits), 1.0)
        bumped = ref.copy()
        bumped[5, 5, 1] += 0.3
        worse, _ = lro_loss(bumped, ref, [], BinaryMask(m_bits), 1.0)
        assert base == 0.0 and worse > base

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            lro_loss(np.zeros((4, 4, 1)), np.zeros((5, 5, 1)), [],
                     BinaryMask.full(4, 4, False), 0.0)


class TestAdam:
    def test_zero_gradient_no_move(self):
        z = np.ones((2, 2, 1))
        state = AdamState.zeros(z.shape)
        out = adam_step(state, z, np.zeros_like(z), 0.1)
        np.testing.assert_array_equal(out, z)

    def test_first_step_hand_computed(self):
        z = np.zeros((1, 1, 1))
        g = np.full((1, 1, 1), 0.5)
        state = AdamState.zeros(z.shape)
        out = adam_step(state, z, g, step_size=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        # bias correction makes m_hat = g, v_hat = g^2 on step one
        expected = -0.1 * 0.5 / (np.sqrt(0.25) + 1e-8)
        assert out[0, 0, 0] == pytest.approx(expected, rel=1e-12)

    def test_plain_gradient_form(self):
        z = np.full((1, 1, 1), 3.0)
        out = z - 0.1 * np.full((1, 1, 1), 1.0)
        assert out[0, 0, 0] == pytest.approx(2.9)


class TestBuildStates:
    def test_feature_grid_consistency(self):
        spec = blob_spec()
        window = Schedule(T=spec.params.t_big, T_prime=spec.params.t_prime, K=spec.params.big_k)
        states = build_states(spec, 36, 5, window)
        assert len(states) == 1
        st = states[0]
        theta_f = to_feature_grid(spec.instructions[0].handle_region, spec.image_hw)
        rho_set = {tuple(p) for p in st.rho.pixels()}
        assert set(st.pi.as_dict().keys()) == rho_set
        for src in st.pi.as_dict().values():
            assert theta_f.bits[src[1], src[0]]


class TestPbsiRun:
    def test_identity_drag_is_exact_noop(self):
        spec = identity_spec()
        codec = IdentityCodec()
        sched = make_schedule()
        extractor = PyramidExtractor(spec.image_hw, ((spec.image_hw[0] + 1) // 2,) * 2)
        result = pbsi_run(spec, ZeroDenoiser(), extractor, codec, sched)
        np.testing.assert_array_equal(result.image, spec.image)
        assert all(loss == 0.0 for _, _, loss in result.loss_trace)
        assert len(result.loss_trace) == iteration_count(spec.params)

    def test_event_stream_complete_and_ordered(self):
        spec = identity_spec()
        codec = IdentityCodec()
        extractor = IdentityExtractor(spec.image_hw, (16, 16))
        events = []
        result = pbsi_run(spec, ZeroDenoiser(), extractor, codec,
                          event_sink=events.append, session_id="s1")
        assert len(events) == iteration_count(spec.params)
        assert [e.t for e in events] == sorted([e.t for e in events], reverse=True)
        etas = [e.eta for e in events]
        assert etas[0] == 0.0
        assert all(b > a for a, b in zip(etas, etas[1:]))
        assert not result.cancelled
        assert all(e.session_id == "s1" for e in events)
        assert all(e.rho_preview is not None for e in events)

    def test_determinism(self):
        spec = blob_spec(big_k=4, t_prime=36)
        codec = IdentityCodec()
        extractor = PyramidExtractor((64, 64), (32, 32))
        a = pbsi_run(spec, ZeroDenoiser(), extractor, codec)
        b = pbsi_run(spec, ZeroDenoiser(), extractor, codec)
        assert a.loss_trace == b.loss_trace
        np.testing.assert_array_equal(a.image, b.image)

    def test_cancellation_stops_early_but_decodes(self):
        spec = blob_spec(big_k=10, t_prime=33)
        codec = IdentityCodec()
        extractor = PyramidExtractor((64, 64), (32, 32))
        flag = threading.Event()
        seen = []

        def sink(event):
            seen.append(event)
            if len(seen) == 7:
                flag.set()

        result = pbsi_run(spec, ZeroDenoiser(), extractor, codec,
                          event_sink=sink, cancel=flag)
        assert result.cancelled
        assert len(result.loss_trace) == 7
        assert result.image.shape == spec.image.shape

    def test_nonfinite_loss_aborts(self):
        # sign gradients are magnitude-independent, so only an absurd plain
        # step can push the latent far enough to overflow the loss sum
        spec = blob_spec(step_size=1e307, big_k=10, t_prime=36,
                         optimizer=Optimizer.PLAIN_GRADIENT)
        codec = IdentityCodec()
        extractor = PyramidExtractor((64, 64), (32, 32))
        with np.errstate(over="ignore"), pytest.raises(RunAbortedError):
            pbsi_run(spec, ZeroDenoiser(), extractor, codec)

    def test_blob_translation_reaches_target(self):
        spec = blob_spec()
        codec = IdentityCodec()
        extractor = PyramidExtractor((64, 64), (32, 32))
        result = pbsi_run(spec, ZeroDenoiser(), extractor, codec, include_previews=False)
        lum = result.image.astype(float).mean(axis=2)
        seg = lum > 0.5 * (230 + 51)
        assert seg.sum() > 0
        ys, xs = np.nonzero(seg)
        # original square centered (19.5, 31.5); target centroid +10 in x
        err = np.hypot(xs.mean() - 29.5, ys.mean() - 31.5)
        assert err <= 1.5, f"centroid off by {err:.2f} px"

    def test_plain_gradient_loss_nonincreasing_on_stable_segments(self):
        # the recorded trace is only comparable between iterations that
        # optimize the same objective: same timestep (fixed reference) and
        # same (rho, pi) state. The anchor term is disabled because editing
        # necessarily perturbs anchored features through blur overlap,
        # growing that term from zero; the drag objective itself descends.
        spec = blob_spec(step_size=1e-2, big_k=8, t_prime=35,
                         optimizer=Optimizer.PLAIN_GRADIENT, lambda_m=0.0)
        codec = IdentityCodec()
        extractor = PyramidExtractor((64, 64), (32, 32))
        result = pbsi_run(spec, ZeroDenoiser(), extractor, codec, include_previews=False)
        window = Schedule(T=spec.params.t_big, T_prime=spec.params.t_prime,
                          K=spec.params.big_k)
        segments_checked = 0
        prev = None
        for t, k, loss in result.loss_trace:
            state = build_states(spec, t, k, window)[0]
            key = (t, state.rho, state.pi)
            if prev is not None and prev[0] == key:
                assert loss <= prev[1] + 1e-9, \
                    f"loss rose {prev[1]} -> {loss} at t={t}, k={k}"
                segments_checked += 1
            prev = (key, loss)
        assert segments_checked >= 10  # drag quantization leaves long stable runs

    def test_snapshots(self):
        spec = blob_spec(big_k=2, t_prime=36)
        codec = IdentityCodec()
        extractor = IdentityExtractor((64, 64), (32, 32))
        result = pbsi_run(spec, ZeroDenoiser(), extractor, codec, snapshot_every=1,
                          include_previews=False)
        assert set(result.snapshots.keys()) == set(range(36, 39))
