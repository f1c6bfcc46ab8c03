import numpy as np
import pytest

from latentcut import autodiff as ad
from latentcut.audio import DEFAULT_FEATURE_RATE, windows_for_frames
from latentcut.denoiser import (
    ModelConfig,
    assemble_tokens,
    embed_tokens,
    init_params,
    project_audio,
    readout,
    run_blocks,
)
from latentcut.inference import (
    TIME_EPS,
    BlockCache,
    BlockPartition,
    InferenceError,
    InferenceSchedule,
    block_offset,
    cache_gate,
    euler_solve,
    fb_rope_assign,
    run_edit_inference,
    sample_face_refs,
    shift_active_flags,
    step_times,
    tapsf_partition,
    tapsf_step,
)
from latentcut.timeline import (
    EditOp,
    apply_edit_ops,
    frames_for_num_latents,
    identity_plan,
    latent_to_range,
    with_render_mode,
)
from latentcut.training import build_clip
from latentcut.world import boxes_for_frames, build_mask, encode, gen_audio, gen_scene, render_clip

TINY = ModelConfig(
    blocks=2, dim=32, heads=2, ffn_dim=64, audio_dim=16,
    adapter_rank=4, window=9, feature_banks=2, feature_channels=16,
)

FPS = 24.0


def woken_params(seed=5, scale=0.05):
    rng = np.random.default_rng(seed)
    params = init_params(TINY, rng)
    for p in params.values():
        if not np.any(p.data):
            p.assign(p.data + scale * rng.standard_normal(p.shape))
    return params


@pytest.fixture(scope="module")
def model():
    return woken_params()


@pytest.fixture(scope="module")
def world():
    spec = gen_scene(77)
    track = gen_audio(313, duration_s=3.5)
    video = render_clip(spec, track, FPS, frame_count=41)
    return {"spec": spec, "track": track, "latents": encode(video), "n": 6}


@pytest.fixture(scope="module")
def wide_world():
    spec = gen_scene(131)
    track = gen_audio(712, duration_s=7.6)
    video = render_clip(spec, track, FPS, frame_count=153)
    return {"spec": spec, "track": track, "latents": encode(video), "n": 20}


# -- schedule --------------------------------------------------------------


def test_schedule_defaults_and_serialization():
    s = InferenceSchedule()
    assert (s.num_steps, s.block_width, s.shift) == (40, 17, 5)
    assert s.medial_fraction == 0.75 and s.cache_threshold == 0.05
    d = s.to_dict()
    assert d["render_mode"] == "lip" and d["block_width"] == 17


@pytest.mark.parametrize(
    "kwargs",
    [
        {"num_steps": 0},
        {"shift": 0},
        {"shift": 17},
        {"block_width": 1},
        {"medial_fraction": 1.5},
        {"cache_threshold": -0.1},
        {"render_mode": "mouth"},
    ],
)
def test_schedule_rejects_bad_values(kwargs):
    with pytest.raises(InferenceError):
        InferenceSchedule(**kwargs)


def test_step_times_grid():
    t = step_times(40)
    assert t[0] == 1.0 and t[-1] == 0.0 and len(t) == 41
    assert np.allclose(np.diff(t), -1.0 / 40.0)


def test_shift_phase_is_centered():
    flags = shift_active_flags(InferenceSchedule())
    assert np.where(flags)[0].tolist() == [0, 1, 2, 3, 4, 35, 36, 37, 38, 39]
    assert shift_active_flags(InferenceSchedule(medial_fraction=1.0)).sum() == 0
    assert shift_active_flags(InferenceSchedule(medial_fraction=0.0)).all()


def test_offset_frozen_through_middle_and_advancing_at_ends():
    s = InferenceSchedule()
    offsets = [block_offset(s, i) for i in range(40)]
    assert len(set(offsets[5:36])) == 1  # no seam motion while frozen
    assert offsets[0] == 0
    for i in range(4):
        assert offsets[i + 1] == (offsets[i] + 5) % 17
    assert offsets[36] == (offsets[35] + 5) % 17


# -- partition -------------------------------------------------------------


def test_partition_single_block_when_short():
    s = InferenceSchedule()
    for n in (1, 5, 17):
        p = tapsf_partition(n, 3, s)
        assert p.blocks == ((0, n),)
        assert p.coverage.tolist() == [1] * n


def test_partition_aligned_tiling_has_no_overlap():
    p = tapsf_partition(34, 0, InferenceSchedule())
    assert p.blocks == ((0, 17), (17, 34))
    assert p.coverage.max() == 1


def test_partition_offset_adds_end_anchored_blocks():
    # step 1 -> offset 5: tiled block plus anchored head and tail covers
    p = tapsf_partition(34, 1, InferenceSchedule())
    assert p.blocks == ((0, 17), (5, 22), (17, 34))
    assert (p.coverage == 2).sum() == 17

    # no full tiled block fits at this offset; two anchored blocks remain
    p = tapsf_partition(20, 1, InferenceSchedule())
    assert p.blocks == ((0, 17), (3, 20))


def test_partition_properties_across_sizes_and_steps():
    for schedule in (InferenceSchedule(), InferenceSchedule(block_width=12, shift=7)):
        w = schedule.block_width
        for n in (1, 2, 11, w, w + 1, w + 3, 2 * w - 1, 2 * w, 2 * w + 5, 61):
            for step in range(10):
                p = tapsf_partition(n, step, schedule)
                assert 1 <= p.coverage.min() and p.coverage.max() <= 2
                starts = [b[0] for b in p.blocks]
                assert starts == sorted(starts)
                for s, e in p.blocks:
                    assert 0 <= s < e <= n
                    assert e - s <= min(n, w)
                # a narrower block appears only as the tail cover of a
                # short offset timeline; everything else is full width
                widths = [e - s for s, e in p.blocks]
                assert all(width == min(n, w) for width in widths[:-1])
                if widths[-1] != min(n, w):
                    assert w < n < 2 * w and block_offset(schedule, step) > 0


def test_partition_rejects_empty_timeline():
    with pytest.raises(InferenceError):
        tapsf_partition(0, 0, InferenceSchedule())


# -- euler solver ----------------------------------------------------------


def test_euler_zero_velocity_is_bitwise_identity():
    x1 = np.random.default_rng(0).standard_normal((4, 5))
    x0 = euler_solve(x1, lambda x, t: np.zeros_like(x), num_steps=17)
    assert np.array_equal(x0, x1)


def test_euler_constant_velocity_telescopes():
    # dyadic instance: every partial sum is exactly representable
    x0 = euler_solve(np.zeros(3), lambda x, t: np.full(3, 1.5), num_steps=32)
    assert np.array_equal(x0, np.full(3, -1.5))

    rng = np.random.default_rng(1)
    x1, c = rng.standard_normal(6), rng.standard_normal(6)
    x0 = euler_solve(x1, lambda x, t: c, num_steps=40)
    assert np.max(np.abs(x0 - (x1 - c))) < 1e-12


def test_euler_converges_on_linear_ode():
    # dx/dt = a x from t=1 down to 0 has solution x(0) = x(1) exp(-a)
    a, start = 1.3, 2.0
    exact = start * np.exp(-a)

    def err(steps):
        out = euler_solve(np.array([start]), lambda x, t: a * x, num_steps=steps)
        return abs(out[0] - exact)

    assert err(40) < 0.02
    assert err(400) < err(40) / 5.0


def test_euler_noise_levels_gate_late_joiners():
    x1 = np.array([[10.0], [20.0]])
    calls = []

    def vfn(x, t):
        calls.append(t)
        return np.ones_like(x)

    x0 = euler_solve(x1, vfn, num_steps=4, noise_levels=np.array([0.5, 0.0]))
    # level 0.5 moves only at t = 0.5 and t = 0.25, two quarter steps
    assert x0[0, 0] == pytest.approx(9.5, abs=1e-15)
    assert x0[1, 0] == 20.0  # level zero: never written
    assert calls == [1.0, 0.75, 0.5, 0.25]


def test_euler_rejects_mismatched_shapes():
    with pytest.raises(InferenceError):
        euler_solve(np.zeros((2, 1)), lambda x, t: np.zeros(3), num_steps=2)
    with pytest.raises(InferenceError):
        euler_solve(np.zeros((2, 1)), lambda x, t: np.zeros((2, 1)), num_steps=2,
                    noise_levels=np.zeros(3))


# -- block step ------------------------------------------------------------


def _manual_partition(blocks, n):
    coverage = np.zeros(n, dtype=int)
    for s, e in blocks:
        coverage[s:e] += 1
    return BlockPartition(blocks=tuple(blocks), coverage=coverage)


def test_tapsf_step_averages_overlap_exactly():
    rng = np.random.default_rng(3)
    state = rng.standard_normal((10, 2, 2, 3))
    part = _manual_partition([(0, 6), (4, 10)], 10)
    active = np.ones((10, 2, 2), dtype=bool)

    def bv(s, e, xs):
        return np.full_like(xs, float(s + 1))

    out = tapsf_step(state, 1.0, 0.75, part, bv, active)
    v = np.zeros_like(state)
    v[0:4] = 1.0
    v[6:10] = 5.0
    v[4:6] = (1.0 + 5.0) / 2.0
    assert np.max(np.abs(out - (state - 0.25 * v))) <= 1e-12


def test_tapsf_step_single_coverage_matches_plain_update():
    rng = np.random.default_rng(4)
    state = rng.standard_normal((6, 2, 2, 3))
    vel = rng.standard_normal((6, 2, 2, 3))
    part = _manual_partition([(0, 6)], 6)
    active = rng.random((6, 2, 2)) < 0.5
    out = tapsf_step(state, 0.5, 0.25, part, lambda s, e, xs: vel[s:e], active)
    expected = np.where(active[..., None], state - 0.25 * vel, state)
    assert np.array_equal(out, expected)


def test_tapsf_step_rejects_uncovered_frames():
    part = BlockPartition(blocks=((0, 3),), coverage=np.array([1, 1, 1, 0, 0]))
    with pytest.raises(InferenceError):
        tapsf_step(
            np.zeros((5, 2, 2, 3)), 1.0, 0.5, part,
            lambda s, e, xs: np.zeros_like(xs), np.ones((5, 2, 2), dtype=bool),
        )


# -- reference positioning -------------------------------------------------


def test_reference_position_pinned_examples():
    assert fb_rope_assign(19, 20, 36) == 19  # near: true index survives
    assert fb_rope_assign(50, 20, 36) == 39  # far forward: pinned past the end
    assert fb_rope_assign(15, 20, 36) == 17  # far backward: pinned before the start


def test_reference_position_properties():
    rng = np.random.default_rng(9)
    for _ in range(300):
        s = int(rng.integers(0, 50))
        e = s + int(rng.integers(0, 30))
        t = int(rng.integers(-40, 120))
        r = fb_rope_assign(t, s, e)
        if s <= t <= e:
            assert r == t
            continue
        d = s - t if t < s else t - e
        if d <= 3:
            assert r == t
        else:
            assert (s - r if t < s else r - e) == 3


def _ref_pool(indices):
    rng = np.random.default_rng(0)
    return [
        (i, rng.standard_normal((8, 8, 16)), np.ones((8, 8)))
        for i in indices
    ]


def test_face_refs_take_all_when_window_holds_exactly_six():
    rng = np.random.default_rng(1)
    refs = sample_face_refs(_ref_pool(range(6)), (0, 4), FPS, rng)
    assert len(refs) == 6


def test_face_refs_subsample_beyond_six():
    rng = np.random.default_rng(1)
    pool = _ref_pool(range(12))
    refs = sample_face_refs(pool, (0, 12), FPS, rng)
    assert len(refs) == 6
    again = sample_face_refs(pool, (0, 12), FPS, np.random.default_rng(1))
    for a, b in zip(refs, again):
        assert np.array_equal(a[0], b[0])


def test_face_refs_respect_time_window():
    # fps 3.2 -> eligibility radius ceil(5 * 3.2 / 8) = 2 latents
    pool = _ref_pool([2, 3, 8, 9])
    refs = sample_face_refs(pool, (5, 7), 3.2, np.random.default_rng(0))
    kept = {id(r[0]) for r in refs}
    assert len(refs) == 2
    assert id(pool[1][1]) in kept and id(pool[2][1]) in kept


def test_face_refs_empty_pool_yields_none():
    assert sample_face_refs([], (0, 10), FPS, np.random.default_rng(0)) == []


# -- cache gate ------------------------------------------------------------


def test_cache_gate_first_call_always_computes():
    cache = BlockCache()
    assert not cache_gate(cache, np.ones(4), 0.5, shift_active=False)


def test_cache_gate_reuses_on_identical_signature():
    cache = BlockCache()
    sig = np.ones(4)
    cache_gate(cache, sig, 0.1, False)
    cache.resid = np.zeros(3)
    cache.acc = 0.0
    assert cache_gate(cache, sig.copy(), 0.1, False)


def test_cache_gate_zero_threshold_never_reuses():
    cache = BlockCache()
    sig = np.ones(4)
    cache_gate(cache, sig, 0.0, False)
    cache.resid = np.zeros(3)
    cache.acc = 0.0
    assert not cache_gate(cache, sig.copy(), 0.0, False)


def test_cache_gate_blocked_while_seams_move():
    cache = BlockCache()
    sig = np.ones(4)
    cache_gate(cache, sig, 0.5, False)
    cache.resid = np.zeros(3)
    cache.acc = 0.0
    assert not cache_gate(cache, sig.copy(), 0.5, shift_active=True)


def test_cache_gate_accumulates_drift_until_budget_breaks():
    cache = BlockCache()
    cache_gate(cache, np.full(4, 1.0), 0.05, False)
    cache.resid = np.zeros(3)
    cache.acc = 0.0
    # each step changes the signature by 3% in relative L1
    assert cache_gate(cache, np.full(4, 1.03), 0.05, False)
    assert not cache_gate(cache, np.full(4, 1.03 * 1.03), 0.05, False)
    cache.acc = 0.0  # caller recomputed
    assert cache_gate(cache, np.full(4, 1.03 ** 3), 0.05, False)


def test_cache_gate_invalidates_on_shape_change_or_dead_signature():
    cache = BlockCache()
    cache_gate(cache, np.ones(4), 0.5, False)
    cache.resid = np.zeros(3)
    cache.acc = 0.0
    assert not cache_gate(cache, np.ones(5), 0.5, False)

    dead = BlockCache()
    cache_gate(dead, np.zeros(4), 0.5, False)
    dead.resid = np.zeros(3)
    dead.acc = 0.0
    assert not cache_gate(dead, np.zeros(4), 0.5, False)


# -- end-to-end rendering --------------------------------------------------


def _schedule(**kwargs):
    base = dict(num_steps=5, cache_threshold=0.0, render_mode="lip")
    base.update(kwargs)
    return InferenceSchedule(**base)


def test_render_mode_none_passes_source_through_bitwise(world, model):
    plan = identity_plan(world["n"], FPS)
    out = run_edit_inference(
        plan, model, TINY, world["track"], _schedule(render_mode="none"),
        source_latents=world["latents"], spec=world["spec"], seed=1,
    )
    assert np.array_equal(out["latents"], world["latents"])
    assert out["report"]["cache"]["hits"] == 0
    assert out["report"]["cache"]["misses"] == 0


def test_lip_render_touches_only_lip_cells_of_kept_frames(world, model):
    plan = identity_plan(world["n"], FPS)
    out = run_edit_inference(
        plan, model, TINY, world["track"], _schedule(),
        source_latents=world["latents"], spec=world["spec"], seed=2,
    )
    lip = build_mask("lip", boxes_for_frames(world["spec"], 41, FPS), world["n"])
    outside = lip == 0  # indexes cells, keeping the channel axis whole
    assert np.array_equal(out["latents"][outside], world["latents"][outside])
    changed = out["latents"][~outside] != world["latents"][~outside]
    assert changed.mean() > 0.9
    assert out["report"]["metrics"]["sync_corr"] is not None


def test_render_is_deterministic_per_seed(world, model):
    plan = identity_plan(world["n"], FPS)
    args = (plan, model, TINY, world["track"], _schedule())
    kw = dict(source_latents=world["latents"], spec=world["spec"])
    a = run_edit_inference(*args, **kw, seed=7)
    b = run_edit_inference(*args, **kw, seed=7)
    c = run_edit_inference(*args, **kw, seed=8)
    assert np.array_equal(a["latents"], b["latents"])
    assert not np.array_equal(a["latents"], c["latents"])


def test_render_without_audio_runs_and_reports(world, model):
    plan = identity_plan(world["n"], FPS)
    out = run_edit_inference(
        plan, model, TINY, None, _schedule(),
        source_latents=world["latents"], spec=world["spec"], seed=3,
    )
    assert out["report"]["audio_conditioned"] is False
    assert out["report"]["adapters_engaged"] is False
    assert "metrics" not in out["report"]
    assert out["video"].shape == (41, 32, 32)


def test_tapsf_reduces_to_plain_euler_for_single_block(world, model):
    n, spec, track, x_src = world["n"], world["spec"], world["track"], world["latents"]
    seed = 11
    out = run_edit_inference(
        identity_plan(n, FPS), model, TINY, track, _schedule(),
        source_latents=x_src, spec=spec, seed=seed,
    )

    # mirror the renderer's draw order: per-entry noise, then reference picks
    plan = with_render_mode(identity_plan(n, FPS), "lip")
    lip = build_mask("lip", boxes_for_frames(spec, 41, FPS), n)
    cell_noise = np.array([e.noise_level for e in plan.entries])[:, None, None] * lip
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n, 8, 8, 16))
    nz = cell_noise[..., None]
    x1 = np.where(nz > 0.0, (1.0 - nz) * x_src + nz * eps, x_src)
    pool = [(i, x_src[i], lip[i]) for i in range(n)]
    refs = sample_face_refs(pool, (0, n), FPS, rng)

    f_out = frames_for_num_latents(n)
    wins = windows_for_frames(track.features, f_out, DEFAULT_FEATURE_RATE, FPS)
    groups = [list(range(s, min(e, f_out))) for s, e in map(latent_to_range, range(n))]
    audio = project_audio(model, TINY, wins, groups)

    def vfn(x, t):
        active = (cell_noise > 0.0) & (t <= cell_noise + TIME_EPS)
        tts = np.where(active, t, cell_noise)
        seq = assemble_tokens(x, np.arange(n), tts, lip, face_refs=refs,
                              include_register=True)
        h = run_blocks(model, TINY, embed_tokens(model, seq), seq, audio)
        return readout(model, seq, h).data.reshape(n, 8, 8, 16)

    x0 = euler_solve(x1, vfn, num_steps=5, noise_levels=cell_noise)
    assert np.array_equal(out["latents"], x0)


def test_cache_reuse_stays_close_to_exact_sampling(world, model):
    plan = identity_plan(world["n"], FPS)
    kw = dict(source_latents=world["latents"], spec=world["spec"], seed=4)
    exact = run_edit_inference(
        plan, model, TINY, world["track"],
        _schedule(num_steps=16, cache_threshold=0.0),
        **kw,
    )
    cached = run_edit_inference(
        plan, model, TINY, world["track"],
        _schedule(num_steps=16, cache_threshold=0.05),
        **kw,
    )
    assert exact["report"]["cache"]["hits"] == 0
    assert cached["report"]["cache"]["hits"] > 0
    rel = np.linalg.norm(cached["latents"] - exact["latents"]) / np.linalg.norm(
        exact["latents"]
    )
    assert rel < 0.02


def test_edit_render_keeps_distant_frames_bitwise(world, model):
    ops = [EditOp("removal", 1.2, -0.3), EditOp("addition", 0.4, 0.7)]
    plan = apply_edit_ops(world["n"], ops, FPS)
    origins = [e.origin for e in plan.entries]
    assert "inserted" in origins
    noises = {e.noise_level for e in plan.entries if e.origin == "kept"}
    assert 0.7 in noises and 0.0 in noises

    out = run_edit_inference(
        plan, model, TINY, world["track"], _schedule(render_mode="none"),
        source_latents=world["latents"], spec=world["spec"], seed=5,
    )
    assert out["latents"].shape[0] == len(plan.entries)
    assert out["video"].shape[0] == frames_for_num_latents(len(plan.entries))
    for i, e in enumerate(plan.entries):
        if e.origin == "kept" and e.noise_level == 0.0:
            assert np.array_equal(out["latents"][i], world["latents"][e.orig_index])
        elif e.origin == "kept":
            assert not np.array_equal(out["latents"][i], world["latents"][e.orig_index])


def test_multi_block_render_with_insertion(wide_world, model):
    ops = [EditOp("addition", 3.0, 0.7)]
    plan = apply_edit_ops(wide_world["n"], ops, FPS)
    assert len(plan.entries) == wide_world["n"] + 2
    out = run_edit_inference(
        plan, model, TINY, wide_world["track"], _schedule(render_mode="none"),
        source_latents=wide_world["latents"], spec=wide_world["spec"], seed=6,
    )
    for i, e in enumerate(plan.entries):
        if e.origin == "kept" and e.noise_level == 0.0:
            assert np.array_equal(
                out["latents"][i], wide_world["latents"][e.orig_index]
            )
    assert np.all(np.isfinite(out["latents"]))
    assert out["report"]["num_latents"] == wide_world["n"] + 2


def test_render_errors(world, model):
    plan = identity_plan(world["n"], FPS)
    with pytest.raises(InferenceError, match="source latents"):
        run_edit_inference(plan, model, TINY, world["track"], _schedule(), seed=0)
    with pytest.raises(InferenceError, match="source latent"):
        run_edit_inference(
            identity_plan(9, FPS), model, TINY, world["track"], _schedule(),
            source_latents=world["latents"], spec=world["spec"], seed=0,
        )
    with pytest.raises(InferenceError, match="scene spec"):
        run_edit_inference(
            plan, model, TINY, world["track"], _schedule(),
            source_latents=world["latents"], seed=0,
        )
    short = gen_audio(1, duration_s=0.9)
    with pytest.raises(InferenceError, match="audio covers"):
        run_edit_inference(
            plan, model, TINY, short, _schedule(),
            source_latents=world["latents"], spec=world["spec"], seed=0,
        )


def test_render_surfaces_nonfinite_model_output(world):
    params = woken_params(seed=6)
    params["block0/attn/wq"].assign(np.full(params["block0/attn/wq"].shape, 1e200))
    params["block0/attn/wk"].assign(np.full(params["block0/attn/wk"].shape, 1e200))
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(InferenceError, match="non-finite"):
            run_edit_inference(
                identity_plan(world["n"], FPS), params, TINY, world["track"],
                _schedule(), source_latents=world["latents"], spec=world["spec"],
                seed=0,
            )


def test_refs_can_be_ablated(world, model):
    plan = identity_plan(world["n"], FPS)
    out = run_edit_inference(
        plan, model, TINY, world["track"], _schedule(),
        source_latents=world["latents"], spec=world["spec"], seed=2,
        with_refs=False,
    )
    assert out["report"]["refs_enabled"] is False
    assert np.isfinite(out["latents"]).all()
    with_refs = run_edit_inference(
        plan, model, TINY, world["track"], _schedule(),
        source_latents=world["latents"], spec=world["spec"], seed=2,
    )
    assert with_refs["report"]["refs_enabled"] is True
    # the reference tokens change what the lip region denoises to
    assert not np.array_equal(out["latents"], with_refs["latents"])
