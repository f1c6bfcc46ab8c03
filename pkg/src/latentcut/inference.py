"""Block-tiled Euler sampling over an edited latent timeline.

The sampler walks 40 uniform time steps from 1 to 0. At each step the
timeline is cut into fixed-width blocks and the denoiser runs per block;
early and late steps advance the cut offset so block seams move, while a
long middle phase keeps the partition frozen so per-block hidden-state
residuals can be reused when the conditioning drifts little. Frames
covered by two blocks take the exact mean of both velocities.

Each plan entry contributes a per-cell noise level (entry noise times its
region mask). A cell joins the update loop at the first step whose time
is at or below its level and is initialized by blending the source cell
with drawn noise at that level; level-zero cells pass through bitwise
untouched. Identity references come from the source latents' lower-face
cells near the block; blocks containing inserted frames additionally see
the nearest clean source frame on each side, position-clamped so the
model reads them as immediate neighbors.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .audio import DEFAULT_FEATURE_RATE, windows_for_frames
from .denoiser import (
    CELL_CHANNELS,
    GRID,
    DenoiserError,
    ModelConfig,
    TokenSequence,
    assemble_tokens,
    embed_tokens,
    project_audio,
    readout,
    run_blocks,
    timestep_embedding,
)
from .timeline import (
    TEMPORAL_GROUP,
    LatentTimelinePlan,
    frames_for_num_latents,
    latent_to_range,
    with_render_mode,
)
from .world import AudioTrack, IdentitySpec, boxes_for_frames, build_mask, decode, metrics

DEFAULT_STEPS = 40
DEFAULT_BLOCK_WIDTH = 17
DEFAULT_SHIFT = 5
DEFAULT_MEDIAL_FRACTION = 0.75
DEFAULT_CACHE_THRESHOLD = 0.05
REF_CLAMP_HORIZON = 3
FACE_REF_COUNT = 6
FACE_REF_WINDOW_S = 5.0
TIME_EPS = 1e-9

_RENDER_MODES = ("none", "lip", "face", "head", "full")


class InferenceError(ValueError):
    pass


@dataclass(frozen=True)
class InferenceSchedule:
    """Sampling plan: step count, block tiling, seam motion, cache budget.

    ``render_mode`` is applied to the plan before rendering: untouched
    kept frames are re-noised inside that region ('none' leaves them as
    pure conditioning).
    """

    num_steps: int = DEFAULT_STEPS
    block_width: int = DEFAULT_BLOCK_WIDTH
    shift: int = DEFAULT_SHIFT
    medial_fraction: float = DEFAULT_MEDIAL_FRACTION
    cache_threshold: float = DEFAULT_CACHE_THRESHOLD
    render_mode: str = "lip"

    def __post_init__(self):
        if self.num_steps < 1:
            raise InferenceError(f"need at least one step, got {self.num_steps}")
        if self.block_width < 2:
            raise InferenceError(f"block width {self.block_width} is too small")
        if not 0 < self.shift < self.block_width:
            raise InferenceError(
                f"shift {self.shift} must sit strictly between 0 and the "
                f"block width {self.block_width}"
            )
        if not 0.0 <= self.medial_fraction <= 1.0:
            raise InferenceError(f"medial fraction {self.medial_fraction} outside [0, 1]")
        if self.cache_threshold < 0:
            raise InferenceError(f"negative cache threshold {self.cache_threshold}")
        if self.render_mode not in _RENDER_MODES:
            raise InferenceError(f"unknown render mode {self.render_mode!r}")

    def to_dict(self) -> dict:
        return {
            "num_steps": self.num_steps,
            "block_width": self.block_width,
            "shift": self.shift,
            "medial_fraction": self.medial_fraction,
            "cache_threshold": self.cache_threshold,
            "render_mode": self.render_mode,
        }


def step_times(num_steps: int) -> np.ndarray:
    """Uniform time grid from 1 to 0 inclusive, num_steps + 1 values."""
    if num_steps < 1:
        raise InferenceError(f"need at least one step, got {num_steps}")
    return np.array([(num_steps - i) / num_steps for i in range(num_steps + 1)])


def shift_active_flags(schedule: InferenceSchedule) -> np.ndarray:
    """Per-step booleans: does the partition offset advance after this step?

    The medial phase — a centered run of round(fraction * steps) steps —
    keeps the offset frozen; the lead-in and tail-out steps advance it.
    """
    s = schedule.num_steps
    medial = int(round(schedule.medial_fraction * s))
    lead = (s - medial) // 2
    flags = np.ones(s, dtype=bool)
    flags[lead:lead + medial] = False
    return flags


def block_offset(schedule: InferenceSchedule, step: int) -> int:
    """Partition offset at ``step``: shift accumulated over prior active steps."""
    if not 0 <= step < schedule.num_steps:
        raise InferenceError(f"step {step} outside [0, {schedule.num_steps})")
    advanced = int(shift_active_flags(schedule)[:step].sum())
    return (schedule.shift * advanced) % schedule.block_width


@dataclass(frozen=True)
class BlockPartition:
    blocks: tuple[tuple[int, int], ...]  # half-open [start, end) ranges
    coverage: np.ndarray  # [N] int, 1 or 2 blocks per frame


def tapsf_partition(n_latents: int, step: int, schedule: InferenceSchedule) -> BlockPartition:
    """Cut ``n_latents`` frames into blocks at this step's offset.

    Short timelines become a single block. Otherwise full blocks tile from
    the offset; gaps at the ends are covered by full-width blocks anchored
    there, overlapping one neighbor — except that on timelines shorter
    than two widths an anchored tail would also reach the head cover, so
    the tail gap keeps its own (narrower) block instead. Every frame
    lands in one or two blocks.
    """
    if n_latents < 1:
        raise InferenceError("empty timeline")
    w = schedule.block_width
    o = block_offset(schedule, step)
    blocks: list[tuple[int, int]] = []
    if n_latents <= w:
        blocks.append((0, n_latents))
    else:
        tiled_end = o
        while tiled_end + w <= n_latents:
            blocks.append((tiled_end, tiled_end + w))
            tiled_end += w
        if blocks:
            if o > 0:
                blocks.insert(0, (0, w))
            if tiled_end < n_latents:
                if o == 0 or n_latents >= 2 * w:
                    blocks.append((n_latents - w, n_latents))
                else:
                    blocks.append((tiled_end, n_latents))
        else:
            blocks.extend([(0, w), (n_latents - w, n_latents)])
    coverage = np.zeros(n_latents, dtype=int)
    for s, e in blocks:
        coverage[s:e] += 1
    if coverage.min() < 1 or coverage.max() > 2:
        raise InferenceError(f"bad partition at step {step}: coverage {coverage}")
    return BlockPartition(blocks=tuple(blocks), coverage=coverage)


# -- euler solving ---------------------------------------------------------


def _active_cells(levels: np.ndarray, t_now: float) -> np.ndarray:
    return (levels > 0.0) & (t_now <= levels + TIME_EPS)


def euler_solve(
    x1: np.ndarray,
    velocity_fn,
    num_steps: int = DEFAULT_STEPS,
    noise_levels: np.ndarray | None = None,
) -> np.ndarray:
    """Plain full-sequence sampler from t=1 to t=0.

    ``velocity_fn(x, t)`` returns the velocity at the step's start time.
    ``noise_levels`` (one per leading entry, or one per element of
    ``x1.shape[:-1]``) gates late joiners: an entry starts moving at the
    first step whose time is at or below its level, and level-zero
    entries are never written.
    """
    x = np.array(x1, dtype=float)
    levels = None
    if noise_levels is not None:
        levels = np.asarray(noise_levels, dtype=float)
        if levels.shape == x.shape[:1] and x.ndim > 1:
            levels = levels.reshape((-1,) + (1,) * (x.ndim - 2))
            levels = np.broadcast_to(levels, x.shape[:-1])
        elif levels.shape != x.shape[:-1]:
            raise InferenceError(
                f"noise levels {levels.shape} do not match state {x.shape}"
            )
    times = step_times(num_steps)
    for i in range(num_steps):
        t_now, t_next = times[i], times[i + 1]
        v = np.asarray(velocity_fn(x, t_now), dtype=float)
        if v.shape != x.shape:
            raise InferenceError(f"velocity shape {v.shape} does not match state {x.shape}")
        if levels is None:
            x = x - (t_now - t_next) * v
        else:
            active = _active_cells(levels, t_now)
            x = np.where(active[..., None], x - (t_now - t_next) * v, x)
    return x


def tapsf_step(
    state: np.ndarray,
    t_now: float,
    t_next: float,
    partition: BlockPartition,
    block_velocity,
    active: np.ndarray,
) -> np.ndarray:
    """One sampling step over a partition.

    ``block_velocity(start, end, state_slice)`` returns the velocity for
    one block; frames covered twice take the mean of both evaluations.
    Only cells flagged ``active`` ([N, grid, grid] bool) move.
    """
    vel = np.zeros_like(state)
    count = np.zeros(state.shape[0])
    for s, e in partition.blocks:
        v = np.asarray(block_velocity(s, e, state[s:e]), dtype=float)
        if v.shape != state[s:e].shape:
            raise InferenceError(
                f"block [{s}, {e}) velocity shape {v.shape} does not match its slice"
            )
        vel[s:e] += v
        count[s:e] += 1.0
    if count.min() < 1:
        raise InferenceError("partition leaves frames uncovered")
    vel = vel / count[:, None, None, None]
    return np.where(active[..., None], state - (t_now - t_next) * vel, state)


# -- reference handling ----------------------------------------------------


def fb_rope_assign(
    t_source: int, block_start: int, block_end: int, horizon: int = REF_CLAMP_HORIZON
) -> int:
    """Position a reference frame relative to a block (inclusive bounds).

    Sources within ``horizon`` of the nearer edge keep their true index;
    farther ones are pinned just past that edge, so the model always reads
    the reference as a near neighbor rather than a distant frame.
    """
    if block_start <= t_source <= block_end:
        return t_source
    if t_source > block_end:
        d = t_source - block_end
        return t_source if d <= horizon else block_end + horizon
    d = block_start - t_source
    return t_source if d <= horizon else block_start - horizon


def sample_face_refs(
    clean: list[tuple[int, np.ndarray, np.ndarray]],
    block: tuple[int, int],
    fps: float,
    rng: np.random.Generator,
    count: int = FACE_REF_COUNT,
    window_s: float = FACE_REF_WINDOW_S,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pick identity references near a block, at most ``count``.

    ``clean`` holds (timeline index, latent, cell mask) triples of frames
    with clean source content. Eligible are those within ``window_s``
    seconds of the block; when more than ``count`` qualify a uniform
    subset is drawn, else all are returned (none for a fully synthetic
    timeline). Output pairs feed the token assembler directly.
    """
    radius = math.ceil(window_s * fps / TEMPORAL_GROUP)
    s, e = block
    eligible = [c for c in clean if s - radius <= c[0] <= e - 1 + radius]
    if len(eligible) > count:
        picks = sorted(rng.choice(len(eligible), size=count, replace=False))
        eligible = [eligible[i] for i in picks]
    return [(latent, cells) for _, latent, cells in eligible]


# -- block cache -----------------------------------------------------------


@dataclass
class BlockCache:
    """Reuse state for one block position: last conditioning signature,
    the hidden-state residual of the last full evaluation, and the drift
    accumulated since then."""

    sig: np.ndarray | None = None
    resid: np.ndarray | None = None
    acc: float = 0.0


def cache_gate(
    cache: BlockCache, sig: np.ndarray, threshold: float, shift_active: bool
) -> bool:
    """Decide whether the cached residual may stand in for a full pass.

    Accumulates the relative L1 change of the conditioning signature step
    over step; reuse is allowed while the running total stays under the
    threshold and the partition is not moving. The caller must reset the
    budget and store a fresh residual whenever this returns False.
    """
    if cache.sig is not None:
        denom = float(np.abs(cache.sig).sum())
        if cache.sig.shape != sig.shape or denom <= 0.0:
            cache.acc = math.inf
        else:
            cache.acc += float(np.abs(sig - cache.sig).sum()) / denom
    cache.sig = sig
    return cache.resid is not None and not shift_active and cache.acc < threshold


_SIG_MAX_ROWS = 192


def _signature(params: dict, seq: TokenSequence, h_data: np.ndarray) -> np.ndarray:
    """Timestep-modulated input of the first block, on a row subsample."""
    stride = max(1, seq.num_tokens // _SIG_MAX_ROWS)
    rows = np.arange(0, seq.num_tokens, stride)
    emb = timestep_embedding(seq.token_timesteps[rows])
    c = emb @ params["tcond/w"].data + params["tcond/b"].data
    c = c * (1.0 / (1.0 + np.exp(-c)))
    D = h_data.shape[1]
    m = c @ params["block0/mod/w"].data[:, : 2 * D] + params["block0/mod/b"].data[: 2 * D]
    a_key = "adapter/block0/mod/w/a"
    if a_key in params:
        m = m + (c @ params[a_key].data) @ params["adapter/block0/mod/w/b"].data[:, : 2 * D]
    h = h_data[rows]
    mu = h.mean(axis=-1, keepdims=True)
    xc = h - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ln = xc / np.sqrt(var + 1e-6)
    return (ln * (1.0 + m[:, D:]) + m[:, :D]).ravel()


# -- plan realization ------------------------------------------------------


def _entry_regions(
    plan: LatentTimelinePlan,
    source_latents: np.ndarray | None,
    spec: IdentitySpec | None,
) -> np.ndarray:
    """Per-entry region cells [N, grid, grid] in timeline order."""
    n = len(plan.entries)
    region = np.zeros((n, GRID, GRID))
    boxed_modes = sorted(
        {
            e.mask_mode
            for e in plan.entries
            if e.origin == "kept" and e.mask_mode in ("lip", "face", "head")
        }
    )
    masks_by_mode: dict[str, np.ndarray] = {}
    if boxed_modes:
        if spec is None:
            raise InferenceError(
                f"plan uses region masks {boxed_modes} but no scene spec was given"
            )
        n_src = source_latents.shape[0]
        boxes = boxes_for_frames(spec, frames_for_num_latents(n_src), plan.fps)
        for mode in boxed_modes:
            masks_by_mode[mode] = build_mask(mode, boxes, n_src)
    for i, e in enumerate(plan.entries):
        if e.origin == "inserted" or e.mask_mode == "full":
            region[i] = 1.0
        elif e.mask_mode != "none":
            region[i] = masks_by_mode[e.mask_mode][e.orig_index]
    return region


def _clean_ref_pool(
    plan: LatentTimelinePlan,
    source_latents: np.ndarray | None,
    spec: IdentitySpec | None,
) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """Identity-bearing cells per kept entry: lower-face crop of the clean
    source latent, indexed by its position on the edited timeline."""
    if spec is None or source_latents is None:
        return []
    n_src = source_latents.shape[0]
    boxes = boxes_for_frames(spec, frames_for_num_latents(n_src), plan.fps)
    lip = build_mask("lip", boxes, n_src)
    return [
        (e.temporal_index, source_latents[e.orig_index], lip[e.orig_index])
        for e in plan.entries
        if e.origin == "kept"
    ]


def run_edit_inference(
    plan: LatentTimelinePlan,
    params: dict,
    model_config: ModelConfig,
    track: AudioTrack | None,
    schedule: InferenceSchedule,
    source_latents: np.ndarray | None = None,
    spec: IdentitySpec | None = None,
    seed: int = 0,
    with_refs: bool = True,
) -> dict:
    """Render an edited timeline; returns latents, decoded video, report.

    All randomness comes from ``seed`` in a fixed order: one noise latent
    per plan entry in timeline order, then identity-reference picks per
    newly encountered block range. Two runs with equal inputs agree
    bitwise. ``track=None`` renders without audio conditioning — the
    low-rank adapter pairs stay disengaged too, so a silent render runs on
    the frozen editing base alone. Passing a track that does not cover the
    edited timeline is an error.
    ``with_refs=False`` suppresses identity and boundary reference tokens,
    leaving only the video tokens themselves — an ablation hook.
    """
    wall_start = time.perf_counter()
    if schedule.render_mode != "none":
        plan = with_render_mode(plan, schedule.render_mode)
    entries = plan.entries
    n = len(entries)
    fps = plan.fps
    f_out = frames_for_num_latents(n)

    kept = [e for e in entries if e.origin == "kept"]
    if kept:
        if source_latents is None:
            raise InferenceError("plan keeps source frames but no source latents were given")
        source_latents = np.asarray(source_latents, dtype=float)
        n_src = source_latents.shape[0]
        if source_latents.shape != (n_src, GRID, GRID, CELL_CHANNELS):
            raise InferenceError(f"bad source latent shape {source_latents.shape}")
        worst = max(e.orig_index for e in kept)
        if worst >= n_src:
            raise InferenceError(
                f"plan references source latent {worst} but only {n_src} exist"
            )
    region = _entry_regions(plan, source_latents, spec)
    noise_level = np.array([e.noise_level for e in entries])
    cell_noise = noise_level[:, None, None] * region

    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n, GRID, GRID, CELL_CHANNELS))
    base = np.stack(
        [
            source_latents[e.orig_index]
            if e.origin == "kept"
            else np.zeros((GRID, GRID, CELL_CHANNELS))
            for e in entries
        ]
    )
    nz = cell_noise[..., None]
    x = np.where(nz > 0.0, (1.0 - nz) * base + nz * eps, base)

    audio_all = None
    if track is not None:
        if track.duration_s + TIME_EPS < f_out / fps:
            raise InferenceError(
                f"audio covers {track.duration_s:.3f}s but the edited timeline "
                f"needs {f_out / fps:.3f}s"
            )
        wins = windows_for_frames(track.features, f_out, DEFAULT_FEATURE_RATE, fps)
        groups = []
        for i in range(n):
            s, e = latent_to_range(i)
            groups.append(list(range(s, min(e, f_out))))
        audio_all = project_audio(params, model_config, wins, groups)

    # low-rank pairs are the speech-conditioning residual; without a track
    # they would replay stage-2 bias on a job that has no speech to follow
    adapters_on = track is not None

    ref_pool = _clean_ref_pool(plan, source_latents, spec)
    kept_positions = sorted(e.temporal_index for e in kept)
    inserted_positions = sorted(e.temporal_index for e in entries if e.origin == "inserted")
    by_position = {e.temporal_index: e for e in entries}

    def frame_refs_for(s: int, e: int) -> list[tuple[np.ndarray, int]]:
        if source_latents is None:
            return []
        if not any(s <= p < e for p in inserted_positions):
            return []
        refs = []
        before = [p for p in kept_positions if p < s]
        after = [p for p in kept_positions if p >= e]
        for p in (max(before) if before else None, min(after) if after else None):
            if p is None:
                continue
            latent = source_latents[by_position[p].orig_index]
            refs.append((latent, fb_rope_assign(p, s, e - 1)))
        return refs

    times = step_times(schedule.num_steps)
    flags = shift_active_flags(schedule)
    face_refs: dict[tuple[int, int], list] = {}
    frame_refs: dict[tuple[int, int], list] = {}
    caches: dict[tuple[int, int], BlockCache] = {}
    stats = {"hits": 0, "misses": 0}
    step_seconds = []

    for i in range(schedule.num_steps):
        t0 = time.perf_counter()
        t_now, t_next = times[i], times[i + 1]
        active = _active_cells(cell_noise, t_now)
        if not active.any():
            step_seconds.append(time.perf_counter() - t0)
            continue
        partition = tapsf_partition(n, i, schedule)
        tts = np.where(active, t_now, cell_noise)
        shift_now = bool(flags[i])

        def block_velocity(s, e, x_blk):
            key = (s, e)
            if key not in face_refs:
                if with_refs:
                    face_refs[key] = sample_face_refs(ref_pool, key, fps, rng)
                    frame_refs[key] = frame_refs_for(s, e)
                else:
                    face_refs[key] = []
                    frame_refs[key] = []
            seq = assemble_tokens(
                x_blk,
                np.arange(s, e),
                tts[s:e],
                region[s:e],
                face_refs=face_refs[key],
                frame_refs=frame_refs[key],
                include_register=True,
            )
            audio_blk = (
                ad.narrow(audio_all, 0, s, e - s) if audio_all is not None else None
            )
            h_in = embed_tokens(params, seq, use_adapters=adapters_on)
            cache = caches.setdefault(key, BlockCache())
            sig = _signature(params, seq, h_in.data)
            if cache_gate(cache, sig, schedule.cache_threshold, shift_now):
                stats["hits"] += 1
                h_out = ad.tensor(h_in.data + cache.resid)
            else:
                try:
                    h_out = run_blocks(
                        params, model_config, h_in, seq, audio_blk,
                        use_adapters=adapters_on,
                    )
                except DenoiserError as exc:
                    raise InferenceError(
                        f"step {i}, block [{s}, {e}): {exc}"
                    ) from exc
                cache.resid = h_out.data - h_in.data
                cache.acc = 0.0
                stats["misses"] += 1
            vel = readout(params, seq, h_out, use_adapters=adapters_on).data
            if not np.all(np.isfinite(vel)):
                raise InferenceError(f"step {i}, block [{s}, {e}): non-finite velocity")
            return vel.reshape(e - s, GRID, GRID, CELL_CHANNELS)

        x = tapsf_step(x, t_now, t_next, partition, block_velocity, active)
        if not np.all(np.isfinite(x)):
            raise InferenceError(f"non-finite state after step {i}")
        step_seconds.append(time.perf_counter() - t0)

    video = decode(x)
    total = stats["hits"] + stats["misses"]
    report = {
        "schedule": schedule.to_dict(),
        "seed": seed,
        "num_latents": n,
        "video_frames": f_out,
        "audio_conditioned": track is not None,
        "adapters_engaged": adapters_on,
        "refs_enabled": with_refs,
        "cache": {
            "hits": stats["hits"],
            "misses": stats["misses"],
            "hit_rate": stats["hits"] / total if total else 0.0,
        },
        "wall_seconds": round(time.perf_counter() - wall_start, 4),
        "mean_step_seconds": round(float(np.mean(step_seconds)), 4),
    }
    if spec is not None and track is not None:
        report["metrics"] = metrics(video, track, spec, fps).to_dict()
    return {"latents": x, "video": video, "report": report}
