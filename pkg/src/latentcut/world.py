"""Procedural talking-head world with an exactly invertible toy codec.

Scenes are deterministic functions of a seed: a textured head rectangle
over a textured background, bobbing vertically by at most one pixel, with
a mouth region whose brightness tracks the audio envelope. Because every
generated quantity is known in closed form, evaluation does not need any
learned perception: the mouth aperture can be read back off pixels
exactly, identity drift is a texture comparison against an ideal
re-render, and background damage is measured directly.

The codec is fixed, not learned. Frames pack spatially 4x4 into 16
channels (a lossless space-to-depth), temporally by averaging each causal
frame group (1 frame for latent 0, 8 thereafter), and values map
affinely from [0, 1] pixels to [-1, 1] latents. Decoding expands each
latent back to a piecewise-constant frame group.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .timeline import (
    TEMPORAL_GROUP,
    frames_for_num_latents,
    latent_to_range,
    num_latents_for_frames,
)

FRAME_SIZE = 32
SPATIAL_FACTOR = 4
LATENT_GRID = FRAME_SIZE // SPATIAL_FACTOR  # 8
LATENT_CHANNELS = SPATIAL_FACTOR * SPATIAL_FACTOR  # 16
FEATURE_BANKS = 2
FEATURE_CHANNELS = 16
BOB_AMPLITUDE = 1  # pixels, vertical only

MIN_FPS, MAX_FPS = 24.0, 60.0


class WorldError(ValueError):
    pass


Rect = tuple[int, int, int, int]  # (y0, y1, x0, x1), half-open pixel coords


@dataclass(frozen=True)
class IdentitySpec:
    seed: int
    head_box: Rect
    lower_face_box: Rect
    mouth_box: Rect
    head_texture: np.ndarray  # [FRAME_SIZE, FRAME_SIZE]
    background: np.ndarray  # [FRAME_SIZE, FRAME_SIZE]
    bob_freq_hz: float
    bob_phase: float

    def bob_offset(self, t_s: float | np.ndarray) -> np.ndarray:
        """Integer vertical shift of the head at time t."""
        return np.round(
            BOB_AMPLITUDE * np.sin(2 * np.pi * self.bob_freq_hz * t_s + self.bob_phase)
        ).astype(np.int64)


@dataclass(frozen=True)
class AudioTrack:
    seed: int
    duration_s: float
    feature_rate_hz: float
    envelope: np.ndarray  # [L] in [0, 1]
    features: np.ndarray  # [L, FEATURE_BANKS, FEATURE_CHANNELS]

    def envelope_at(self, times_s: np.ndarray) -> np.ndarray:
        L = self.envelope.shape[0]
        pos = np.clip(np.asarray(times_s) * self.feature_rate_hz, 0, L - 1)
        return np.interp(pos, np.arange(L), self.envelope)


def _smooth_field(rng: np.random.Generator, amplitude: float, base: float) -> np.ndarray:
    yy, xx = np.meshgrid(
        np.arange(FRAME_SIZE), np.arange(FRAME_SIZE), indexing="ij"
    )
    field = np.zeros((FRAME_SIZE, FRAME_SIZE))
    for _ in range(3):
        fy, fx = rng.uniform(0.02, 0.12, 2)
        phase = rng.uniform(0, 2 * np.pi)
        field += rng.uniform(0.4, 1.0) * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    field *= amplitude / np.max(np.abs(field))
    return np.clip(base + field, 0.05, 0.95)


def gen_scene(seed: int) -> IdentitySpec:
    """Deterministic identity: geometry and textures from one seed."""
    rng = np.random.default_rng(seed)
    hy0 = int(rng.integers(3, 6))
    hy1 = int(rng.integers(27, 30))
    hx0 = int(rng.integers(7, 10))
    hx1 = int(rng.integers(23, 26))
    head = (hy0, hy1, hx0, hx1)

    ly1 = hy1 - 1
    ly0 = ly1 - int(rng.integers(9, 12))
    lx0 = hx0 + int(rng.integers(2, 4))
    lx1 = hx1 - int(rng.integers(2, 4))
    lower = (ly0, ly1, lx0, lx1)

    mouth = (ly0 + 3, ly1 - 2, lx0 + 2, lx1 - 2)

    spec = IdentitySpec(
        seed=seed,
        head_box=head,
        lower_face_box=lower,
        mouth_box=mouth,
        head_texture=_smooth_field(rng, amplitude=0.22, base=0.55),
        background=_smooth_field(rng, amplitude=0.10, base=0.30),
        bob_freq_hz=float(rng.uniform(0.3, 0.7)),
        bob_phase=float(rng.uniform(0, 2 * np.pi)),
    )
    _validate_scene(spec)
    return spec


def _validate_scene(spec: IdentitySpec) -> None:
    hy0, hy1, hx0, hx1 = spec.head_box
    ly0, ly1, lx0, lx1 = spec.lower_face_box
    my0, my1, mx0, mx1 = spec.mouth_box
    a = BOB_AMPLITUDE
    if not (a <= hy0 < hy1 <= FRAME_SIZE - a and 0 <= hx0 < hx1 <= FRAME_SIZE):
        raise WorldError(f"head box {spec.head_box} leaves the frame under bob")
    if not (hy0 <= ly0 < ly1 <= hy1 and hx0 <= lx0 < lx1 <= hx1):
        raise WorldError(f"lower-face box {spec.lower_face_box} not inside head {spec.head_box}")
    if not (ly0 < my0 < my1 < ly1 and lx0 < mx0 < mx1 < lx1):
        raise WorldError(f"mouth box {spec.mouth_box} not strictly inside lower face")
    if my1 - my0 <= 2 * a:
        raise WorldError("mouth box too thin for bob-safe recovery")


def gen_audio(seed: int, duration_s: float, feature_rate_hz: float = 50.0) -> AudioTrack:
    """Envelope from a few low-frequency sinusoids, plus a lag feature bank.

    The feature grid is [L, 2, 16]: bank 0 holds the envelope delayed by
    0..15 steps (lag 0 is the envelope itself), bank 1 the same lags after
    a 3-step moving average. Everything is linear in the envelope.
    """
    if duration_s <= 0:
        raise WorldError(f"duration {duration_s} must be positive")
    rng = np.random.default_rng(seed)
    L = int(round(duration_s * feature_rate_hz))
    t = np.arange(L) / feature_rate_hz
    n_comp = int(rng.integers(3, 7))
    raw = np.zeros(L)
    for _ in range(n_comp):
        # slow enough that 8-frame group means still track the envelope;
        # the upward chirp breaks time symmetry so a reversed track
        # decorrelates even over a few cycles
        f0 = rng.uniform(0.12, 0.4)
        sweep = rng.uniform(0.08, 0.2)
        phase = 2 * np.pi * (f0 * t + 0.5 * sweep * t * t / max(duration_s, 1e-9))
        raw += rng.uniform(0.5, 1.0) * np.sin(phase + rng.uniform(0, 2 * np.pi))
    lo, hi = raw.min(), raw.max()
    env = (raw - lo) / (hi - lo) if hi > lo else np.full(L, 0.5)

    lags = np.arange(FEATURE_CHANNELS)
    idx = np.maximum(np.arange(L)[:, None] - lags[None, :], 0)
    bank0 = env[idx]  # [L, 16]
    kernel = np.ones(3) / 3.0
    smoothed = np.convolve(env, kernel, mode="same")
    bank1 = smoothed[idx]
    features = np.stack([bank0, bank1], axis=1)  # [L, 2, 16]
    return AudioTrack(
        seed=seed,
        duration_s=duration_s,
        feature_rate_hz=feature_rate_hz,
        envelope=env,
        features=features,
    )


def aperture_series(track: AudioTrack, fps: float, frame_count: int) -> np.ndarray:
    """Mouth intensity per frame: a(t) = 0.1 + 0.8 * envelope(t)."""
    times = np.arange(frame_count) / fps
    return 0.1 + 0.8 * track.envelope_at(times)


def render_clip(
    spec: IdentitySpec, track: AudioTrack, fps: float, frame_count: int | None = None
) -> np.ndarray:
    """Ground-truth pixel clip [F, 32, 32] in [0, 1]."""
    if not MIN_FPS <= fps <= MAX_FPS:
        raise WorldError(f"fps {fps} outside [{MIN_FPS}, {MAX_FPS}]")
    if frame_count is None:
        frame_count = int(round(track.duration_s * fps))
    if frame_count / fps > track.duration_s + 1e-9:
        raise WorldError(
            f"{frame_count} frames at {fps} fps exceed the {track.duration_s}s track"
        )
    apertures = aperture_series(track, fps, frame_count)
    times = np.arange(frame_count) / fps
    dys = spec.bob_offset(times)
    hy0, hy1, hx0, hx1 = spec.head_box
    my0, my1, mx0, mx1 = spec.mouth_box
    frames = np.empty((frame_count, FRAME_SIZE, FRAME_SIZE))
    for i in range(frame_count):
        dy = int(dys[i])
        img = spec.background.copy()
        img[hy0 + dy:hy1 + dy, hx0:hx1] = spec.head_texture[hy0:hy1, hx0:hx1]
        img[my0 + dy:my1 + dy, mx0:mx1] = apertures[i]
        frames[i] = img
    return frames


def boxes_for_frames(spec: IdentitySpec, frame_count: int, fps: float) -> list[dict[str, Rect]]:
    """Known per-frame detection boxes, shifted by the head bob."""
    times = np.arange(frame_count) / fps
    dys = spec.bob_offset(times)
    out = []
    for dy in dys.tolist():
        hy0, hy1, hx0, hx1 = spec.head_box
        ly0, ly1, lx0, lx1 = spec.lower_face_box
        out.append(
            {
                "head": (hy0 + dy, hy1 + dy, hx0, hx1),
                "lower_face": (ly0 + dy, ly1 + dy, lx0, lx1),
            }
        )
    return out


def _enclose(rects: list[Rect]) -> Rect:
    y0 = min(r[0] for r in rects)
    y1 = max(r[1] for r in rects)
    x0 = min(r[2] for r in rects)
    x1 = max(r[3] for r in rects)
    return (y0, y1, x0, x1)


def _clip_rect(r: Rect, outer: Rect) -> Rect:
    return (max(r[0], outer[0]), min(r[1], outer[1]), max(r[2], outer[2]), min(r[3], outer[3]))


def _rect_to_cells(rect: Rect) -> np.ndarray:
    """Latent-grid mask of cells whose pixel patch intersects the rect."""
    mask = np.zeros((LATENT_GRID, LATENT_GRID))
    y0, y1, x0, x1 = rect
    if y1 <= y0 or x1 <= x0:
        return mask
    cy0 = max(0, y0 // SPATIAL_FACTOR)
    cy1 = min(LATENT_GRID, -(-y1 // SPATIAL_FACTOR))
    cx0 = max(0, x0 // SPATIAL_FACTOR)
    cx1 = min(LATENT_GRID, -(-x1 // SPATIAL_FACTOR))
    mask[cy0:cy1, cx0:cx1] = 1.0
    return mask


def region_rect(boxes: dict[str, Rect], mode: str) -> Rect:
    """Pixel rect for a mask mode, given one frame's detection boxes."""
    head = boxes["head"]
    lower = boxes["lower_face"]
    if mode == "lip":
        return lower
    if mode == "face":
        ly0, ly1, lx0, lx1 = lower
        grown = (ly0 - (ly1 - ly0), ly1, lx0 - (lx1 - lx0) // 4, lx1 + (lx1 - lx0) // 4)
        return _clip_rect(_enclose([grown, lower]), head)
    if mode == "head":
        return head
    raise WorldError(f"no pixel rect for mask mode {mode!r}")


def build_mask(
    mode: str, boxes: list[dict[str, Rect]], num_latents: int | None = None
) -> np.ndarray:
    """Per-latent region masks [N, 8, 8] from per-frame detection boxes.

    Each latent's mask is the enclosing box over the boxes of the video
    frames it covers, widened per mode: 'lip' is the lower-face box,
    'face' grows upward by the box height (clipped to the head), 'head'
    the full head box, 'full' everything, 'none' nothing.
    """
    F = len(boxes)
    if num_latents is None:
        num_latents = num_latents_for_frames(F)
    masks = np.zeros((num_latents, LATENT_GRID, LATENT_GRID))
    if mode == "none":
        return masks
    if mode == "full":
        return np.ones_like(masks)
    for n in range(num_latents):
        s, e = latent_to_range(n)
        group = boxes[s:min(e, F)]
        if not group:
            raise WorldError(f"latent {n} has no covering frames (only {F} boxes)")
        rect = _enclose([region_rect(b, mode) for b in group])
        masks[n] = _rect_to_cells(rect)
    return masks


# -- codec -----------------------------------------------------------------


def _space_to_depth(frames: np.ndarray) -> np.ndarray:
    F = frames.shape[0]
    g, s = LATENT_GRID, SPATIAL_FACTOR
    return frames.reshape(F, g, s, g, s).transpose(0, 1, 3, 2, 4).reshape(F, g, g, s * s)


def _depth_to_space(cells: np.ndarray) -> np.ndarray:
    N = cells.shape[0]
    g, s = LATENT_GRID, SPATIAL_FACTOR
    return (
        cells.reshape(N, g, g, s, s).transpose(0, 1, 3, 2, 4).reshape(N, g * s, g * s)
    )


def encode(
    video: np.ndarray,
    tile_latent_frames: int | None = None,
    overlap_frames: int = 16,
) -> np.ndarray:
    """Pixel clip [F, 32, 32] -> latents [N, 8, 8, 16].

    Spatial detail moves losslessly into channels; each causal frame group
    averages temporally; values map to [-1, 1]. With ``tile_latent_frames``
    the clip is encoded in temporal tiles whose video slices extend by
    ``overlap_frames`` on each side; results are bit-identical to the
    untiled path because each latent depends only on its own group.
    """
    if video.ndim != 3 or video.shape[1:] != (FRAME_SIZE, FRAME_SIZE):
        raise WorldError(f"expected [F, {FRAME_SIZE}, {FRAME_SIZE}] video, got {video.shape}")
    F = video.shape[0]
    N = num_latents_for_frames(F)
    if tile_latent_frames is not None:
        if tile_latent_frames < 1:
            raise WorldError(f"tile size {tile_latent_frames} must be positive")
        out = np.empty((N, LATENT_GRID, LATENT_GRID, LATENT_CHANNELS))
        for tile_start in range(0, N, tile_latent_frames):
            tile_end = min(tile_start + tile_latent_frames, N)
            # slice start must sit on a group boundary or slice groups
            # would not coincide with absolute ones
            v0 = max(0, latent_to_range(tile_start)[0] - overlap_frames) // TEMPORAL_GROUP * TEMPORAL_GROUP
            v1 = min(F, latent_to_range(tile_end - 1)[1] + overlap_frames)
            piece = encode(video[v0:v1])
            shift = v0 // TEMPORAL_GROUP  # local latent m <-> absolute v0/8 + m
            for n in range(tile_start, tile_end):
                out[n] = piece[n - shift]
        return out
    z = 2.0 * (video - 0.5)
    cells = _space_to_depth(z)
    latents = np.empty((N, LATENT_GRID, LATENT_GRID, LATENT_CHANNELS))
    for n in range(N):
        s, e = latent_to_range(n)
        latents[n] = cells[s:min(e, F)].mean(axis=0)
    return latents


def decode(latents: np.ndarray) -> np.ndarray:
    """Latents [N, 8, 8, 16] -> piecewise-constant pixel clip."""
    if latents.ndim != 4 or latents.shape[1:] != (LATENT_GRID, LATENT_GRID, LATENT_CHANNELS):
        raise WorldError(f"expected [N, 8, 8, 16] latents, got {latents.shape}")
    N = latents.shape[0]
    images = _depth_to_space(latents) / 2.0 + 0.5
    F = frames_for_num_latents(N)
    video = np.empty((F, FRAME_SIZE, FRAME_SIZE))
    for n in range(N):
        s, e = latent_to_range(n)
        video[s:min(e, F)] = images[n]
    return video


# -- metrics ---------------------------------------------------------------


def _recovery_rows(spec: IdentitySpec) -> tuple[int, int]:
    my0, my1, _, _ = spec.mouth_box
    return my0 + BOB_AMPLITUDE, my1 - BOB_AMPLITUDE


def recover_aperture(spec: IdentitySpec, video: np.ndarray) -> np.ndarray:
    """Read the mouth intensity back from pixels.

    Uses the bob-invariant mouth interior (rows the mouth covers under
    every vertical shift), so it works on group-averaged decodes too.
    """
    r0, r1 = _recovery_rows(spec)
    _, _, mx0, mx1 = spec.mouth_box
    return video[:, r0:r1, mx0:mx1].mean(axis=(1, 2))


@dataclass(frozen=True)
class ClipMetrics:
    sync_corr: float
    identity_drift: float
    outside_region_err: float

    def to_dict(self) -> dict:
        return {
            "sync_corr": self.sync_corr,
            "identity_drift": self.identity_drift,
            "outside_region_err": self.outside_region_err,
        }


def metrics(video: np.ndarray, track: AudioTrack, spec: IdentitySpec, fps: float) -> ClipMetrics:
    """Proxy quality metrics against the known generative process.

    sync_corr: Pearson correlation between the recovered mouth series and
    the envelope resampled at frame times. identity_drift: mean absolute
    deviation of non-mouth head texture from an ideal re-render, taking
    each frame's best alignment among the bob shifts the spec permits —
    the bob phase is unobservable from appearance alone, and a pose
    offset is not an identity change (the stand-in must stay
    pose-invariant like the embedding similarity it proxies).
    outside_region_err: same, outside the head under any bob shift.
    """
    F = video.shape[0]
    recovered = recover_aperture(spec, video)
    target = track.envelope_at(np.arange(F) / fps)
    rs, ts = np.std(recovered), np.std(target)
    if rs < 1e-12 or ts < 1e-12:
        corr = 0.0
    else:
        corr = float(np.corrcoef(recovered, target)[0, 1])

    reference = render_clip(spec, track, fps, frame_count=F)
    a = BOB_AMPLITUDE
    hy0, hy1, hx0, hx1 = spec.head_box
    my0, my1, mx0, mx1 = spec.mouth_box
    head_region = np.zeros((FRAME_SIZE, FRAME_SIZE), dtype=bool)
    head_region[hy0 + a:hy1 - a, hx0:hx1] = True
    head_region[my0 - a:my1 + a, mx0:mx1] = False  # mouth under any shift
    # the crop keeps pure head rows under |shift| <= a, so rolling is exact
    per_shift = np.stack(
        [
            np.abs(video - np.roll(reference, dy, axis=1))[:, head_region].mean(axis=1)
            for dy in range(-a, a + 1)
        ]
    )
    drift = float(per_shift.min(axis=0).mean())

    outside = np.ones((FRAME_SIZE, FRAME_SIZE), dtype=bool)
    outside[hy0 - a:hy1 + a, hx0:hx1] = False
    outside_err = float(np.abs(video - reference)[:, outside].mean())
    return ClipMetrics(sync_corr=corr, identity_drift=drift, outside_region_err=outside_err)
