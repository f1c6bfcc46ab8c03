"""Latent timeline algebra and edit planning.

The video codec packs frames into latents with an 8x temporal stride and a
causal first group: latent 0 holds video frame 0 alone, latent n >= 1
holds frames [8(n-1)+1, 8n+1). Edit operations expressed in source-video
seconds are mapped onto this grid, producing a per-latent plan: which
entries survive, where new fully-noised entries go, which surviving
neighbors of a cut get partially re-noised so motion can re-flow across
the seam, and which regions of kept entries are regenerated.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .transcript import MASK_MODES, EditOp, expand_retimes

TEMPORAL_GROUP = 8


class TimelineError(ValueError):
    """Edit operations that cannot be applied to the timeline."""


def latent_to_range(n: int) -> tuple[int, int]:
    """Half-open video frame range covered by latent ``n``."""
    if n < 0:
        raise TimelineError(f"latent index {n} is negative")
    if n == 0:
        return (0, 1)
    return (TEMPORAL_GROUP * (n - 1) + 1, TEMPORAL_GROUP * n + 1)


def video_to_latent(f: int) -> int:
    """Latent index whose range contains video frame ``f``."""
    if f < 0:
        raise TimelineError(f"video frame {f} is negative")
    if f == 0:
        return 0
    return (f + TEMPORAL_GROUP - 1) // TEMPORAL_GROUP


def num_latents_for_frames(frame_count: int) -> int:
    if frame_count <= 0:
        raise TimelineError(f"frame count {frame_count} must be positive")
    return video_to_latent(frame_count - 1) + 1


def frames_for_num_latents(n: int) -> int:
    """Canonical decoded frame count for ``n`` latents."""
    if n <= 0:
        raise TimelineError(f"latent count {n} must be positive")
    return TEMPORAL_GROUP * (n - 1) + 1


@dataclass(frozen=True)
class PlanEntry:
    """One latent frame of the edited timeline."""

    origin: str  # kept | inserted
    orig_index: int | None  # source latent index for kept entries
    noise_level: float  # starting noise in [0, 1]; 0 = conditioning
    mask_mode: str  # region regenerated: none|lip|face|head|full
    temporal_index: int  # position in the edited timeline

    def to_dict(self) -> dict:
        return {
            "origin": self.origin,
            "orig_index": self.orig_index,
            "noise_level": self.noise_level,
            "mask_mode": self.mask_mode,
            "temporal_index": self.temporal_index,
        }


@dataclass(frozen=True)
class LatentTimelinePlan:
    entries: tuple[PlanEntry, ...]
    fps: float
    tiling_overlap_frames: int = 16

    def __post_init__(self):
        for i, e in enumerate(self.entries):
            if e.origin not in ("kept", "inserted"):
                raise TimelineError(f"entry {i}: bad origin {e.origin!r}")
            if e.origin == "inserted" and (e.noise_level != 1.0 or e.mask_mode != "full"):
                raise TimelineError(f"entry {i}: inserted entries are fully noised, full mask")
            if e.origin == "kept" and e.orig_index is None:
                raise TimelineError(f"entry {i}: kept entry needs orig_index")
            if not 0.0 <= e.noise_level <= 1.0:
                raise TimelineError(f"entry {i}: noise_level {e.noise_level} outside [0, 1]")
            if e.mask_mode not in MASK_MODES:
                raise TimelineError(f"entry {i}: bad mask_mode {e.mask_mode!r}")
            if e.temporal_index != i:
                raise TimelineError(f"entry {i}: temporal_index {e.temporal_index} out of order")
        kept = [e.orig_index for e in self.entries if e.origin == "kept"]
        if any(b <= a for a, b in zip(kept, kept[1:])):
            raise TimelineError("kept entries must preserve source order")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def video_frame_count(self) -> int:
        return frames_for_num_latents(len(self.entries))

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "fps": self.fps,
            "tiling_overlap_frames": self.tiling_overlap_frames,
            "entries": [e.to_dict() for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LatentTimelinePlan":
        try:
            entries = tuple(
                PlanEntry(
                    origin=e["origin"],
                    orig_index=e["orig_index"],
                    noise_level=float(e["noise_level"]),
                    mask_mode=e["mask_mode"],
                    temporal_index=int(e["temporal_index"]),
                )
                for e in d["entries"]
            )
            return cls(
                entries=entries,
                fps=float(d["fps"]),
                tiling_overlap_frames=int(d.get("tiling_overlap_frames", 16)),
            )
        except (KeyError, TypeError) as exc:
            raise TimelineError(f"malformed plan payload: {exc}") from None


def identity_plan(num_latents: int, fps: float) -> LatentTimelinePlan:
    """Plan that keeps every source latent untouched."""
    entries = tuple(
        PlanEntry("kept", i, 0.0, "none", i) for i in range(num_latents)
    )
    return LatentTimelinePlan(entries=entries, fps=fps)


def _insertion_boundary(at_s: float, fps: float) -> int:
    """Nearest latent boundary to a timestamp (0 = before everything)."""
    f = round(at_s * fps)
    if f <= 0:
        return 0
    return round((f - 1) / TEMPORAL_GROUP) + 1


def _removal_window(at_s: float, duration_s: float, fps: float) -> tuple[int, int]:
    f0 = round(at_s * fps)
    df = round(-duration_s * fps)
    start = video_to_latent(f0 + TEMPORAL_GROUP // 2)
    count = max(1, round(df / TEMPORAL_GROUP))
    return start, count


def apply_edit_ops(
    num_latents: int,
    ops: list[EditOp],
    fps: float,
    t_adjacent: float = 0.7,
    retime_granularity_s: float = 0.3,
) -> LatentTimelinePlan:
    """Fold edit operations into a latent timeline plan.

    All operation timestamps refer to the source video. Retimes are first
    expanded into micro additions/removals. Removals delete whole latent
    entries (round-to-nearest at the 8-frame grid, at least one) and flag
    the surviving neighbor on each side with a partial re-noise at
    ``t_adjacent`` over the full frame, so the seam regenerates. Additions
    insert fully-noised full-mask entries at the nearest latent boundary,
    round(duration * fps / 8) of them, at least one. Region re-renders
    mark covered kept entries for masked regeneration.

    Raises ``TimelineError`` for out-of-range ops and overlapping removals.
    """
    duration_s = num_latents * TEMPORAL_GROUP / fps
    ops = expand_retimes(list(ops), granularity_s=retime_granularity_s)
    for op in ops:
        end = op.at_s + max(0.0, op.duration_s) if op.kind != "removal" else op.at_s - op.duration_s
        if op.at_s < -1e-9 or end > duration_s + 1e-9:
            raise TimelineError(
                f"{op.kind} at {op.at_s:.3f}s (+{op.duration_s:.3f}s) falls outside "
                f"the {duration_s:.3f}s timeline"
            )
        if op.kind == "addition" and op.duration_s <= 0:
            raise TimelineError(f"addition at {op.at_s:.3f}s needs positive duration")
        if op.kind == "removal" and op.duration_s >= 0:
            raise TimelineError(f"removal at {op.at_s:.3f}s needs negative duration")

    removed: dict[int, float] = {}  # orig latent -> op timestamp
    inserts: dict[int, list[int]] = {}  # boundary -> insert runs (latent counts)
    rerenders: list[tuple[int, int, str]] = []

    for op in sorted(ops, key=lambda o: o.at_s):
        if op.kind == "removal":
            start, count = _removal_window(op.at_s, op.duration_s, fps)
            if start >= num_latents:
                raise TimelineError(f"removal at {op.at_s:.3f}s starts past the last latent")
            count = min(count, num_latents - start)
            for n in range(start, start + count):
                if n in removed:
                    raise TimelineError(
                        f"removals at {removed[n]:.3f}s and {op.at_s:.3f}s both cover latent {n}"
                    )
                removed[n] = op.at_s
        elif op.kind == "addition":
            boundary = min(_insertion_boundary(op.at_s, fps), num_latents)
            count = max(1, round(op.duration_s * fps / TEMPORAL_GROUP))
            inserts.setdefault(boundary, []).append(count)
        elif op.kind == "rerender":
            f0, f1 = round(op.at_s * fps), round((op.at_s + op.duration_s) * fps)
            lo = video_to_latent(max(0, f0))
            hi = video_to_latent(max(0, max(f0, f1 - 1)))
            rerenders.append((lo, hi, op.region or "face"))
        else:
            raise TimelineError(f"cannot apply op kind {op.kind!r}")

    # neighbors of each removed run, by original index
    adjacent: set[int] = set()
    for n in removed:
        lo = n - 1
        while lo in removed:
            lo -= 1
        if lo >= 0:
            adjacent.add(lo)
        hi = n + 1
        while hi in removed:
            hi += 1
        if hi < num_latents:
            adjacent.add(hi)

    rerender_mode: dict[int, str] = {}
    for lo, hi, mode in rerenders:
        for n in range(lo, min(hi, num_latents - 1) + 1):
            rerender_mode[n] = mode

    entries: list[PlanEntry] = []

    def emit(origin, orig, noise, mask):
        entries.append(PlanEntry(origin, orig, noise, mask, len(entries)))

    for boundary in range(num_latents + 1):
        for count in inserts.get(boundary, ()):  # additions first at each seam
            for _ in range(count):
                emit("inserted", None, 1.0, "full")
        if boundary == num_latents:
            break
        if boundary in removed:
            continue
        if boundary in adjacent:
            emit("kept", boundary, t_adjacent, "full")
        elif boundary in rerender_mode:
            emit("kept", boundary, 1.0, rerender_mode[boundary])
        else:
            emit("kept", boundary, 0.0, "none")

    if not entries:
        raise TimelineError("edit removes the whole timeline")
    return LatentTimelinePlan(entries=tuple(entries), fps=fps)


def with_render_mode(plan: LatentTimelinePlan, mode: str) -> LatentTimelinePlan:
    """Re-target untouched kept entries for masked regeneration.

    mode 'none' returns the plan unchanged; any other region mode marks
    every kept entry still at noise 0 for full-noise regeneration inside
    that region, which is how a lip re-sync over an existing timeline is
    expressed.
    """
    if mode == "none":
        return plan
    if mode not in MASK_MODES:
        raise TimelineError(f"unknown render mode {mode!r}")
    entries = tuple(
        replace(e, noise_level=1.0, mask_mode=mode)
        if e.origin == "kept" and e.noise_level == 0.0
        else e
        for e in plan.entries
    )
    return LatentTimelinePlan(entries, plan.fps, plan.tiling_overlap_frames)
