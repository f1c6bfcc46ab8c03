"""Audio-conditioned diffusion transformer over latent-cell tokens.

Every latent cell (frame, row, column) is one token. Reference tokens —
lower-face cells from identity frames, whole frames pinned near a block,
and one learned register token — join the video tokens along the
sequence axis and are dropped again at the output head. Rotary phases
encode integer (t, y, x) positions with a per-axis channel split, so
reference tokens live at sentinel time indices that video positions can
never occupy.

Each block runs self-attention, then an audio cross-attention that only
writes masked video tokens (its output projection starts at zero, so a
fresh model ignores audio entirely), then a feed-forward; self-attention
and feed-forward are modulated by zero-initialized shift/scale/gate
projections of a per-token timestep embedding, which makes the freshly
initialized network an identity map with a zero velocity head. Low-rank
adapter pairs ride on the base projections and contribute exactly
nothing until their second factor moves off zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .containers import load_bundle, save_bundle

CELL_CHANNELS = 16
GRID = 8
MODEL_DIM = 128
NUM_BLOCKS = 4
NUM_HEADS = 4
HEAD_DIM = MODEL_DIM // NUM_HEADS
FFN_DIM = 4 * MODEL_DIM
AUDIO_DIM = 64
TIME_EMBED_DIM = 64
ROPE_BASE = 10000.0
REGISTER_TIME_INDEX = -1000
MAX_FACE_REFS = 6
DEFAULT_ADAPTER_RANK = 8


class DenoiserError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    blocks: int = NUM_BLOCKS
    dim: int = MODEL_DIM
    heads: int = NUM_HEADS
    ffn_dim: int = FFN_DIM
    audio_dim: int = AUDIO_DIM
    adapter_rank: int = DEFAULT_ADAPTER_RANK
    window: int = 9
    feature_banks: int = 2
    feature_channels: int = 16

    def to_dict(self) -> dict:
        return {
            "blocks": self.blocks,
            "dim": self.dim,
            "heads": self.heads,
            "ffn_dim": self.ffn_dim,
            "audio_dim": self.audio_dim,
            "adapter_rank": self.adapter_rank,
            "window": self.window,
            "feature_banks": self.feature_banks,
            "feature_channels": self.feature_channels,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def window_channels(self) -> int:
        return self.feature_banks * self.feature_channels


ADAPTED_SUFFIXES = ("attn/wq", "attn/wk", "attn/wv", "attn/wo", "ffn/w1", "ffn/w2", "mod/w")


def _adapted_base_names(config: ModelConfig) -> list[str]:
    names = ["embed/w", "head/w"]
    for i in range(config.blocks):
        names.extend(f"block{i}/{sfx}" for sfx in ADAPTED_SUFFIXES)
    return names


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh parameters; the forward map starts as the zero velocity field."""

    def dense(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)

    D, A = config.dim, config.audio_dim
    p: dict[str, np.ndarray] = {
        "embed/w": dense(CELL_CHANNELS, D),
        "embed/b": np.zeros(D),
        "register": rng.standard_normal(D) * 0.02,
        "tcond/w": dense(TIME_EMBED_DIM, D),
        "tcond/b": np.zeros(D),
        "audio/slot_weights": np.ones(8),
        "audio/window_pos": np.zeros((config.window, config.feature_banks, config.feature_channels)),
        "audio/proj/w": dense(config.window_channels, A),
        "audio/proj/b": np.zeros(A),
        "head/mod/w": np.zeros((D, 2 * D)),
        "head/mod/b": np.zeros(2 * D),
        "head/w": np.zeros((D, CELL_CHANNELS)),
        "head/b": np.zeros(CELL_CHANNELS),
    }
    for i in range(config.blocks):
        b = f"block{i}"
        p[f"{b}/mod/w"] = np.zeros((D, 6 * D))
        p[f"{b}/mod/b"] = np.zeros(6 * D)
        p[f"{b}/attn/wq"] = dense(D, D)
        p[f"{b}/attn/wk"] = dense(D, D)
        p[f"{b}/attn/wv"] = dense(D, D)
        p[f"{b}/attn/wo"] = dense(D, D)
        p[f"{b}/ffn/w1"] = dense(D, config.ffn_dim)
        p[f"{b}/ffn/b1"] = np.zeros(config.ffn_dim)
        p[f"{b}/ffn/w2"] = dense(config.ffn_dim, D)
        p[f"{b}/ffn/b2"] = np.zeros(D)
        p[f"{b}/audio/wq"] = dense(D, A)
        p[f"{b}/audio/wk"] = dense(A, A)
        p[f"{b}/audio/wv"] = dense(A, A)
        p[f"{b}/audio/wo"] = np.zeros((A, D))
        p[f"{b}/audio/bo"] = np.zeros(D)
    r = config.adapter_rank
    for name in _adapted_base_names(config):
        fan_in, fan_out = p[name].shape
        p[f"adapter/{name}/a"] = rng.standard_normal((fan_in, r)) / np.sqrt(fan_in)
        p[f"adapter/{name}/b"] = np.zeros((r, fan_out))
    return {k: ad.tensor(v, name=k) for k, v in p.items()}


def param_groups(params: dict[str, Tensor]) -> dict[str, list[str]]:
    """Stage ownership: audio-path weights, adapter pairs, frozen-able base."""
    audio, adapter, base = [], [], []
    for name in params:
        if name.startswith("adapter/"):
            adapter.append(name)
        elif name.startswith("audio/") or "/audio/" in name:
            audio.append(name)
        else:
            base.append(name)
    return {"audio": sorted(audio), "adapter": sorted(adapter), "base": sorted(base)}


# -- token assembly --------------------------------------------------------


@dataclass
class TokenSequence:
    values: np.ndarray  # [S, CELL_CHANNELS]
    positions: np.ndarray  # [S, 3] int (t, y, x); t may be a negative sentinel
    token_timesteps: np.ndarray  # [S]
    roles: list[str]  # register|face_ref|frame_ref|video
    mask: np.ndarray  # [S] region mask; zero on non-video tokens
    audio_slot: np.ndarray  # [S] latent row for audio keys; -1 on non-video
    video_start: int

    @property
    def num_tokens(self) -> int:
        return self.values.shape[0]

    @property
    def num_video(self) -> int:
        return self.num_tokens - self.video_start


def assemble_tokens(
    x_t: np.ndarray,
    temporal_indices: np.ndarray,
    token_timesteps: np.ndarray,
    region_mask: np.ndarray,
    face_refs: list[tuple[np.ndarray, np.ndarray]] = (),
    frame_refs: list[tuple[np.ndarray, int]] = (),
    include_register: bool = False,
) -> TokenSequence:
    """Flatten a block into one token sequence: references then video.

    ``face_refs`` are (latent [8,8,16], cell mask [8,8]) pairs whose selected
    cells get sentinel time indices -1, -2, ... in order. ``frame_refs`` are
    (latent, t_ref) whole frames pinned at precomputed time indices; a t_ref
    that collides with a video frame's temporal index is rejected. The model
    pipeline sets ``include_register`` to prepend its unconditional token.

    ``token_timesteps`` is either one value per frame ([N]) or one per cell
    ([N, 8, 8]); the per-cell form lets clean cells inside a partially noised
    frame carry timestep zero.
    """
    N = x_t.shape[0]
    if x_t.shape != (N, GRID, GRID, CELL_CHANNELS):
        raise DenoiserError(f"bad latent block shape {x_t.shape}")
    token_timesteps = np.asarray(token_timesteps, dtype=float)
    if token_timesteps.shape == (N,):
        token_timesteps = np.broadcast_to(
            token_timesteps[:, None, None], (N, GRID, GRID)
        )
    if len(temporal_indices) != N or token_timesteps.shape != (N, GRID, GRID):
        raise DenoiserError("per-frame arrays disagree with the latent count")
    if region_mask.shape != (N, GRID, GRID):
        raise DenoiserError(f"bad region mask shape {region_mask.shape}")
    if len(face_refs) > MAX_FACE_REFS:
        raise DenoiserError(f"{len(face_refs)} face references exceed the cap {MAX_FACE_REFS}")
    video_t = {int(t) for t in temporal_indices}

    ys, xs = np.meshgrid(np.arange(GRID), np.arange(GRID), indexing="ij")
    vals, pos, tts, roles = [], [], [], []
    if include_register:
        vals.append(np.zeros((1, CELL_CHANNELS)))
        pos.append(np.array([[REGISTER_TIME_INDEX, 0, 0]]))
        tts.append(np.zeros(1))
        roles.append("register")

    for j, (latent, cells) in enumerate(face_refs):
        if latent.shape != (GRID, GRID, CELL_CHANNELS) or cells.shape != (GRID, GRID):
            raise DenoiserError(f"face reference {j} has bad shapes")
        sel = cells.astype(bool)
        vals.append(latent[sel])
        k = int(sel.sum())
        pos.append(np.stack([np.full(k, -(j + 1)), ys[sel], xs[sel]], axis=1))
        tts.append(np.zeros(k))
        roles.extend(["face_ref"] * k)

    seen_ref_t = set()
    for latent, t_ref in frame_refs:
        if latent.shape != (GRID, GRID, CELL_CHANNELS):
            raise DenoiserError("frame reference has bad latent shape")
        t_ref = int(t_ref)
        if t_ref in video_t:
            raise DenoiserError(
                f"frame reference time index {t_ref} collides with a video frame"
            )
        if t_ref in seen_ref_t:
            raise DenoiserError(f"duplicate frame reference time index {t_ref}")
        seen_ref_t.add(t_ref)
        vals.append(latent.reshape(-1, CELL_CHANNELS))
        pos.append(
            np.stack([np.full(GRID * GRID, t_ref), ys.ravel(), xs.ravel()], axis=1)
        )
        tts.append(np.zeros(GRID * GRID))
        roles.extend(["frame_ref"] * (GRID * GRID))

    video_start = sum(v.shape[0] for v in vals)
    vals.append(x_t.reshape(-1, CELL_CHANNELS))
    frame_ids = np.repeat(np.arange(N), GRID * GRID)
    pos.append(
        np.stack(
            [
                np.repeat(np.asarray(temporal_indices, dtype=np.int64), GRID * GRID),
                np.tile(ys.ravel(), N),
                np.tile(xs.ravel(), N),
            ],
            axis=1,
        )
    )
    tts.append(token_timesteps.reshape(-1))
    roles.extend(["video"] * (N * GRID * GRID))

    S = video_start + N * GRID * GRID
    mask = np.zeros(S)
    mask[video_start:] = region_mask.reshape(-1)
    audio_slot = np.full(S, -1, dtype=np.int64)
    audio_slot[video_start:] = frame_ids
    return TokenSequence(
        values=np.concatenate(vals, axis=0),
        positions=np.concatenate(pos, axis=0).astype(np.int64),
        token_timesteps=np.concatenate(tts, axis=0),
        roles=roles,
        mask=mask,
        audio_slot=audio_slot,
        video_start=video_start,
    )


# -- positional and timestep encodings -------------------------------------


def rope_split(head_dim: int) -> tuple[int, int, int]:
    """Channels per (t, y, x) axis inside one head: half time, quarter each space."""
    if head_dim % 4:
        raise DenoiserError(f"head dim {head_dim} must be divisible by 4")
    return (head_dim // 2, head_dim // 4, head_dim // 4)


def rope_phases(positions: np.ndarray, head_dim: int = HEAD_DIM) -> tuple[np.ndarray, np.ndarray]:
    """Per-token rotation angles, [S, head_dim/2] cosines and sines.

    Channel pairs split across the three axes; angles are position times a
    geometric frequency ladder, so integer positions — negative sentinels
    included — give well-defined phases and attention logits that depend
    only on position differences.
    """
    parts = []
    for axis, width in enumerate(rope_split(head_dim)):
        n_pairs = width // 2
        freqs = ROPE_BASE ** (-np.arange(n_pairs) / n_pairs)
        parts.append(positions[:, axis:axis + 1].astype(float) * freqs[None, :])
    angles = np.concatenate(parts, axis=1)  # [S, head_dim/2]
    return np.cos(angles), np.sin(angles)


def timestep_embedding(t_values: np.ndarray, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t_values, dtype=float)[:, None] * freqs[None, :] * 1000.0
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


# -- audio projection ------------------------------------------------------


def project_audio(
    params: dict[str, Tensor],
    config: ModelConfig,
    windows: np.ndarray,
    groups: list[list[int]],
) -> Tensor:
    """Per-latent audio tokens [N, window, audio_dim] from per-frame windows.

    Adds the learned window positional field, pools each latent's covered
    frames slot-wise with learned weights normalized over the frames
    present (all-ones start = plain mean; a single frame passes through),
    then projects each slot's flattened channels through a shared linear.
    """
    W, B, C = config.window, config.feature_banks, config.feature_channels
    if windows.ndim != 4 or windows.shape[1:] != (W, B, C):
        raise DenoiserError(f"expected windows [F, {W}, {B}, {C}], got {windows.shape}")
    F = windows.shape[0]
    pos = params["audio/window_pos"].reshape(1, W, B, C)
    shifted = ad.add(ad.tensor(windows), pos)  # [F, W, B, C]
    slot_w = params["audio/slot_weights"]
    pooled = []
    for n, rows in enumerate(groups):
        if not rows:
            raise DenoiserError(f"latent {n} has no covered frames")
        if min(rows) < 0 or max(rows) >= F:
            raise DenoiserError(f"latent {n} references windows outside [0, {F})")
        if len(rows) > 8:
            raise DenoiserError(f"latent {n} covers {len(rows)} frames; the group cap is 8")
        w = ad.narrow(slot_w, 0, 0, len(rows))
        w = ad.div(w, w.sum())
        stack = ad.concat([ad.narrow(shifted, 0, r, 1) for r in rows], axis=0)
        weighted = ad.mul(stack, w.reshape(len(rows), 1, 1, 1))
        pooled.append(weighted.sum(axis=0).reshape(1, W, B * C))
    flat = ad.concat(pooled, axis=0)  # [N, W, B*C]
    return ad.add(ad.matmul(flat, params["audio/proj/w"]), params["audio/proj/b"])


# -- forward ---------------------------------------------------------------


def _dense(x: Tensor, params, name: str, use_adapters: bool) -> Tensor:
    y = ad.matmul(x, params[name])
    a_key = f"adapter/{name}/a"
    if use_adapters and a_key in params:
        y = ad.add(y, ad.matmul(ad.matmul(x, params[a_key]), params[f"adapter/{name}/b"]))
    return y


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return ad.add(ad.mul(x, ad.add(scale, 1.0)), shift)


def embed_tokens(params: dict[str, Tensor], seq: TokenSequence, use_adapters: bool = True) -> Tensor:
    h = ad.add(_dense(ad.tensor(seq.values), params, "embed/w", use_adapters), params["embed/b"])
    reg = (np.array(seq.roles) == "register").astype(float).reshape(-1, 1)
    return ad.add(h, ad.mul(params["register"].reshape(1, -1), ad.tensor(reg)))


def _condition(params, seq: TokenSequence) -> Tensor:
    emb = timestep_embedding(seq.token_timesteps)
    return ad.silu(ad.add(ad.matmul(ad.tensor(emb), params["tcond/w"]), params["tcond/b"]))


def run_blocks(
    params: dict[str, Tensor],
    config: ModelConfig,
    h: Tensor,
    seq: TokenSequence,
    audio_tokens: Tensor | None,
    use_adapters: bool = True,
) -> Tensor:
    """All transformer blocks; returns the final hidden states [S, D]."""
    S = seq.num_tokens
    cond = _condition(params, seq)
    cos, sin = rope_phases(seq.positions, config.head_dim)
    D, H, hd = config.dim, config.heads, config.head_dim
    V = seq.num_video
    n_frames = V // (GRID * GRID)
    mask_col = seq.mask[seq.video_start:].reshape(-1, 1)

    for i in range(config.blocks):
        b = f"block{i}"
        try:
            mod = ad.add(_dense(cond, params, f"{b}/mod/w", use_adapters), params[f"{b}/mod/b"])
            chunks = [ad.narrow(mod, 1, j * D, D) for j in range(6)]
            sh_sa, sc_sa, gt_sa, sh_ff, sc_ff, gt_ff = chunks

            x = _modulate(ad.layernorm(h), sh_sa, sc_sa)
            q = _split_heads(_dense(x, params, f"{b}/attn/wq", use_adapters), S, H, hd)
            k = _split_heads(_dense(x, params, f"{b}/attn/wk", use_adapters), S, H, hd)
            v = _split_heads(_dense(x, params, f"{b}/attn/wv", use_adapters), S, H, hd)
            q = ad.apply_rotation(q, cos, sin)
            k = ad.apply_rotation(k, cos, sin)
            att = ad.attention(q, k, v)  # [H, S, hd]
            merged = att.swapaxes(0, 1).reshape(S, D)
            h = ad.add(h, ad.mul(_dense(merged, params, f"{b}/attn/wo", use_adapters), gt_sa))

            if audio_tokens is not None:
                vid = ad.narrow(h, 0, seq.video_start, V)
                xq = ad.matmul(ad.layernorm(vid), params[f"{b}/audio/wq"])
                qa = xq.reshape(n_frames, GRID * GRID, config.audio_dim)
                ka = ad.matmul(audio_tokens, params[f"{b}/audio/wk"])
                va = ad.matmul(audio_tokens, params[f"{b}/audio/wv"])
                out = ad.attention(qa, ka, va).reshape(V, config.audio_dim)
                out = ad.add(ad.matmul(out, params[f"{b}/audio/wo"]), params[f"{b}/audio/bo"])
                gated = ad.mul(out, ad.tensor(mask_col))
                head_part = ad.narrow(h, 0, 0, seq.video_start)
                h = ad.concat([head_part, ad.add(ad.narrow(h, 0, seq.video_start, V), gated)], axis=0)

            x = _modulate(ad.layernorm(h), sh_ff, sc_ff)
            x = ad.silu(ad.add(_dense(x, params, f"{b}/ffn/w1", use_adapters), params[f"{b}/ffn/b1"]))
            x = ad.add(_dense(x, params, f"{b}/ffn/w2", use_adapters), params[f"{b}/ffn/b2"])
            h = ad.add(h, ad.mul(x, gt_ff))
        except FloatingPointError as exc:
            raise DenoiserError(f"non-finite activations in block {i}") from exc
    return h


def readout(params: dict[str, Tensor], seq: TokenSequence, h: Tensor, use_adapters: bool = True) -> Tensor:
    """Velocity for the video tokens, [num_video, CELL_CHANNELS]."""
    vid = ad.narrow(h, 0, seq.video_start, seq.num_video)
    cond = _condition(params, seq)
    cond_vid = ad.narrow(cond, 0, seq.video_start, seq.num_video)
    mod = ad.add(ad.matmul(cond_vid, params["head/mod/w"]), params["head/mod/b"])
    D = h.shape[1]
    shift, scale = ad.narrow(mod, 1, 0, D), ad.narrow(mod, 1, D, D)
    x = _modulate(ad.layernorm(vid), shift, scale)
    return ad.add(_dense(x, params, "head/w", use_adapters), params["head/b"])


def forward(
    params: dict[str, Tensor],
    config: ModelConfig,
    seq: TokenSequence,
    audio_tokens: Tensor | None,
    use_adapters: bool = True,
) -> Tensor:
    h = embed_tokens(params, seq, use_adapters)
    h = run_blocks(params, config, h, seq, audio_tokens, use_adapters)
    vel = readout(params, seq, h, use_adapters)
    if not np.all(np.isfinite(vel.data)):
        raise DenoiserError("non-finite velocity output")
    return vel


def _split_heads(x: Tensor, S: int, H: int, hd: int) -> Tensor:
    return x.reshape(S, H, hd).swapaxes(0, 1)


# -- persistence -----------------------------------------------------------


def save_model(
    path, config: ModelConfig, params: dict[str, Tensor], meta: dict | None = None
) -> None:
    header = {"arch": config.to_dict(), **(meta or {})}
    save_bundle(path, header, {f"param/{k}": v.data for k, v in params.items()})


def load_model(path) -> tuple[ModelConfig, dict[str, Tensor], dict]:
    meta, arrays = load_bundle(path)
    if "arch" not in meta:
        raise DenoiserError("bundle has no architecture header")
    config = ModelConfig.from_dict(meta["arch"])
    params = {}
    for name, arr in arrays.items():
        if name.startswith("param/"):
            params[name[len("param/"):]] = ad.tensor(arr, name=name[len("param/"):])
    extra = {k: v for k, v in meta.items() if k != "arch"}
    return config, params, {"arch": meta["arch"], **extra}
