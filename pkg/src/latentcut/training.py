"""Masked flow-matching training with staged parameter unfreezing.

A sample noises the latent clip only inside its region mask; the loss
compares predicted and true velocity on those cells alone, normalized by
mask mass, optionally minus a small contrastive term that pushes the
prediction away from the velocity target of a mismatched clip. Timesteps
come from a logit-normal family warped toward high noise, calibrated so
ninety percent of the mass lands in [0.60, 0.98]. Noise is paired per
sample by nearest of k candidates, which shortens transport paths
without changing the marginal.

Three stages share one loop: stage 0 pretrains the base network with
audio always dropped, stage 1 trains only the audio pathway on a frozen
base, stage 2 trains the low-rank adapters together with the audio
pathway at ten times the stage-1 learning rate. Conditioning dropout
(audio, first-frame, clip conditioning, identity references) is drawn
per sample at per-stage rates. Checkpoints carry parameters, optimizer
moments, and the generator state, so a resumed run is bit-identical to
an uninterrupted one.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .audio import DEFAULT_FEATURE_RATE, windows_for_frames
from .containers import load_bundle, save_bundle
from .denoiser import (
    CELL_CHANNELS,
    MAX_FACE_REFS,
    DenoiserError,
    ModelConfig,
    assemble_tokens,
    forward,
    init_params,
    load_model,
    param_groups,
    project_audio,
)
from .timeline import latent_to_range, num_latents_for_frames
from .world import boxes_for_frames, build_mask, encode, gen_audio, gen_scene, render_clip

T_SHIFT = 2.05
TAIL_LOW = 0.60
TAIL_HIGH = 0.98
TAIL_MASS = 0.90

STAGE_RATES = {
    # stage 0 leans on generation-heavy draws: the base must learn to
    # synthesize whole subjects, not lean on kept context that inference
    # blocks far from an edit will never have
    0: {"p_audio": 0.0, "p_ff": 0.9, "p_v2v": 0.3, "p_id": 0.0},
    1: {"p_audio": 1.0, "p_ff": 0.9, "p_v2v": 0.9, "p_id": 0.0},
    2: {"p_audio": 0.9, "p_ff": 0.9, "p_v2v": 0.9, "p_id": 0.5},
}
STAGE_LR = {0: 3e-4, 1: 1e-3, 2: 1e-2}  # stage 2 at 10x stage 1


class TrainingError(ValueError):
    pass


# -- timestep sampling -----------------------------------------------------


def _inv_norm_cdf(p: float) -> float:
    # bisection on erf; a dozen digits is far more than calibration needs
    lo, hi = -12.0, 12.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 0.5 * (1.0 + math.erf(mid / math.sqrt(2.0))) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _calibrate_sampler(mu: float) -> tuple[float, float]:
    """Logit-space location/scale putting equal 5% tails outside the band.

    The warp t = mu*s / (1 + (mu-1)*s) is monotone, so the band maps to a
    logit interval; a normal with matching central quantiles hits the
    target mass exactly.
    """

    def logit_of_t(t: float) -> float:
        s = t / (mu - (mu - 1.0) * t)
        return math.log(s / (1.0 - s))

    lo, hi = logit_of_t(TAIL_LOW), logit_of_t(TAIL_HIGH)
    z = _inv_norm_cdf(0.5 + TAIL_MASS / 2.0)
    return (lo + hi) / 2.0, (hi - lo) / (2.0 * z)


_M0, _SIGMA0 = _calibrate_sampler(T_SHIFT)


def sample_timesteps(rng: np.random.Generator, n: int, mu: float = T_SHIFT) -> np.ndarray:
    """n draws in (0,1), biased high: 90% of the mass in [0.60, 0.98]."""
    if mu == T_SHIFT:
        m0, s0 = _M0, _SIGMA0
    else:
        m0, s0 = _calibrate_sampler(mu)
    z = rng.standard_normal(n)
    s = 1.0 / (1.0 + np.exp(-(z * s0 + m0)))
    return mu * s / (1.0 + (mu - 1.0) * s)


def sample_timestep(rng: np.random.Generator, mu: float = T_SHIFT) -> float:
    return float(sample_timesteps(rng, 1, mu)[0])


# -- noising, pairing, loss ------------------------------------------------


def _mask_cells(mask: np.ndarray, like: np.ndarray) -> np.ndarray:
    if mask.shape == like.shape[:-1]:
        return mask[..., None]
    if mask.shape == like.shape:
        return mask
    raise TrainingError(f"mask shape {mask.shape} does not fit latents {like.shape}")


def make_noised_input(
    x0: np.ndarray, eps: np.ndarray, t: float, mask: np.ndarray
) -> np.ndarray:
    """Linear interpolation toward noise, applied only where the mask is set."""
    if x0.shape != eps.shape:
        raise TrainingError(f"latents {x0.shape} and noise {eps.shape} differ")
    if not 0.0 <= t <= 1.0:
        raise TrainingError(f"timestep {t} outside [0, 1]")
    m = _mask_cells(mask, x0)
    return m * ((1.0 - t) * x0 + t * eps) + (1.0 - m) * x0


def immiscible_assign(x0: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Per sample, the candidate noise closest to the clean latents."""
    B = x0.shape[0]
    if candidates.ndim != x0.ndim + 1 or candidates.shape[0] != B or candidates.shape[2:] != x0.shape[1:]:
        raise TrainingError(
            f"candidates {candidates.shape} do not match batch {x0.shape}"
        )
    d2 = ((candidates - x0[:, None]) ** 2).reshape(B, candidates.shape[1], -1).sum(axis=2)
    return candidates[np.arange(B), d2.argmin(axis=1)]


def flow_target(x0: np.ndarray, eps: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked velocity target: noise minus clean, zeroed off-mask."""
    return _mask_cells(mask, x0) * (eps - x0)


def flow_matching_loss(
    v: Tensor,
    x0: np.ndarray,
    eps: np.ndarray,
    mask: np.ndarray,
    negatives: np.ndarray | None = None,
    contrast_weight: float = 0.05,
) -> Tensor:
    """Masked squared error against the velocity target, over mask mass.

    ``negatives``, when given, is the masked velocity target of a
    mismatched sample; its (identically masked) squared error is
    subtracted at ``contrast_weight``, so the prediction is pulled toward
    its own target and pushed off the impostor's.
    """
    mass = float(mask.sum())
    if mass == 0.0:
        raise TrainingError("mask has no active cells, nothing to learn from")
    target = flow_target(x0, eps, mask).reshape(-1, CELL_CHANNELS)
    m_col = mask.reshape(-1, 1)
    if v.shape != target.shape:
        v = ad.reshape(v, target.shape)
    diff = ad.mul(ad.sub(v, target), m_col)
    loss = ad.div(ad.tsum(ad.mul(diff, diff)), mass)
    if negatives is not None:
        neg = np.asarray(negatives).reshape(-1, CELL_CHANNELS)
        dneg = ad.mul(ad.sub(v, neg), m_col)
        push = ad.div(ad.tsum(ad.mul(dneg, dneg)), mass)
        loss = ad.sub(loss, ad.mul(push, contrast_weight))
    return loss


# -- configuration and conditioning dropout --------------------------------


@dataclass
class TrainConfig:
    """One stage's knobs; unset rates and learning rate fill in per stage."""

    stage: int = 1
    steps: int = 500
    lr: float | None = None
    p_audio: float | None = None
    p_ff: float | None = None
    p_v2v: float | None = None
    p_id: float | None = None
    t_shift: float = T_SHIFT
    k_immiscible: int = 4
    contrast_weight: float = 0.05
    batch: int = 2
    seed: int = 0
    checkpoint_every: int = 200

    def __post_init__(self):
        if self.stage not in STAGE_RATES:
            raise TrainingError(f"stage must be 0, 1, or 2, got {self.stage}")
        for name, value in STAGE_RATES[self.stage].items():
            if getattr(self, name) is None:
                setattr(self, name, value)
        # the audio pathway is the whole point of stage 1; never drop it there
        if self.stage == 1:
            self.p_audio = 1.0
        if self.lr is None:
            self.lr = STAGE_LR[self.stage]
        for name in ("p_audio", "p_ff", "p_v2v", "p_id"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise TrainingError(f"{name}={p} is not a probability")
        if self.steps < 1 or self.batch < 1 or self.k_immiscible < 1:
            raise TrainingError("steps, batch, and k_immiscible must be positive")
        if self.t_shift < 1.0:
            raise TrainingError(f"timestep shift {self.t_shift} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def dropout_conditions(rng: np.random.Generator, config: TrainConfig) -> dict[str, bool]:
    """Keep/drop flags for one sample; four draws in a fixed order."""
    return {
        "audio": bool(rng.uniform() < config.p_audio),
        "first_frame": bool(rng.uniform() < config.p_ff),
        "v2v": bool(rng.uniform() < config.p_v2v),
        "identity": bool(rng.uniform() < config.p_id),
    }


# -- optimizer -------------------------------------------------------------


class AdamW:
    """Decoupled weight decay Adam over a fixed set of leaf tensors."""

    def __init__(
        self,
        params: dict[str, Tensor],
        names: list[str],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = params
        self.names = sorted(names)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for n in self.names:
            p = self.params[n]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[n] = b1 * self.m[n] + (1.0 - b1) * g
            self.v[n] = b2 * self.v[n] + (1.0 - b2) * g * g
            update = (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            p.assign(p.data * (1.0 - self.lr * self.weight_decay) - self.lr * update)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# -- corpus ----------------------------------------------------------------


@dataclass
class TrainClip:
    """One precomputed clip: latents, lip mask, and per-frame audio windows."""

    scene_seed: int
    audio_seed: int
    fps: float
    frames: int
    x0: np.ndarray  # [N, 8, 8, 16]
    lip_mask: np.ndarray  # [N, 8, 8]
    windows: np.ndarray  # [F, window, banks, channels]
    groups: list[list[int]] = field(repr=False)

    @property
    def n_latents(self) -> int:
        return self.x0.shape[0]


def build_clip(scene_seed: int, audio_seed: int, frames: int, fps: float) -> TrainClip:
    if frames % 8 != 1:
        raise TrainingError(f"clip length {frames} is not 1 mod 8")
    spec = gen_scene(scene_seed)
    track = gen_audio(audio_seed, duration_s=frames / fps + 0.25)
    video = render_clip(spec, track, fps, frames)
    x0 = encode(video)
    N = num_latents_for_frames(frames)
    lip = build_mask("lip", boxes_for_frames(spec, frames, fps), N)
    wins = windows_for_frames(track.features, frames, DEFAULT_FEATURE_RATE, fps)
    groups = []
    for n in range(N):
        s, e = latent_to_range(n)
        groups.append(list(range(s, min(e, frames))))
    return TrainClip(scene_seed, audio_seed, fps, frames, x0, lip, wins, groups)


def build_corpus(
    seed: int,
    sizes: tuple[tuple[int, int], ...] = ((140, 49), (60, 89)),
    fps: float = 24.0,
) -> list[TrainClip]:
    """Seeded clip corpus; ``sizes`` pairs are (count, frames per clip)."""
    total = sum(count for count, _ in sizes)
    ints = np.random.SeedSequence(seed).generate_state(2 * total)
    clips, i = [], 0
    for count, frames in sizes:
        for _ in range(count):
            clips.append(build_clip(int(ints[2 * i]), int(ints[2 * i + 1]), frames, fps))
            i += 1
    return clips


# -- sample assembly -------------------------------------------------------


@dataclass
class TrainSample:
    """One draw: noised latents plus everything the loss needs."""

    clip: TrainClip
    t: float
    eps: np.ndarray
    mask: np.ndarray
    use_audio: bool
    first_frame: bool
    v2v: bool
    face_refs: list[tuple[np.ndarray, np.ndarray]]

    @property
    def x0(self) -> np.ndarray:
        return self.clip.x0


def draw_sample(clip: TrainClip, rng: np.random.Generator, config: TrainConfig) -> TrainSample:
    """Dropout flags, timestep, identity references, and paired noise."""
    flags = dropout_conditions(rng, config)
    t = sample_timestep(rng, config.t_shift)
    # conditioning dropped means nothing is clean: noise the whole clip
    mask = clip.lip_mask.copy() if flags["v2v"] else np.ones_like(clip.lip_mask)
    if flags["first_frame"]:
        mask[0] = 0.0
    refs: list[tuple[np.ndarray, np.ndarray]] = []
    if flags["identity"]:
        count = int(rng.integers(1, MAX_FACE_REFS + 1))
        picks = np.sort(rng.choice(clip.n_latents, size=min(count, clip.n_latents), replace=False))
        refs = [(clip.x0[n], clip.lip_mask[n] > 0) for n in picks]
    cands = rng.standard_normal((1, config.k_immiscible) + clip.x0.shape)
    eps = immiscible_assign(clip.x0[None], cands)[0]
    return TrainSample(
        clip=clip,
        t=t,
        eps=eps,
        mask=mask,
        use_audio=flags["audio"],
        first_frame=flags["first_frame"],
        v2v=flags["v2v"],
        face_refs=refs,
    )


def sample_loss(
    params: dict[str, Tensor],
    model_config: ModelConfig,
    sample: TrainSample,
    negatives: np.ndarray | None = None,
    contrast_weight: float = 0.05,
    use_adapters: bool = False,
) -> Tensor:
    """Forward one sample and score its masked velocity prediction."""
    clip = sample.clip
    x_t = make_noised_input(sample.x0, sample.eps, sample.t, sample.mask)
    seq = assemble_tokens(
        x_t,
        np.arange(clip.n_latents),
        sample.t * sample.mask,
        sample.mask,
        face_refs=sample.face_refs,
        include_register=True,
    )
    audio = None
    if sample.use_audio:
        audio = project_audio(params, model_config, clip.windows, clip.groups)
    vel = forward(params, model_config, seq, audio, use_adapters=use_adapters)
    return flow_matching_loss(
        vel, sample.x0, sample.eps, sample.mask, negatives, contrast_weight
    )


# -- the loop --------------------------------------------------------------

_TRAINABLE = {0: ("base",), 1: ("audio",), 2: ("adapter", "audio")}


def _checkpoint(
    path: Path,
    model_config: ModelConfig,
    params: dict[str, Tensor],
    opt: AdamW,
    config: TrainConfig,
    step: int,
    rng: np.random.Generator,
) -> None:
    arrays = {f"param/{k}": v.data for k, v in params.items()}
    for n in opt.names:
        arrays[f"adam_m/{n}"] = opt.m[n]
        arrays[f"adam_v/{n}"] = opt.v[n]
    header = {
        "arch": model_config.to_dict(),
        "stage": config.stage,
        "step": step,
        "adam_t": opt.t,
        "train_config": config.to_dict(),
        "rng_state": rng.bit_generator.state,
    }
    save_bundle(path, header, arrays)


def run_training(
    config: TrainConfig,
    dataset: list[TrainClip],
    out_dir,
    model_config: ModelConfig | None = None,
    init_from=None,
    resume_from=None,
) -> dict:
    """Train one stage; returns the final checkpoint path and loss curve.

    Stage 0 initializes fresh parameters (or continues ``init_from``);
    stages 1 and 2 require ``init_from`` pointing at the previous stage's
    checkpoint. ``resume_from`` restarts a partially completed run of the
    same stage bit-identically.
    """
    if not dataset:
        raise TrainingError("empty dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stage = config.stage
    rng = np.random.default_rng(config.seed)
    start_step = 0
    opt_state = None

    if resume_from is not None:
        meta, arrays = load_bundle(resume_from)
        if meta.get("stage") != stage:
            raise TrainingError(
                f"resume checkpoint is stage {meta.get('stage')}, expected {stage}"
            )
        model_config = ModelConfig.from_dict(meta["arch"])
        params = {
            k[len("param/"):]: ad.tensor(v, name=k[len("param/"):])
            for k, v in arrays.items()
            if k.startswith("param/")
        }
        opt_state = (
            {k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")},
            {k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")},
            meta["adam_t"],
        )
        start_step = meta["step"]
        rng.bit_generator.state = meta["rng_state"]
    elif stage == 0:
        if init_from is not None:
            model_config, params, _ = load_model(init_from)
        else:
            model_config = model_config or ModelConfig()
            params = init_params(model_config, rng)
    else:
        if init_from is None:
            raise TrainingError(f"stage {stage} needs a stage-{stage - 1} checkpoint")
        model_config, params, meta = load_model(init_from)
        prior = meta.get("stage")
        if prior is not None and prior != stage - 1:
            raise TrainingError(
                f"stage {stage} must start from a stage-{stage - 1} checkpoint, got stage {prior}"
            )

    groups = param_groups(params)
    trainable = [n for g in _TRAINABLE[stage] for n in groups[g]]
    use_adapters = stage == 2
    opt = AdamW(params, trainable, lr=config.lr)
    if opt_state is not None:
        opt.m, opt.v, opt.t = opt_state
        if set(opt.m) != set(opt.names):
            raise TrainingError("resume checkpoint optimizer does not match the stage")
    contrast = config.contrast_weight if stage != 0 else 0.0

    by_len: dict[int, list[int]] = {}
    for i, clip in enumerate(dataset):
        by_len.setdefault(clip.n_latents, []).append(i)
    buckets = [np.array(v) for _, v in sorted(by_len.items())]
    probs = np.array([len(b) for b in buckets], dtype=float)
    probs /= probs.sum()

    losses: list[float] = []
    csv_path = out_dir / f"loss_stage{stage}.csv"
    new_curve = start_step == 0 or not csv_path.exists()
    with open(csv_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_curve:
            writer.writerow(["step", "stage", "loss"])
        for step in range(start_step, config.steps):
            zero_grads(params)
            bucket = buckets[int(rng.choice(len(buckets), p=probs))]
            picks = rng.choice(len(bucket), size=config.batch, replace=len(bucket) < config.batch)
            samples = [draw_sample(dataset[bucket[j]], rng, config) for j in picks]
            negs: list[np.ndarray | None] = [None] * config.batch
            if contrast > 0.0 and config.batch > 1:
                targets = [flow_target(s.x0, s.eps, s.mask) for s in samples]
                perm = rng.permutation(config.batch)
                negs = [targets[j] for j in perm]
            total: Tensor | None = None
            try:
                for s, neg in zip(samples, negs):
                    part = sample_loss(params, model_config, s, neg, contrast, use_adapters)
                    total = part if total is None else ad.add(total, part)
            except DenoiserError as exc:
                raise TrainingError(f"non-finite loss at step {step}") from exc
            total = ad.mul(total, 1.0 / config.batch)
            value = total.data.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at step {step}")
            ad.Graph(total).backward()
            opt.step()
            losses.append(value)
            writer.writerow([step, stage, f"{value:.8f}"])
            done = step + 1
            if config.checkpoint_every and (done % config.checkpoint_every == 0 or done == config.steps):
                _checkpoint(
                    out_dir / f"stage{stage}_step{done:06d}.eyck",
                    model_config, params, opt, config, done, rng,
                )

    final = out_dir / f"stage{stage}_final.eyck"
    _checkpoint(final, model_config, params, opt, config, config.steps, rng)
    return {"checkpoint": final, "losses": losses, "params": params, "model_config": model_config}
