"""Command-line pipeline: plan, train, render, eval, demo assets, serve.

Artifacts live in two container flavors — single tensors with tags, and
bundles of named arrays with a JSON header — plus plain JSON for plans,
scenes (a scene is just its generator seed), and transcripts. Every
subcommand validates its inputs before compute starts and routes all
randomness through an explicit seed, which reports embed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .containers import ContainerError, load_bundle, load_tensor, save_bundle, save_tensor
from .denoiser import DenoiserError, ModelConfig, load_model
from .inference import InferenceError, InferenceSchedule, run_edit_inference
from .timeline import TimelineError, apply_edit_ops, num_latents_for_frames
from .training import TrainConfig, TrainingError, build_corpus, run_training
from .transcript import TranscriptError, diff_words, parse_transcript
from .world import (
    AudioTrack,
    IdentitySpec,
    WorldError,
    encode,
    gen_audio,
    gen_scene,
    metrics,
    render_clip,
)

SCHEMA_VERSION = 1

_SCHEDULE_KEYS = (
    "num_steps", "block_width", "shift", "medial_fraction", "cache_threshold",
    "render_mode",
)


class CliError(Exception):
    """Operator-facing failure; ``code`` becomes the process exit status."""

    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def canonical_json_bytes(payload: dict) -> bytes:
    """The one serialization used for plan output, file and HTTP alike."""
    return (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8")


def read_json_file(path: str | Path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CliError(
            f"{path} is not valid JSON: {exc.msg} at byte offset {exc.pos}", code=2
        ) from exc


# -- artifact files --------------------------------------------------------


def save_track(path: str | Path, track: AudioTrack) -> None:
    save_bundle(
        path,
        meta={
            "schema_version": SCHEMA_VERSION,
            "kind": "audio_track",
            "seed": track.seed,
            "duration_s": track.duration_s,
            "feature_rate_hz": track.feature_rate_hz,
        },
        arrays={"envelope": track.envelope, "features": track.features},
    )


def load_track(path: str | Path) -> AudioTrack:
    meta, arrays = load_bundle(path)
    if meta.get("kind") != "audio_track" or "features" not in arrays:
        raise CliError(f"{path} is not an audio track bundle")
    return AudioTrack(
        seed=int(meta.get("seed", -1)),
        duration_s=float(meta["duration_s"]),
        feature_rate_hz=float(meta["feature_rate_hz"]),
        envelope=arrays["envelope"],
        features=arrays["features"],
    )


def save_latents(path: str | Path, latents: np.ndarray, fps: float) -> None:
    save_tensor(path, latents, tags={"kind": "latents", "fps": fps})


def load_latents(path: str | Path) -> tuple[np.ndarray, float | None]:
    array, tags = load_tensor(path)
    if array.ndim != 4:
        raise CliError(f"{path}: expected a 4-axis latent tensor, got shape {array.shape}")
    fps = tags.get("fps")
    return array, float(fps) if fps is not None else None


def save_video(path: str | Path, video: np.ndarray, fps: float) -> None:
    save_tensor(path, video, tags={"kind": "video", "fps": fps})


def load_video(path: str | Path) -> tuple[np.ndarray, float | None]:
    array, tags = load_tensor(path)
    if array.ndim != 3:
        raise CliError(f"{path}: expected a 3-axis video tensor, got shape {array.shape}")
    fps = tags.get("fps")
    return array, float(fps) if fps is not None else None


def save_scene(path: str | Path, seed: int) -> None:
    Path(path).write_bytes(
        canonical_json_bytes({"schema_version": SCHEMA_VERSION, "scene_seed": int(seed)})
    )


def load_scene(path: str | Path) -> IdentitySpec:
    payload = read_json_file(path)
    if not isinstance(payload, dict) or "scene_seed" not in payload:
        raise CliError(f"{path} is not a scene file (missing 'scene_seed')")
    return gen_scene(int(payload["scene_seed"]))


# -- planning --------------------------------------------------------------


def build_plan_payload(
    transcript_payload: dict,
    edited: str | list[str],
    fps: float | None = None,
    insert_durations: list[float] | None = None,
) -> dict:
    """Pure planning core shared by the CLI and the HTTP service.

    Diffs the transcript against the edited token stream, derives timeline
    operations, folds them into a latent plan, and returns one payload
    with all three layers plus the span alignment for display.
    """
    from .transcript import derive_ops  # local to keep module import light

    original = parse_transcript(transcript_payload)
    if not original.words:
        raise TranscriptError("transcript has no words")
    if fps is None:
        fps = original.fps_hint if original.fps_hint else 24.0
    if fps <= 0:
        raise TranscriptError(f"fps must be positive, got {fps}")
    frames = int(round(original.duration_s * fps))
    if frames < 1:
        raise TranscriptError(
            f"transcript covers {original.duration_s:.3f}s, under one frame at {fps} fps"
        )
    script = diff_words(original, edited)
    ops = derive_ops(script, insert_durations)
    n = num_latents_for_frames(frames)
    plan = apply_edit_ops(n, ops, fps)
    return {
        "schema_version": SCHEMA_VERSION,
        "fps": fps,
        "source": {
            "duration_s": original.duration_s,
            "frames": frames,
            "num_latents": n,
        },
        "spans": [
            {
                "kind": s.kind,
                "orig_start": s.orig_start,
                "orig_end": s.orig_end,
                "tokens": list(s.tokens),
                "duration_s": s.duration_s,
            }
            for s in script.spans
        ],
        "ops": [op.to_dict() for op in ops],
        "plan": plan.to_dict(),
    }


def schedule_from_dict(overrides: dict) -> InferenceSchedule:
    unknown = set(overrides) - set(_SCHEDULE_KEYS)
    if unknown:
        raise CliError(f"unknown schedule fields: {sorted(unknown)}")
    try:
        return InferenceSchedule(**overrides)
    except InferenceError as exc:
        raise CliError(str(exc)) from exc


# -- subcommands -----------------------------------------------------------


def cmd_plan(args) -> int:
    payload = read_json_file(args.transcript)
    if args.edited_text is not None:
        edited: str | list[str] = args.edited_text
    else:
        edited_payload = read_json_file(args.edited_transcript)
        edited = [w["text"] for w in edited_payload.get("words", [])]
    durations = None
    if args.insert_durations:
        durations = [float(x) for x in args.insert_durations.split(",")]
    out = build_plan_payload(payload, edited, fps=args.fps, insert_durations=durations)
    body = canonical_json_bytes(out)
    if args.out == "-":
        sys.stdout.buffer.write(body)
    else:
        Path(args.out).write_bytes(body)
    return 0


def cmd_train(args) -> int:
    cfg = read_json_file(args.config)
    if not isinstance(cfg, dict):
        raise CliError(f"{args.config} must hold a JSON object")
    known = {
        "stage", "steps", "lr", "p_audio", "p_ff", "p_v2v", "p_id",
        "t_shift", "k_immiscible", "contrast_weight", "batch", "seed",
        "checkpoint_every",
    }
    extra = {"schema_version", "corpus", "model", "init_from", "resume_from"}
    unknown = set(cfg) - known - extra
    if unknown:
        raise CliError(f"unknown training config fields: {sorted(unknown)}")
    corpus_cfg = cfg.get("corpus", {})
    sizes = tuple(tuple(pair) for pair in corpus_cfg.get("sizes", ((140, 49), (60, 89))))
    dataset = build_corpus(
        int(corpus_cfg.get("seed", 0)),
        sizes=sizes,
        fps=float(corpus_cfg.get("fps", 24.0)),
    )
    model_config = None
    if "model" in cfg:
        try:
            model_config = ModelConfig(**cfg["model"])
        except TypeError as exc:
            raise CliError(f"bad model config: {exc}") from exc
    train_kwargs = {k: cfg[k] for k in known if k in cfg}
    config = TrainConfig(**train_kwargs)
    out_path = Path(args.out_checkpoint)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    result = run_training(
        config,
        dataset,
        str(out_path.parent),
        model_config=model_config,
        init_from=cfg.get("init_from"),
        resume_from=cfg.get("resume_from"),
    )
    os.replace(result["checkpoint"], out_path)
    print(f"checkpoint written to {out_path}")
    return 0


def _load_render_inputs(args):
    plan_payload = read_json_file(args.plan)
    plan_dict = plan_payload.get("plan", plan_payload)
    from .timeline import LatentTimelinePlan

    plan = LatentTimelinePlan.from_dict(plan_dict)
    config, params, meta = load_model(args.checkpoint)
    track = load_track(args.audio) if args.audio else None
    if track is not None:
        if track.features.shape[1:] != (config.feature_banks, config.feature_channels):
            raise CliError(
                f"audio features {track.features.shape[1:]} do not match the "
                f"checkpoint's ({config.feature_banks}, {config.feature_channels})"
            )
    source = None
    if args.source_latents:
        source, src_fps = load_latents(args.source_latents)
        if src_fps is not None and abs(src_fps - plan.fps) > 1e-6:
            raise CliError(
                f"plan fps {plan.fps} does not match source latents fps {src_fps}"
            )
    spec = load_scene(args.scene) if args.scene else None
    return plan, config, params, meta, track, source, spec


def cmd_render(args) -> int:
    plan, config, params, meta, track, source, spec = _load_render_inputs(args)
    overrides = {
        k: v
        for k, v in {
            "num_steps": args.steps,
            "block_width": args.block_width,
            "shift": args.shift,
            "medial_fraction": args.medial_fraction,
            "cache_threshold": args.cache_threshold,
            "render_mode": args.mode,
        }.items()
        if v is not None
    }
    schedule = schedule_from_dict(overrides)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = run_edit_inference(
        plan, params, config, track, schedule,
        source_latents=source, spec=spec, seed=args.seed,
    )
    report = dict(result["report"])
    report["schema_version"] = SCHEMA_VERSION
    report["checkpoint_stage"] = meta.get("stage")
    save_latents(out_dir / "latents.eyts", result["latents"], plan.fps)
    save_video(out_dir / "video.eyts", result["video"], plan.fps)
    (out_dir / "report.json").write_bytes(canonical_json_bytes(report))
    print(f"rendered {result['latents'].shape[0]} latents into {out_dir}")
    return 0


def cmd_eval(args) -> int:
    video, fps = load_video(args.video)
    track = load_track(args.audio)
    spec = load_scene(args.scene)
    if fps is None:
        fps = args.fps
    result = metrics(video, track, spec, fps)
    payload = {"schema_version": SCHEMA_VERSION, "fps": fps, **result.to_dict()}
    sys.stdout.buffer.write(canonical_json_bytes(payload))
    return 0


def cmd_demo(args) -> int:
    """Generate a worked example: scene, audio, clip, latents, transcript."""
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fps = args.fps
    frames = args.frames
    if frames % 8 != 1:
        raise CliError(f"frame count {frames} is not on the 8k+1 latent grid")
    duration = frames / fps
    spec = gen_scene(args.scene_seed)
    track = gen_audio(args.audio_seed, duration_s=duration + 0.25)
    video = render_clip(spec, track, fps, frames)
    latents = encode(video)
    save_scene(out / "scene.json", args.scene_seed)
    save_track(out / "audio.eyck", track)
    save_video(out / "source_video.eyts", video, fps)
    save_latents(out / "source_latents.eyts", latents, fps)

    words = []
    word_rate = 2.5
    count = max(2, int(duration * word_rate))
    step = duration / count
    for i in range(count):
        words.append(
            {"text": f"word{i}", "start_s": round(i * step, 4), "end_s": round((i + 0.85) * step, 4)}
        )
    transcript = {"schema_version": SCHEMA_VERSION, "words": words, "fps_hint": fps}
    (out / "transcript.json").write_bytes(canonical_json_bytes(transcript))
    print(f"demo assets written to {out}")
    return 0


def cmd_serve(args) -> int:
    import socket

    import uvicorn

    from .service import create_app

    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.bind((args.host, args.port))
    except OSError as exc:
        raise CliError(f"port {args.port} busy: {exc.strerror}") from exc
    finally:
        probe.close()
    app = create_app(data_dir=args.data_dir, frontend_dir=args.frontend)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# -- argument parsing ------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentcut",
        description="Transcript-driven latent video editing on a procedural toy world.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="diff a transcript edit into a latent timeline plan")
    p.add_argument("--transcript", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--edited-text")
    group.add_argument("--edited-transcript")
    p.add_argument("--fps", type=float, default=None)
    p.add_argument("--insert-durations", default=None,
                   help="comma-separated seconds, one per inserted span")
    p.add_argument("--out", required=True, help="output path, or - for stdout")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train", help="run one training stage from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render an edited timeline from a plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--audio", default=None)
    p.add_argument("--source-latents", default=None)
    p.add_argument("--scene", default=None)
    p.add_argument("--mode", default=None,
                   choices=["none", "lip", "face", "head", "full"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--block-width", type=int, default=None)
    p.add_argument("--shift", type=int, default=None)
    p.add_argument("--medial-fraction", type=float, default=None)
    p.add_argument("--cache-threshold", type=float, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="score a decoded video against audio + scene")
    p.add_argument("--video", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--fps", type=float, default=24.0,
                   help="used only when the video tensor carries no fps tag")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("demo", help="write a self-contained example data set")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--scene-seed", type=int, default=7)
    p.add_argument("--audio-seed", type=int, default=70)
    p.add_argument("--frames", type=int, default=97)
    p.add_argument("--fps", type=float, default=24.0)
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("serve", help="start the local editing service")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--data-dir", default=None,
                   help="artifact root (default: $EY_DATA_DIR or ./ey_data)")
    p.add_argument("--frontend", default=None,
                   help="static UI directory to serve at /")
    p.set_defaults(func=cmd_serve)
    return parser


_EXPECTED = (
    CliError, TranscriptError, TimelineError, TrainingError, InferenceError,
    DenoiserError, ContainerError, WorldError,
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _EXPECTED as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code if isinstance(exc, CliError) else 1
    except FileNotFoundError as exc:
        print(f"error: missing file {exc.filename}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
