"""Word-level transcript diffs and the edit operations they imply.

A transcript is a list of timed words. Comparing its token stream against
an edited text yields a span script (keep / delete / insert), computed as
a longest-common-subsequence alignment with deterministic leftmost
tie-breaking. Spans then become timeline edit operations: deletions carry
the timing of the words they cover, insertions anchor at the end of the
last kept word and get a duration estimate (or a caller-supplied one, e.g.
measured from newly recorded audio).
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass

MASK_MODES = ("none", "lip", "face", "head", "full")

_STRIP = string.punctuation + "“”‘’…"


class TranscriptError(ValueError):
    """Malformed transcript payload."""


@dataclass(frozen=True)
class Word:
    text: str
    start_s: float
    end_s: float

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


@dataclass(frozen=True)
class Transcript:
    words: tuple[Word, ...]
    fps_hint: float | None = None

    @property
    def duration_s(self) -> float:
        return self.words[-1].end_s if self.words else 0.0

    def tokens(self) -> list[str]:
        return [normalize_token(w.text) for w in self.words]

    def to_dict(self) -> dict:
        d = {
            "schema_version": 1,
            "words": [
                {"text": w.text, "start_s": w.start_s, "end_s": w.end_s} for w in self.words
            ],
        }
        if self.fps_hint is not None:
            d["fps_hint"] = self.fps_hint
        return d


def normalize_token(text: str) -> str:
    """Lowercase and strip surrounding punctuation; inner apostrophes stay."""
    return text.strip(_STRIP).lower()


def parse_transcript(payload: dict) -> Transcript:
    """Validate a transcript dict; errors name the offending word index."""
    if not isinstance(payload, dict) or "words" not in payload:
        raise TranscriptError("transcript payload must be an object with a 'words' list")
    raw = payload["words"]
    if not isinstance(raw, list):
        raise TranscriptError("'words' must be a list")
    words = []
    prev_end = 0.0
    for i, entry in enumerate(raw):
        try:
            text = entry["text"]
            start = float(entry["start_s"])
            end = float(entry["end_s"])
        except (KeyError, TypeError, ValueError) as exc:
            raise TranscriptError(f"word {i}: missing or non-numeric fields ({exc})") from None
        if not isinstance(text, str) or not text.strip():
            raise TranscriptError(f"word {i}: empty text")
        if start < 0:
            raise TranscriptError(f"word {i}: negative start {start}")
        if end <= start:
            raise TranscriptError(f"word {i}: end {end} not after start {start}")
        if start < prev_end - 1e-9:
            raise TranscriptError(f"word {i}: starts at {start} before previous word ends at {prev_end}")
        prev_end = end
        words.append(Word(text=text, start_s=start, end_s=end))
    fps_hint = payload.get("fps_hint")
    return Transcript(words=tuple(words), fps_hint=float(fps_hint) if fps_hint else None)


def tokenize_text(text: str) -> list[str]:
    return [t for t in (normalize_token(p) for p in text.split()) if t]


# -- alignment -------------------------------------------------------------


@dataclass(frozen=True)
class Span:
    """One aligned region of the edit script.

    kind 'keep' and 'delete' cover original word indices
    [orig_start, orig_end); 'insert' carries the new tokens and sits
    between original words at position orig_start == orig_end.
    """

    kind: str  # keep | delete | insert
    orig_start: int
    orig_end: int
    tokens: tuple[str, ...] = ()
    duration_s: float = 0.0


@dataclass(frozen=True)
class EditScript:
    original: Transcript
    edited_tokens: tuple[str, ...]
    spans: tuple[Span, ...]

    def replay(self) -> list[str]:
        """Apply the spans to the original token stream."""
        out: list[str] = []
        orig = self.original.tokens()
        for s in self.spans:
            if s.kind == "keep":
                out.extend(orig[s.orig_start:s.orig_end])
            elif s.kind == "insert":
                out.extend(s.tokens)
        return out


def _lcs_table(a: list[str], b: list[str]) -> list[list[int]]:
    """L[i][j] = LCS length of a[i:] and b[j:]."""
    n, m = len(a), len(b)
    table = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        row, nxt = table[i], table[i + 1]
        for j in range(m - 1, -1, -1):
            if a[i] == b[j]:
                row[j] = nxt[j + 1] + 1
            else:
                down, right = nxt[j], row[j + 1]
                row[j] = down if down >= right else right
    return table


def diff_words(original: Transcript, edited_text: str | list[str]) -> EditScript:
    """Align original words against edited tokens.

    The forward greedy walk over the suffix-LCS table takes every match at
    the earliest possible original position, so ties between equally long
    alignments resolve leftmost and repeated words do not flap. On a
    mismatch the original token is consumed first (delete before insert).
    """
    a = original.tokens()
    if isinstance(edited_text, list):
        b = [normalize_token(t) for t in edited_text]
    else:
        b = tokenize_text(edited_text)

    # common prefix/suffix trim keeps the DP core tiny for typical edits
    pre = 0
    while pre < len(a) and pre < len(b) and a[pre] == b[pre]:
        pre += 1
    suf = 0
    while (
        suf < len(a) - pre and suf < len(b) - pre and a[-1 - suf] == b[-1 - suf]
    ):
        suf += 1
    core_a, core_b = a[pre:len(a) - suf], b[pre:len(b) - suf]
    table = _lcs_table(core_a, core_b)

    # raw per-token script: k=keep, d=delete, i=insert
    raw: list[tuple[str, int, str]] = [("k", i, a[i]) for i in range(pre)]
    i = j = 0
    while i < len(core_a) or j < len(core_b):
        if (
            i < len(core_a)
            and j < len(core_b)
            and core_a[i] == core_b[j]
            and table[i][j] == table[i + 1][j + 1] + 1
        ):
            raw.append(("k", pre + i, core_a[i]))
            i += 1
            j += 1
        elif i < len(core_a) and (j >= len(core_b) or table[i + 1][j] >= table[i][j + 1]):
            raw.append(("d", pre + i, core_a[i]))
            i += 1
        else:
            raw.append(("i", pre + i, core_b[j]))
            j += 1
    for s in range(suf, 0, -1):
        raw.append(("k", len(a) - s, a[len(a) - s]))

    mean_dur = (
        sum(w.duration_s for w in original.words) / len(original.words)
        if original.words
        else 0.5
    )

    spans: list[Span] = []
    for kind, pos, tok in raw:
        if spans and spans[-1].kind == {"k": "keep", "d": "delete", "i": "insert"}[kind]:
            last = spans[-1]
            if kind == "i":
                spans[-1] = Span(
                    "insert",
                    last.orig_start,
                    last.orig_end,
                    last.tokens + (tok,),
                    last.duration_s + mean_dur,
                )
                continue
            if last.orig_end == pos:
                dur = last.duration_s
                if kind == "d":
                    dur = original.words[pos].end_s - original.words[last.orig_start].start_s
                spans[-1] = Span(last.kind, last.orig_start, pos + 1, duration_s=dur)
                continue
        if kind == "i":
            spans.append(Span("insert", pos, pos, (tok,), mean_dur))
        else:
            w = original.words[pos]
            spans.append(
                Span(
                    {"k": "keep", "d": "delete"}[kind],
                    pos,
                    pos + 1,
                    duration_s=w.duration_s if kind == "d" else 0.0,
                )
            )
    return EditScript(original=original, edited_tokens=tuple(b), spans=tuple(spans))


# -- edit operations -------------------------------------------------------


@dataclass(frozen=True)
class EditOp:
    """One timeline operation, in source-time seconds.

    kind 'addition' inserts duration_s of new content at at_s; 'removal'
    deletes (duration_s is negative); 'retime' rescales the segment
    [at_s, at_s + duration_s] by scale; 'rerender' regenerates the region
    mask over [at_s, at_s + duration_s].
    """

    kind: str  # addition | removal | retime | rerender
    at_s: float
    duration_s: float
    region: str | None = None
    scale: float | None = None

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "at_s": self.at_s, "duration_s": self.duration_s}
        if self.region is not None:
            d["region"] = self.region
        if self.scale is not None:
            d["scale"] = self.scale
        return d


def op_from_dict(d: dict) -> EditOp:
    kind = d.get("kind")
    if kind not in ("addition", "removal", "retime", "rerender"):
        raise TranscriptError(f"unknown op kind {kind!r}")
    region = d.get("region")
    if region is not None and region not in MASK_MODES:
        raise TranscriptError(f"unknown region {region!r}")
    return EditOp(
        kind=kind,
        at_s=float(d["at_s"]),
        duration_s=float(d["duration_s"]),
        region=region,
        scale=float(d["scale"]) if d.get("scale") is not None else None,
    )


def derive_ops(script: EditScript, insert_durations: list[float] | None = None) -> list[EditOp]:
    """Turn an edit script into timeline operations, ordered by time.

    ``insert_durations`` overrides the per-insert duration estimates, one
    entry per insert span in order (measured from the new recording).
    """
    ops: list[EditOp] = []
    insert_idx = 0
    last_kept_end = 0.0
    for span in script.spans:
        if span.kind == "keep":
            last_kept_end = script.original.words[span.orig_end - 1].end_s
        elif span.kind == "delete":
            start = script.original.words[span.orig_start].start_s
            ops.append(EditOp("removal", at_s=start, duration_s=-span.duration_s))
        else:
            dur = span.duration_s
            if insert_durations is not None:
                if insert_idx >= len(insert_durations):
                    raise TranscriptError(
                        f"insert_durations has {len(insert_durations)} entries, "
                        f"but the script has more insert spans"
                    )
                dur = float(insert_durations[insert_idx])
            insert_idx += 1
            ops.append(EditOp("addition", at_s=last_kept_end, duration_s=dur))
    if insert_durations is not None and insert_idx != len(insert_durations):
        raise TranscriptError(
            f"insert_durations has {len(insert_durations)} entries, "
            f"script has {insert_idx} insert spans"
        )
    return ops


def plan_retime(t0: float, t1: float, target_duration_s: float, granularity_s: float = 0.3) -> list[EditOp]:
    """Spread a segment retime into evenly spaced micro additions/removals.

    The change |target - current| is split into ceil(delta / granularity)
    equal pieces at evenly spaced interior timestamps, so no single cut or
    insert exceeds the granularity and their sum is exact.
    """
    if t1 <= t0:
        raise TranscriptError(f"retime segment [{t0}, {t1}] is empty")
    if granularity_s <= 0:
        raise TranscriptError(f"granularity must be positive, got {granularity_s}")
    current = t1 - t0
    delta = target_duration_s - current
    if target_duration_s <= 0 or -delta >= current:
        raise TranscriptError(
            f"cannot shrink a {current:.3f}s segment to {target_duration_s:.3f}s"
        )
    if abs(delta) < 1e-12:
        return []
    # ceil on a nanosecond grid; plain float ceil misfires on 0.9/0.3 etc.
    count = max(1, -(-round(abs(delta) * 1e9) // round(granularity_s * 1e9)))
    piece = delta / count
    ops = []
    for i in range(count):
        at = t0 + (i + 1) * current / (count + 1)
        kind = "addition" if piece > 0 else "removal"
        ops.append(EditOp(kind, at_s=at, duration_s=piece))
    return ops


def expand_retimes(ops: list[EditOp], granularity_s: float = 0.3) -> list[EditOp]:
    """Replace retime ops by their micro add/removal expansion."""
    out: list[EditOp] = []
    for op in ops:
        if op.kind != "retime":
            out.append(op)
            continue
        if op.scale is None or op.scale <= 0:
            raise TranscriptError(f"retime at {op.at_s} needs a positive scale")
        seg = op.duration_s
        out.extend(plan_retime(op.at_s, op.at_s + seg, op.scale * seg, granularity_s))
    return out


def load_transcript(path: str) -> Transcript:
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_transcript(json.loads(data))
