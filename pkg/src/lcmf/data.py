"""Synthetic shapes corpus, PPM images, manifests, vocabularies and frame sampling."""

from __future__ import annotations

import json
import warnings
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import ConfigurationError

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (50, 80, 230),
    "yellow": (235, 220, 40),
    "purple": (150, 60, 190),
    "orange": (245, 140, 30),
}
NUMBER_WORDS = ("no", "a", "two", "three", "four")
YESNO_PREFIXES = ("is", "are", "does", "do", "was", "were", "can", "could", "has", "have")
QUESTION_TYPES = ("yesno", "number", "other")


# --- PPM ---------------------------------------------------------------------


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ConfigurationError(f"PPM needs an H x W x 3 uint8 image, got {img.shape} {img.dtype}")
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    fields: list[bytes] = []
    i = 0
    while len(fields) < 4:
        while i < len(blob) and blob[i : i + 1].isspace():
            i += 1
        if blob[i : i + 1] == b"#":
            while i < len(blob) and blob[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(blob) and not blob[j : j + 1].isspace():
            j += 1
        if j == i:
            raise ConfigurationError(f"{path}: truncated PPM header")
        fields.append(blob[i:j])
        i = j
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ConfigurationError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(fields[1]), int(fields[2])
    data = blob[i + 1 : i + 1 + w * h * 3]
    if len(data) != w * h * 3:
        raise ConfigurationError(f"{path}: pixel payload is {len(data)} bytes, expected {w * h * 3}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


# --- scenes ------------------------------------------------------------------


@dataclass(frozen=True)
class ShapeItem:
    shape: str
    color: str
    cell: int


def render(items: Sequence[ShapeItem], side: int, offsets: Sequence[tuple[int, int]] | None = None) -> np.ndarray:
    """Draw items into a 2 x 2 grid of cells on a black background."""
    img = np.zeros((side, side, 3), dtype=np.uint8)
    cell = side // 2
    yy, xx = np.mgrid[0:cell, 0:cell]
    for k, it in enumerate(items):
        dy, dx = offsets[k] if offsets else (0, 0)
        c = (cell - 1) / 2.0
        cy, cx = c + dy, c + dx
        r = cell * 0.35
        if it.shape == "circle":
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        elif it.shape == "square":
            mask = (np.abs(yy - cy) <= r * 0.85) & (np.abs(xx - cx) <= r * 0.85)
        else:
            top, bottom = cy - r, cy + r
            half = (yy - top) / (2 * r) * r
            mask = (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= half)
        oy, ox = divmod(it.cell, 2)
        region = img[oy * cell : (oy + 1) * cell, ox * cell : (ox + 1) * cell]
        region[mask] = COLORS[it.color]
    return img


def caption(items: Sequence[ShapeItem]) -> str:
    groups: dict[tuple[str, str], int] = {}
    for it in sorted(items, key=lambda it: it.cell):
        groups[(it.color, it.shape)] = groups.get((it.color, it.shape), 0) + 1
    parts = []
    for (color, shape), n in groups.items():
        count = "an" if n == 1 and color[0] in "aeiou" else NUMBER_WORDS[n]
        parts.append(f"{count} {color} {shape}{'s' if n > 1 else ''}")
    if not parts:
        return "an empty picture"
    return parts[0] if len(parts) == 1 else ", ".join(parts[:-1]) + " and " + parts[-1]


def make_question(items: Sequence[ShapeItem], kind: str, rng: np.random.Generator) -> tuple[str, str]:
    if kind == "number":
        shape = SHAPES[rng.integers(len(SHAPES))]
        n = sum(it.shape == shape for it in items)
        return f"how many {shape}s are there", str(n)
    if kind == "other":
        unique = [it for it in items if sum(o.shape == it.shape for o in items) == 1]
        if unique:
            it = unique[rng.integers(len(unique))]
            return f"what color is the {it.shape}", it.color
        kind = "yesno"
    shape = SHAPES[rng.integers(len(SHAPES))]
    if rng.random() < 0.5:
        return f"is there a {shape}", "yes" if any(it.shape == shape for it in items) else "no"
    color = list(COLORS)[rng.integers(len(COLORS))]
    present = any(it.shape == shape and it.color == color for it in items)
    return f"is there a {color} {shape}", "yes" if present else "no"


def random_scene(rng: np.random.Generator) -> list[ShapeItem]:
    count = int(rng.integers(1, 5))
    cells = np.sort(rng.choice(4, size=count, replace=False))
    names = list(COLORS)
    return [ShapeItem(SHAPES[rng.integers(3)], names[rng.integers(len(names))], int(c)) for c in cells]


# --- manifest ----------------------------------------------------------------


@dataclass(frozen=True)
class Record:
    caption: str
    question: str
    answer: str
    question_type: str
    split: str = "train"
    image: str | None = None
    frames: str | None = None

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(d, sort_keys=True)


def classify_question(question: str) -> str:
    words = question.strip().lower().split()
    if not words:
        return "other"
    if words[0] in YESNO_PREFIXES:
        return "yesno"
    if words[0] == "how" and len(words) > 1 and words[1] in ("many", "much"):
        return "number"
    return "other"


def write_manifest(path: str | Path, records: Iterable[Record]) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")


def load_manifest(path: str | Path, check_files: bool = True) -> list[Record]:
    path = Path(path)
    records = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            rec = Record(**raw)
        except (json.JSONDecodeError, TypeError) as exc:
            raise ConfigurationError(f"{path}:{n}: bad record: {exc}") from None
        if (rec.image is None) == (rec.frames is None):
            raise ConfigurationError(f"{path}:{n}: record needs exactly one of image / frames")
        if rec.question_type not in QUESTION_TYPES:
            raise ConfigurationError(f"{path}:{n}: unknown question type {rec.question_type!r}")
        if check_files:
            target = path.parent / (rec.image or rec.frames)
            if not target.exists():
                raise ConfigurationError(f"{path}:{n}: missing {target}")
        records.append(rec)
    return records


def load_frames(manifest_dir: Path, rec: Record, k: int | None = None) -> list[np.ndarray]:
    """Images of a record; a frame directory is reduced to ``k`` stratified frames."""
    if rec.image is not None:
        return [read_ppm(manifest_dir / rec.image)]
    files = sorted((manifest_dir / rec.frames).glob("*.ppm"))
    if not files:
        raise ConfigurationError(f"no frames in {manifest_dir / rec.frames}")
    idx = stratified_frames(len(files), k) if k else range(len(files))
    cache: dict[int, np.ndarray] = {}
    frames = []
    for i in idx:
        if i not in cache:
            cache[i] = read_ppm(files[i])
        frames.append(cache[i])  # repeated indices share one array
    return frames


def gen_synthetic_vqa(
    out_dir: str | Path,
    seed: int,
    n: int,
    image_side: int = 32,
    val_fraction: float = 0.25,
    video: bool = False,
    video_len: int = 12,
    answers_k: int = 16,
) -> list[Record]:
    """Write images (or frame directories), ``manifest.jsonl``, ``vocab.txt`` and ``answers.txt``."""
    if image_side % 2 or image_side < 8:
        raise ConfigurationError("image side must be even and at least 8")
    out = Path(out_dir)
    (out / ("videos" if video else "images")).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_val = int(round(n * val_fraction))
    records = []
    for i in range(n):
        items = random_scene(rng)
        kind = QUESTION_TYPES[i % 3]
        question, answer = make_question(items, kind, rng)
        split = "val" if i >= n - n_val else "train"
        common = dict(caption=caption(items), question=question, answer=answer,
                      question_type=classify_question(question), split=split)
        if video:
            rel = f"videos/{i:05d}"
            (out / rel).mkdir(exist_ok=True)
            mover = int(rng.integers(len(items)))
            span = image_side // 2 // 4
            for f in range(video_len):
                shift = int(round((f / max(video_len - 1, 1) - 0.5) * 2 * span))
                offsets = [(0, shift) if k == mover else (0, 0) for k in range(len(items))]
                write_ppm(out / rel / f"frame_{f:04d}.ppm", render(items, image_side, offsets))
            records.append(Record(frames=rel, **common))
        else:
            rel = f"images/{i:05d}.ppm"
            write_ppm(out / rel, render(items, image_side))
            records.append(Record(image=rel, **common))
    write_manifest(out / "manifest.jsonl", records)
    from .text import Vocab  # local import keeps data free of model code at import time

    Vocab.build([r.caption for r in records] + [r.question for r in records]).save(out / "vocab.txt")
    train_answers = [r.answer for r in records if r.split == "train"] or [r.answer for r in records]
    topk_vocab(train_answers, answers_k).save(out / "answers.txt")
    return records


# --- answer vocabulary -------------------------------------------------------


@dataclass(frozen=True)
class AnswerVocab:
    answers: tuple[str, ...]
    coverage: float = 1.0

    def __len__(self) -> int:
        return len(self.answers)

    def index(self, answer: str) -> int | None:
        try:
            return self.answers.index(answer)
        except ValueError:
            return None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(f"topk={len(self.answers)}\n" + "".join(a + "\n" for a in self.answers), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "AnswerVocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("topk="):
            raise ConfigurationError(f"{path}: missing 'topk=<K>' header")
        k = int(lines[0][5:])
        answers = tuple(lines[1:])
        if len(answers) != k:
            raise ConfigurationError(f"{path}: header says {k} answers, file has {len(answers)}")
        return cls(answers)


def topk_vocab(answers: Iterable[str], K: int) -> AnswerVocab:
    if K < 1:
        raise ConfigurationError("K must be >= 1")
    counts = Counter(answers)
    if K > len(counts):
        warnings.warn(f"K={K} exceeds the {len(counts)} distinct answers; keeping all", stacklevel=2)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:K]
    total = sum(counts.values())
    covered = sum(c for _, c in ranked)
    return AnswerVocab(tuple(a for a, _ in ranked), covered / total if total else 1.0)


def stratified_frames(video_len: int, k: int = 50) -> list[int]:
    """Centre frame of each of ``k`` equal spans (0-based, non-decreasing)."""
    if video_len < 1 or k < 1:
        raise ConfigurationError("video length and k must be >= 1")
    return [((2 * i + 1) * video_len) // (2 * k) for i in range(k)]
