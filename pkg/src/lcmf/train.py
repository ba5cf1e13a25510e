"""Pretraining, finetuning and evaluation loops.

Samples are processed one at a time under their own tape; gradients are
summed over a batch in a fixed order before each optimizer step, so runs are
bit-reproducible for a given config and seed.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig, write_config
from .data import QUESTION_TYPES, AnswerVocab, Record, load_frames, load_manifest
from .model import LCMF
from .optim import AdamW, lr_at
from .sdmae import sample_mask
from .tensor import ConfigurationError, DimensionError, Tape, cross_entropy, no_tape
from .text import Vocab, mlm_corrupt, tokenize, truncate
from .weighter import LossWeights, reweight, total_loss

log = logging.getLogger(__name__)

PRETRAIN_HEADER = ("epoch", "step", "loss_img", "loss_txt", "w_img", "w_txt", "ema_img", "ema_txt", "lr")
FINETUNE_HEADER = ("epoch", "step", "loss", "lr")
CHECKPOINT_NAME = "checkpoint.lcmf"


class TrainingError(RuntimeError):
    pass


@dataclass
class PretrainResult:
    checkpoint: Path
    metrics: Path
    epoch_img: list[float] = field(default_factory=list)
    epoch_txt: list[float] = field(default_factory=list)
    skipped_steps: int = 0


@dataclass
class FinetuneResult:
    checkpoint: Path
    metrics: Path
    epoch_loss: list[float] = field(default_factory=list)


@dataclass
class MetricsReport:
    accuracy: float
    per_type: dict[str, float]
    mAA: float
    parameters: int
    flops: float
    latency_ms: float
    records: int
    chance: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# --- helpers -----------------------------------------------------------------


def resolve_config(cfg: RunConfig, manifest: Path, answers: AnswerVocab | None = None) -> RunConfig:
    """Fill in data-dependent sizes (vocabulary, answer count)."""
    model = cfg.model
    if model.vocab_size == 0:
        model = dataclasses.replace(model, vocab_size=len(Vocab.load(manifest.parent / "vocab.txt")))
    if model.answers == 0:
        answers = answers or AnswerVocab.load(manifest.parent / "answers.txt")
        model = dataclasses.replace(model, answers=len(answers))
    return dataclasses.replace(cfg, model=model)


def build_model(cfg: RunConfig) -> LCMF:
    return LCMF(cfg.model, np.random.default_rng([cfg.train.seed, 0]))


def _fmt(x: float) -> str:
    return repr(float(x))


def save_checkpoint(model: LCMF, path: Path) -> None:
    checkpoint.save(path, model.state_dict())


def load_checkpoint(model: LCMF, path: str | Path) -> None:
    state = checkpoint.load(path)
    try:
        model.load_state_dict(state)
    except (ConfigurationError, DimensionError) as exc:
        raise ConfigurationError(f"checkpoint {path} does not match the model: {exc}") from None


def _train_records(records: list[Record]) -> list[Record]:
    train = [r for r in records if r.split == "train"]
    return train or records


class _FrameCache:
    """Normalised frames per record, keeping repeated frames as one array."""

    def __init__(self, model: LCMF, root: Path, k: int):
        self.model, self.root, self.k = model, root, k
        self.store: dict[str, list[np.ndarray]] = {}

    def __call__(self, rec: Record) -> list[np.ndarray]:
        key = rec.image or rec.frames
        if key not in self.store:
            raw = load_frames(self.root, rec, self.k)
            normed: dict[int, np.ndarray] = {}
            self.store[key] = [normed.setdefault(id(f), self.model.normalize_image(f)) for f in raw]
        return self.store[key]


# --- pretraining -------------------------------------------------------------


def pretrain(cfg: RunConfig, manifest: str | Path, out_dir: str | Path) -> PretrainResult:
    manifest, out = Path(manifest), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = resolve_config(cfg, manifest)
    write_config(cfg, out / "config.ini")
    tc = cfg.train
    records = _train_records(load_manifest(manifest))
    vocab = Vocab.load(manifest.parent / "vocab.txt")
    model = build_model(cfg)
    frames = _FrameCache(model, manifest.parent, 1)
    images = [frames(r)[0] for r in records]
    captions = [truncate(tokenize(r.caption, vocab), cfg.model.max_len) for r in records]

    rng = np.random.default_rng([tc.seed, 1])
    opt = AdamW(model.parameters(), tc.lr, weight_decay=tc.weight_decay)
    weights = LossWeights.init(2)
    n = len(records)
    steps_per_epoch = -(-n // tc.batch_size)
    total_steps = steps_per_epoch * tc.epochs
    result = PretrainResult(out / CHECKPOINT_NAME, out / "metrics.csv")
    P = model.num_patches
    nonfinite_run = 0
    step = 0

    with open(result.metrics, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PRETRAIN_HEADER)
        for epoch in range(tc.epochs):
            order = rng.permutation(n)
            sums = np.zeros(2)
            counts = np.zeros(2)
            for lo in range(0, n, tc.batch_size):
                batch = order[lo : lo + tc.batch_size]
                lr = lr_at(step, total_steps, tc.lr, tc.schedule, tc.pct_start)
                w = weights.weights.copy()
                opt.zero_grad()
                img_losses, txt_losses = [], []
                for i in batch:
                    plan = sample_mask(P, tc.image_mask_prob, rng)
                    ids, mlm = mlm_corrupt(captions[i], cfg.model.vocab_size, tc.text_mask_prob, rng_seed=rng)
                    with Tape() as tape:
                        l_img, l_txt = model.pretrain_losses(
                            images[i], ids, plan, mlm, tc.normalize_target, tc.masked_only)
                        loss = total_loss([l_img, l_txt], w) * (1.0 / len(batch))
                        if np.isfinite(loss.item()):
                            tape.backward(loss)
                    img_losses.append(l_img.item())
                    if len(mlm):
                        txt_losses.append(l_txt.item())
                batch_losses = [float(np.mean(img_losses)), float(np.mean(txt_losses)) if txt_losses else float("nan")]
                if not np.isfinite(batch_losses[0]) or any(not np.isfinite(x) for x in txt_losses):
                    nonfinite_run += 1
                    result.skipped_steps += 1
                    log.warning("non-finite loss at epoch %d step %d; step skipped", epoch, step)
                    if nonfinite_run >= tc.abort_after_nonfinite:
                        raise TrainingError(f"{nonfinite_run} consecutive non-finite losses; aborting")
                    opt.zero_grad()
                    step += 1
                    continue
                nonfinite_run = 0
                opt.step(lr)
                # a batch without MLM positions leaves the text trend unchanged
                feed = list(batch_losses)
                if not txt_losses:
                    feed[1] = weights.ema[1] if weights.ema is not None else batch_losses[0]
                weights = reweight(feed, weights)
                ema = weights.ema if weights.ema is not None else np.full(2, np.nan)
                writer.writerow([epoch, step, _fmt(batch_losses[0]), _fmt(batch_losses[1]),
                                 _fmt(w[0]), _fmt(w[1]), _fmt(ema[0]), _fmt(ema[1]), _fmt(lr)])
                sums += [sum(img_losses), sum(txt_losses)]
                counts += [len(img_losses), len(txt_losses)]
                step += 1
            result.epoch_img.append(float(sums[0] / max(counts[0], 1)))
            result.epoch_txt.append(float(sums[1] / max(counts[1], 1)))
            log.info("epoch %d  img %.4f  txt %.4f", epoch, result.epoch_img[-1], result.epoch_txt[-1])
            if tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0:
                save_checkpoint(model, out / f"checkpoint_epoch{epoch + 1:04d}.lcmf")
    save_checkpoint(model, result.checkpoint)
    return result


# --- finetuning --------------------------------------------------------------


def load_answers(manifest: Path, cfg: RunConfig) -> AnswerVocab:
    answers = AnswerVocab.load(manifest.parent / "answers.txt")
    if len(answers) != cfg.model.answers:
        raise ConfigurationError(
            f"answer vocabulary has {len(answers)} entries but the head is configured for {cfg.model.answers}")
    return answers


def finetune(cfg: RunConfig, manifest: str | Path, pretrained: str | Path | None, out_dir: str | Path) -> FinetuneResult:
    manifest, out = Path(manifest), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = resolve_config(cfg, manifest)
    write_config(cfg, out / "config.ini")
    tc = cfg.train
    answers = load_answers(manifest, cfg)
    vocab = Vocab.load(manifest.parent / "vocab.txt")
    model = build_model(cfg)
    if pretrained is not None:
        load_checkpoint(model, pretrained)
    records = [r for r in _train_records(load_manifest(manifest)) if answers.index(r.answer) is not None]
    frames = _FrameCache(model, manifest.parent, tc.video_frames)
    questions = [truncate(tokenize(r.question, vocab), cfg.model.max_len) for r in records]
    targets = [answers.index(r.answer) for r in records]

    rng = np.random.default_rng([tc.seed, 2])
    opt = AdamW(model.parameters(), tc.lr, weight_decay=tc.weight_decay)
    n = len(records)
    total_steps = -(-n // tc.batch_size) * tc.epochs
    result = FinetuneResult(out / CHECKPOINT_NAME, out / "metrics.csv")
    step = 0

    with open(result.metrics, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FINETUNE_HEADER)
        for epoch in range(tc.epochs):
            order = rng.permutation(n)
            epoch_sum = 0.0
            for lo in range(0, n, tc.batch_size):
                batch = order[lo : lo + tc.batch_size]
                lr = lr_at(step, total_steps, tc.lr, tc.schedule, tc.pct_start)
                opt.zero_grad()
                losses = []
                for i in batch:
                    with Tape() as tape:
                        logits = model.answer_logits(frames(records[i]), questions[i])
                        loss = cross_entropy(logits, [targets[i]])
                        tape.backward(loss * (1.0 / len(batch)))
                    losses.append(loss.item())
                if tc.lr > 0:
                    opt.step(lr)
                epoch_sum += sum(losses)
                writer.writerow([epoch, step, _fmt(np.mean(losses)), _fmt(lr)])
                step += 1
            result.epoch_loss.append(epoch_sum / max(n, 1))
            log.info("epoch %d  loss %.4f", epoch, result.epoch_loss[-1])
            if tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0:
                save_checkpoint(model, out / f"checkpoint_epoch{epoch + 1:04d}.lcmf")
    save_checkpoint(model, result.checkpoint)
    return result


# --- evaluation --------------------------------------------------------------


def predict(model: LCMF, frames: list[np.ndarray], question_ids: np.ndarray) -> int:
    with no_tape():
        return int(np.argmax(model.answer_logits(frames, question_ids).data))


def evaluate_model(
    model: LCMF, records: list[Record], root: Path, answers: AnswerVocab, vocab: Vocab, video_frames: int = 50,
) -> MetricsReport:
    if not records:
        raise ConfigurationError("no records to evaluate")
    cache = _FrameCache(model, root, video_frames)
    correct = {t: 0 for t in QUESTION_TYPES}
    seen = {t: 0 for t in QUESTION_TYPES}
    flops_total = 0
    elapsed = 0.0
    for rec in records:
        ids = truncate(tokenize(rec.question, vocab), model.cfg.max_len)
        frames = cache(rec)
        start = time.perf_counter()
        guess = predict(model, frames, ids)
        elapsed += time.perf_counter() - start
        gold = answers.index(rec.answer)
        seen[rec.question_type] += 1
        correct[rec.question_type] += int(gold is not None and guess == gold)
        flops_total += sum(model.flops(len(ids), len({id(f) for f in frames})).values())
    per_type = {t: correct[t] / seen[t] for t in QUESTION_TYPES if seen[t]}
    return MetricsReport(
        accuracy=sum(correct.values()) / len(records),
        per_type=per_type,
        mAA=float(np.mean(list(per_type.values()))),
        parameters=model.num_parameters(),
        flops=flops_total / len(records),
        latency_ms=1e3 * elapsed / len(records),
        records=len(records),
        chance=1.0 / len(answers),
    )


def evaluate(
    cfg: RunConfig, ckpt: str | Path, manifest: str | Path, split: str | None = None,
) -> MetricsReport:
    manifest = Path(manifest)
    cfg = resolve_config(cfg, manifest)
    answers = load_answers(manifest, cfg)
    model = build_model(cfg)
    load_checkpoint(model, ckpt)
    records = load_manifest(manifest)
    if split is not None:
        records = [r for r in records if r.split == split]
    vocab = Vocab.load(manifest.parent / "vocab.txt")
    return evaluate_model(model, records, manifest.parent, answers, vocab, cfg.train.video_frames)
