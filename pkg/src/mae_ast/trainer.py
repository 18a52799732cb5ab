"""Pretraining and fine-tuning loops over directories of ``.fbank`` features."""

from __future__ import annotations

import csv
import json
import logging
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import features
from .masking import MaskPlan, MaskStrategy, broadcast_mask, sample_mask
from .model import MaeAst, ModelConfig, encoder_param_names, init_classifier
from .nn import ops
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.optim import AdamHyper, AdamState, adam_step, poly_decay_lr
from .nn.tensor import TRACKER, NonFiniteError, Tensor, fault_context, no_grad, release_grad
from .objectives import LossConfig, joint_loss
from .tokenizer import TokenBatch, tokenize

log = logging.getLogger(__name__)

STATS_FILE = "stats.json"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 1000
    max_tokens_per_batch: int = 15872  # 32 clips of 496 patch tokens
    lr0: float = 1e-4
    weight_decay: float = 0.01
    lr_power: float = 1.0
    warmup: int = 0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    mask_strategy: MaskStrategy = MaskStrategy.PATCH_CHUNKED
    mask_p: float = 0.75
    log_every: int = 1
    ckpt_every: int = 1000
    overfit: bool = False
    overfit_clips: int = 4

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.log_every < 1 or self.ckpt_every < 1:
            raise ValueError("log_every and ckpt_every must be >= 1")


@dataclass
class Clip:
    clip_id: str
    tokens: TokenBatch

    @property
    def n_tokens(self) -> int:
        return self.tokens.n_tokens


@dataclass
class PretrainResult:
    model: MaeAst
    metrics: list[dict]
    checkpoint: Path
    normalizer: tuple[float, float]


# data ------------------------------------------------------------------------


def feature_files(data_dir) -> list[Path]:
    return sorted(Path(data_dir).rglob("*.fbank"))


def load_normalizer(data_dir, specs: Optional[Sequence[features.Spectrogram]] = None) -> tuple[float, float]:
    stats = Path(data_dir) / STATS_FILE
    if stats.exists():
        raw = json.loads(stats.read_text())
        return float(raw["mean"]), float(raw["std"])
    if specs is None:
        specs = [features.read_fbank(p) for p in feature_files(data_dir)]
    return features.fit_normalizer(specs)


def load_clips(data_dir, mode, normalizer=None, paths: Optional[Iterable[Path]] = None) -> tuple[list[Clip], tuple[float, float]]:
    data_dir = Path(data_dir)
    paths = list(paths) if paths is not None else feature_files(data_dir)
    if not paths:
        raise TrainingError(f"no .fbank files under {data_dir}")
    specs = [features.read_fbank(p) for p in paths]
    mean, std = normalizer if normalizer is not None else load_normalizer(data_dir, specs)
    clips = []
    for path, spec in zip(paths, specs):
        cid = path.relative_to(data_dir).as_posix() if path.is_relative_to(data_dir) else str(path)
        clips.append(Clip(cid, tokenize(features.normalize(spec, mean, std), mode, cid)))
    return clips, (mean, std)


def batch_by_tokens(clips: Sequence, max_tokens: int) -> list[list]:
    """Greedy fill in the given order; a batch never holds more than ``max_tokens`` tokens."""
    batches: list[list] = []
    current: list = []
    used = 0
    for clip in clips:
        n = clip.n_tokens
        if n > max_tokens:
            raise TrainingError(f"clip {getattr(clip, 'clip_id', '?')} has {n} tokens, over the {max_tokens}-token budget")
        if current and used + n > max_tokens:
            batches.append(current)
            current, used = [], 0
        current.append(clip)
        used += n
    if current:
        batches.append(current)
    return batches


def plan_batch(batch: Sequence[Clip], strategy: MaskStrategy, p: float, rng: np.random.Generator) -> list[MaskPlan]:
    """Chunked patch masks are shared by every clip of equal length; other strategies mask per clip."""
    if strategy is MaskStrategy.PATCH_CHUNKED:
        plans: list[Optional[MaskPlan]] = [None] * len(batch)
        by_len = defaultdict(list)
        for i, clip in enumerate(batch):
            by_len[clip.n_tokens].append(i)
        for idxs in by_len.values():
            tb = batch[idxs[0]].tokens
            shared = sample_mask(strategy, tb.n_time_steps, tb.n_channel_rows, p, rng)
            for i, plan in zip(idxs, broadcast_mask(shared, [batch[i].tokens for i in idxs])):
                plans[i] = plan
        return plans  # type: ignore[return-value]
    return [sample_mask(strategy, c.tokens.n_time_steps, c.tokens.n_channel_rows, p, rng) for c in batch]


def batch_loss(model: MaeAst, batch: Sequence[Clip], plans: Sequence[MaskPlan], loss_cfg: LossConfig):
    """Clip-averaged (total, recon, nce); clips sharing (N, K) are run as one stacked forward."""
    groups = defaultdict(list)
    for clip, plan in zip(batch, plans):
        groups[(clip.n_tokens, len(plan.unmasked))].append((clip, plan))
    total = recon = nce = None
    for members in groups.values():
        w = len(members) / len(batch)
        tokens = np.stack([c.tokens.tokens for c, _ in members])
        unmasked = np.stack([pl.unmasked for _, pl in members])
        masked = np.stack([pl.masked for _, pl in members])
        out = model.pretrain_forward(tokens, unmasked, masked)
        t, r, n = joint_loss(out, loss_cfg)
        if len(groups) > 1:
            t, r, n = ops.scale(t, w), ops.scale(r, w), ops.scale(n, w)
        total = t if total is None else ops.add(total, t)
        recon = r if recon is None else ops.add(recon, r)
        nce = n if nce is None else ops.add(nce, n)
    return total, recon, nce


# checkpoints -----------------------------------------------------------------


def param_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in params.items()}


def save_model(path, model: MaeAst, normalizer, extra: Optional[dict] = None) -> Path:
    sidecar = {"model": model.cfg.to_dict(), "normalizer": {"mean": normalizer[0], "std": normalizer[1]}}
    sidecar.update(extra or {})
    return save_checkpoint(path, param_arrays(model.params), sidecar)


def load_model(path, dtype=np.float32) -> tuple[MaeAst, tuple[float, float], dict]:
    arrays, sidecar = load_checkpoint(path, dtype)
    cfg = ModelConfig.from_dict(sidecar["model"])
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    norm = sidecar.get("normalizer", {})
    return MaeAst(cfg, params), (norm.get("mean", 0.0), norm.get("std", 1.0)), sidecar


def _train_sidecar(cfg: TrainConfig, step: int) -> dict:
    raw = asdict(cfg)
    raw["mask_strategy"] = cfg.mask_strategy.value
    return {"train": raw, "step": step}


# pretraining -------------------------------------------------------------


def pretrain(data_dir, model_cfg: ModelConfig, cfg: TrainConfig, out_dir, clips: Optional[list[Clip]] = None, normalizer=None) -> PretrainResult:
    """Masked pretraining; writes ``metrics.jsonl`` and ``ckpt-*`` directories under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if clips is None:
        clips, normalizer = load_clips(data_dir, model_cfg.mode, normalizer)
    if not clips:
        raise TrainingError("no training clips")
    if normalizer is None:
        normalizer = (0.0, 0.5)
    if MaskStrategy(cfg.mask_strategy).token_kind != model_cfg.mode.kind.value:
        raise TrainingError(f"{cfg.mask_strategy.value} masking does not fit {model_cfg.mode.kind.value} tokens")

    model = MaeAst.init(model_cfg, seed=cfg.seed)
    state = AdamState.zeros_like(param_arrays(model.params))
    metrics: list[dict] = []
    last_ckpt = save_model(out_dir / "ckpt-init", model, normalizer, _train_sidecar(cfg, 0))

    def epoch_batches(epoch: int):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(clips))
        return batch_by_tokens([clips[i] for i in order], cfg.max_tokens_per_batch)

    fixed = None
    if cfg.overfit:
        batch = epoch_batches(0)[0][: cfg.overfit_clips]
        fixed = (batch, plan_batch(batch, cfg.mask_strategy, cfg.mask_p, np.random.default_rng([cfg.seed, 0, 1])))

    epoch, queue = 0, []
    log_path = out_dir / "metrics.jsonl"
    with open(log_path, "w") as log_fh:
        for step in range(1, cfg.total_steps + 1):
            if fixed is not None:
                batch, plans = fixed
            else:
                while not queue:
                    queue = epoch_batches(epoch)
                    epoch += 1
                batch = queue.pop(0)
                plans = plan_batch(batch, cfg.mask_strategy, cfg.mask_p, np.random.default_rng([cfg.seed, step, 1]))
            lr = poly_decay_lr(step - 1, cfg.total_steps, cfg.lr0, cfg.lr_power, cfg.warmup)
            TRACKER.reset_peak()
            t0 = time.perf_counter()
            try:
                with fault_context(f"step {step}"):
                    total, recon, nce = batch_loss(model, batch, plans, cfg.loss)
                    total.backward()
                    grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
                    adam_step(param_arrays(model.params), grads, state, step, AdamHyper(lr, weight_decay=cfg.weight_decay))
            except NonFiniteError as exc:
                raise TrainingError(f"aborted at step {step}: {exc}; last good checkpoint: {last_ckpt}") from exc
            finally:
                for p in model.params.values():
                    release_grad(p)
            elapsed = time.perf_counter() - t0
            n_tok = sum(c.n_tokens for c in batch)
            record = {
                "step": step,
                "total": float(total.data),
                "recon": float(recon.data),
                "nce": float(nce.data),
                "lr": lr,
                "tokens_per_sec": n_tok / elapsed if elapsed > 0 else float("inf"),
                "peak_bytes": TRACKER.peak,
            }
            if step % cfg.log_every == 0 or step == cfg.total_steps:
                metrics.append(record)
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if step % cfg.ckpt_every == 0:
                last_ckpt = save_model(out_dir / f"ckpt-{step:07d}", model, normalizer, _train_sidecar(cfg, step))
    final = save_model(out_dir / "ckpt-final", model, normalizer, _train_sidecar(cfg, cfg.total_steps))
    return PretrainResult(model, metrics, final, normalizer)


# fine-tuning -------------------------------------------------------------


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 300
    lr: float = 1e-2
    weight_decay: float = 0.0
    holdout_fraction: float = 0.2
    batch_size: int = 32
    seed: int = 0
    unfreeze_encoder: bool = False


def read_labels(path) -> dict[str, int]:
    labels = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 2:
                raise TrainingError(f"{path}: expected 'relative_path,label_index', got {row}")
            try:
                labels[row[0].strip()] = int(row[1])
            except ValueError:
                if not labels:  # header line
                    continue
                raise TrainingError(f"{path}: bad label {row[1]!r}") from None
    return labels


def stratified_split(labels: np.ndarray, holdout: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 2])
    train, test = [], []
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        n_test = int(round(holdout * len(idx)))
        if len(idx) > 1:
            n_test = min(max(n_test, 1), len(idx) - 1)
        else:
            n_test = 0
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(test, dtype=int))


def _stack_group(clips: Sequence[Clip]) -> dict[int, list[int]]:
    groups = defaultdict(list)
    for i, c in enumerate(clips):
        groups[c.n_tokens].append(i)
    return groups


def pooled_features(model: MaeAst, clips: Sequence[Clip]) -> np.ndarray:
    """Mean-pooled encoder states per clip (no gradient)."""
    out = np.zeros((len(clips), model.cfg.d), dtype=model.dtype)
    with no_grad():
        for idxs in _stack_group(clips).values():
            tokens = np.stack([clips[i].tokens.tokens for i in idxs])
            out[idxs] = model.pooled(tokens).data
    return out


def finetune(
    model: MaeAst,
    clips: Sequence[Clip],
    labels: Sequence[int],
    cfg: FinetuneConfig,
    out_dir=None,
    normalizer=(0.0, 0.5),
) -> dict:
    """Train a linear head on mean-pooled encoder states; report held-out accuracy."""
    labels = np.asarray(labels, dtype=int)
    if len(labels) != len(clips):
        raise TrainingError(f"{len(labels)} labels for {len(clips)} clips")
    if len(clips) == 0:
        raise TrainingError("no labelled clips")
    n_classes = int(labels.max()) + 1
    degenerate = len(np.unique(labels)) < 2
    train_idx, test_idx = stratified_split(labels, cfg.holdout_fraction, cfg.seed)
    head = init_classifier(model.cfg.d, n_classes, cfg.seed, model.dtype)
    trainable = dict(head)
    if cfg.unfreeze_encoder:
        trainable.update({k: model.params[k] for k in encoder_param_names(model.params)})
    state = AdamState.zeros_like(param_arrays(trainable))
    rng = np.random.default_rng([cfg.seed, 3])
    feats = None if cfg.unfreeze_encoder else pooled_features(model, clips)

    for step in range(1, cfg.steps + 1):
        batch = rng.choice(train_idx, size=min(cfg.batch_size, len(train_idx)), replace=False)
        if feats is not None:
            pooled = Tensor(feats[batch])
            loss = ops.cross_entropy(ops.linear(pooled, head["classifier.weight"], head["classifier.bias"]), labels[batch])
        else:
            sub = [clips[i] for i in batch]
            parts = []
            for idxs in _stack_group(sub).values():
                tokens = np.stack([sub[i].tokens.tokens for i in idxs])
                logits = model.finetune_forward(tokens, head)
                parts.append(ops.scale(ops.cross_entropy(logits, labels[batch][idxs]), len(idxs) / len(sub)))
            loss = parts[0]
            for p in parts[1:]:
                loss = ops.add(loss, p)
        loss.backward()
        grads = {k: p.grad for k, p in trainable.items() if p.grad is not None}
        lr = poly_decay_lr(step - 1, cfg.steps, cfg.lr)
        adam_step(param_arrays(trainable), grads, state, step, AdamHyper(lr, weight_decay=cfg.weight_decay))
        for p in trainable.values():
            release_grad(p)

    eval_feats = pooled_features(model, clips) if feats is None else feats
    logits = eval_feats @ head["classifier.weight"].data + head["classifier.bias"].data
    pred = logits.argmax(axis=-1)
    eval_idx = test_idx if len(test_idx) else train_idx
    report = {
        "accuracy": float((pred[eval_idx] == labels[eval_idx]).mean()),
        "train_accuracy": float((pred[train_idx] == labels[train_idx]).mean()),
        "n_train": int(len(train_idx)),
        "n_test": int(len(test_idx)),
        "n_classes": n_classes,
        "degenerate": bool(degenerate),
        "encoder_frozen": not cfg.unfreeze_encoder,
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        params = param_arrays(model.params)
        params.update(param_arrays(head))
        save_checkpoint(out_dir / "classifier", params, {"model": model.cfg.to_dict(), "normalizer": {"mean": normalizer[0], "std": normalizer[1]}, "finetune": asdict(cfg), "report": report})
        (out_dir / "report.json").write_text(json.dumps(report, indent=1))
    return report


def finetune_from_dir(ckpt, data_dir, labels_csv, cfg: FinetuneConfig, out_dir=None) -> dict:
    model, normalizer, _ = load_model(ckpt)
    data_dir = Path(data_dir)
    label_map = read_labels(labels_csv)
    paths = [data_dir / rel for rel in label_map]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise TrainingError(f"labelled clips missing on disk: {missing[:3]}")
    clips, _ = load_clips(data_dir, model.cfg.mode, normalizer, paths)
    return finetune(model, clips, list(label_map.values()), cfg, out_dir, normalizer)
