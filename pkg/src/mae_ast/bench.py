"""Wall-clock and peak tensor-memory comparison of the encoder/decoder model
against the mask-token baseline, on synthetic token batches."""

from __future__ import annotations

import csv
import io
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from .masking import mask_random
from .model import MaeAst, ModelConfig, flops_estimate
from .nn.tensor import TRACKER, release_grad
from .objectives import LossConfig, joint_loss
from .synthetic import noise_tokens
from .tokenizer import TokenizationMode


class BenchError(ValueError):
    pass


@dataclass(frozen=True)
class BenchConfig:
    d: int = 256
    heads: int = 4
    n_tokens: int = 496
    p: float = 0.75
    enc_layers: int = 12
    dec_layers: int = 2
    baseline_layers: int = 14
    batch_clips: int = 32
    micro_batch: int = 8
    n_batches: int = 3
    warmup: int = 3
    batches_per_epoch: int = 0  # 0: use n_batches
    threads: Optional[int] = None
    seed: int = 0

    def pair(self) -> tuple[ModelConfig, ModelConfig]:
        mode = TokenizationMode.patch()
        mae = ModelConfig(self.enc_layers, self.dec_layers, self.d, self.heads, mode)
        base = ModelConfig.baseline(self.baseline_layers, d=self.d, heads=self.heads, mode=mode)
        return mae, base


@dataclass
class RunStats:
    sec_per_batch: float
    sec_per_epoch: float
    peak_bytes: int
    activation_peak_bytes: int
    batch_seconds: list[float] = field(default_factory=list)


@dataclass
class BenchReport:
    mae: dict
    baseline: dict
    sec_per_epoch: dict
    peak_bytes: dict
    speedup: float
    flops_ratio: float
    thread_count: int
    precision: str
    N: int
    p: float
    d: int
    heads: int
    layer_split: dict
    batch_clips: int
    micro_batch: int
    n_batches: int
    warmup: int
    detail: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def csv_row(self, header: bool = False) -> str:
        cols = ["N", "p", "d", "thread_count", "speedup", "flops_ratio", "mem_ratio", "mae_sec", "baseline_sec", "mae_bytes", "baseline_bytes"]
        row = [self.N, self.p, self.d, self.thread_count, self.speedup, self.flops_ratio, memory_ratio(self),
               self.sec_per_epoch["mae"], self.sec_per_epoch["baseline"], self.peak_bytes["mae"], self.peak_bytes["baseline"]]
        buf = io.StringIO()
        w = csv.writer(buf)
        if header:
            w.writerow(cols)
        w.writerow(row)
        return buf.getvalue()


def memory_ratio(report: BenchReport) -> float:
    """Baseline peak bytes over encoder/decoder peak bytes."""
    return report.peak_bytes["baseline"] / report.peak_bytes["mae"]


def _time_model(model: MaeAst, cfg: BenchConfig, loss_cfg: LossConfig) -> RunStats:
    n, din = cfg.n_tokens, model.cfg.d_in
    times, peaks, act_peaks = [], [], []
    for b in range(cfg.warmup + cfg.n_batches):
        tokens = noise_tokens(cfg.batch_clips, n, din, seed=cfg.seed * 1000 + b)
        plans = [mask_random(n, cfg.p, np.random.default_rng([cfg.seed, b, i])) for i in range(cfg.batch_clips)]
        unmasked = np.stack([pl.unmasked for pl in plans])
        masked = np.stack([pl.masked for pl in plans])
        base_live = TRACKER.reset_peak()
        t0 = time.perf_counter()
        for s in range(0, cfg.batch_clips, cfg.micro_batch):
            sl = slice(s, s + cfg.micro_batch)
            out = model.pretrain_forward(tokens[sl], unmasked[sl], masked[sl])
            total, _, _ = joint_loss(out, loss_cfg)
            del out
            total.backward()
            del total
        elapsed = time.perf_counter() - t0
        peak = TRACKER.peak
        for p in model.params.values():
            release_grad(p)
        if b >= cfg.warmup:
            times.append(elapsed)
            peaks.append(peak)
            act_peaks.append(peak - base_live)
    sec = statistics.median(times)
    per_epoch = cfg.batches_per_epoch or cfg.n_batches
    return RunStats(sec, sec * per_epoch, max(peaks), max(act_peaks), times)


def run_bench(cfg: BenchConfig, loss_cfg: Optional[LossConfig] = None) -> BenchReport:
    """Forward+backward timing and peak live-tensor bytes for the model pair in ``cfg``."""
    if cfg.threads is None or cfg.threads < 1:
        raise BenchError("benchmark thread count must be pinned (threads >= 1)")
    if not 0.0 <= cfg.p < 1.0:
        raise BenchError(f"mask ratio {cfg.p} outside [0, 1)")
    if cfg.micro_batch < 1 or cfg.batch_clips < 1 or cfg.n_batches < 1:
        raise BenchError("batch sizes and batch counts must be positive")
    loss_cfg = loss_cfg or LossConfig()
    mae_cfg, base_cfg = cfg.pair()
    with threadpool_limits(limits=cfg.threads):
        stats = {}
        for name, mcfg in (("mae", mae_cfg), ("baseline", base_cfg)):
            model = MaeAst.init(mcfg, seed=cfg.seed)
            stats[name] = _time_model(model, cfg, loss_cfg)
            del model
        threads = _blas_threads()
    mae, base = stats["mae"], stats["baseline"]
    return BenchReport(
        mae=mae_cfg.to_dict(),
        baseline=base_cfg.to_dict(),
        sec_per_epoch={"mae": mae.sec_per_epoch, "baseline": base.sec_per_epoch},
        peak_bytes={"mae": mae.peak_bytes, "baseline": base.peak_bytes},
        speedup=base.sec_per_epoch / mae.sec_per_epoch,
        flops_ratio=flops_estimate(base_cfg, cfg.n_tokens, cfg.p) / flops_estimate(mae_cfg, cfg.n_tokens, cfg.p),
        thread_count=cfg.threads if threads is None else threads,
        precision="float32",
        N=cfg.n_tokens,
        p=cfg.p,
        d=cfg.d,
        heads=cfg.heads,
        layer_split={"mae": [cfg.enc_layers, cfg.dec_layers], "baseline": [0, cfg.baseline_layers]},
        batch_clips=cfg.batch_clips,
        micro_batch=cfg.micro_batch,
        n_batches=cfg.n_batches,
        warmup=cfg.warmup,
        detail={
            "sec_per_batch": {"mae": mae.sec_per_batch, "baseline": base.sec_per_batch},
            "batch_seconds": {"mae": mae.batch_seconds, "baseline": base.batch_seconds},
            "activation_peak_bytes": {"mae": mae.activation_peak_bytes, "baseline": base.activation_peak_bytes},
        },
    )


def _blas_threads() -> Optional[int]:
    counts = [lib["num_threads"] for lib in threadpool_info() if lib.get("user_api") == "blas"]
    return max(counts) if counts else None
