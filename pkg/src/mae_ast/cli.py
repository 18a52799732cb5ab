"""``mae-ast`` command line entry point.

Exit status: 0 on success, 2 on a usage/config error (the offending key is
named on stderr), 1 on any runtime fault.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import features
from .config import ConfigError, load_config

log = logging.getLogger("mae_ast")


def _features(args) -> int:
    src, dst = Path(args.inp), Path(args.out)
    wavs = sorted(src.rglob("*.wav"))
    if not wavs:
        raise features.AudioError(f"no .wav files under {src}")
    specs = []
    for wav in wavs:
        spec = features.log_mel(features.load_wav(wav))
        target = dst / wav.relative_to(src).with_suffix(".fbank")
        target.parent.mkdir(parents=True, exist_ok=True)
        features.write_fbank(target, spec)
        specs.append(spec)
    mean, std = features.fit_normalizer(specs)
    if not std > 0:
        raise features.AudioError("degenerate corpus: standard deviation is zero")
    stats = {"mean": mean, "std": std, "n_clips": len(specs), "n_frames": int(sum(s.n_frames for s in specs))}
    (dst / "stats.json").write_text(json.dumps(stats, indent=1))
    print(json.dumps(stats))
    return 0


def _pretrain(args) -> int:
    from .trainer import pretrain

    cfg = load_config(args.config).require("pretrain")
    res = pretrain(cfg["data"], cfg.model(), cfg.train(), cfg["out"])
    last = res.metrics[-1] if res.metrics else {}
    print(json.dumps({"checkpoint": str(res.checkpoint), "steps": len(res.metrics), "final": last}))
    return 0


def _finetune(args) -> int:
    from .trainer import finetune_from_dir

    cfg = load_config(args.config).require("finetune")
    report = finetune_from_dir(args.ckpt, cfg["data"], cfg["labels"], cfg.finetune(), cfg["out"])
    print(json.dumps(report))
    return 0


def _benchmark(args) -> int:
    from .bench import memory_ratio, run_bench

    cfg = load_config(args.config).require("benchmark")
    report = run_bench(cfg.bench(), cfg.loss())
    Path(args.report).write_text(report.to_json())
    if args.csv:
        path = Path(args.csv)
        header = not path.exists() or path.stat().st_size == 0
        with path.open("a") as fh:
            fh.write(report.csv_row(header=header))
    print(json.dumps({"speedup": report.speedup, "flops_ratio": report.flops_ratio, "memory_ratio": memory_ratio(report)}))
    return 0


def mask_stats(strategy: str, n: int, p: float, trials: int, rows: int | None = None, seed: int = 0) -> dict:
    from .masking import MaskStrategy, clustering_stat, sample_mask

    strategy = MaskStrategy(strategy)
    if rows is None:
        rows = 8 if strategy.token_kind == "patch" else 1
    if n % rows:
        raise ValueError(f"--n {n} is not a multiple of {rows} channel rows")
    fractions, clusters = [], []
    for t in range(trials):
        plan = sample_mask(strategy, n // rows, rows, p, np.random.default_rng([seed, t]))
        fractions.append(plan.fraction)
        clusters.append(clustering_stat(plan, rows))
    return {
        "strategy": strategy.value,
        "N": n,
        "p": p,
        "trials": trials,
        "mean_fraction": float(np.mean(fractions)),
        "std_fraction": float(np.std(fractions)),
        "clustering_stat": float(np.mean(clusters)),
    }


def _mask_stats(args) -> int:
    print(json.dumps(mask_stats(args.strategy, args.n, args.p, args.trials, args.rows, args.seed)))
    return 0


def inspect_checkpoint(path) -> dict:
    from .model import ModelConfig, param_count
    from .nn.checkpoint import read_manifest, read_sidecar

    manifest = read_manifest(path)
    sidecar = read_sidecar(path)
    n = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in manifest["params"])
    out = {"n_params": n, "params": manifest["params"], "sidecar": sidecar}
    if "model" in sidecar:
        out["closed_form_params"] = param_count(ModelConfig.from_dict(sidecar["model"]))
    return out


def _inspect(args) -> int:
    print(json.dumps(inspect_checkpoint(args.ckpt), indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mae-ast", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="convert a directory of 16 kHz mono wavs to .fbank files")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_features)

    p = sub.add_parser("pretrain", help="masked pretraining")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_pretrain)

    p = sub.add_parser("finetune", help="train a linear head on mean-pooled encoder states")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True)
    p.set_defaults(func=_finetune)

    p = sub.add_parser("benchmark", help="speed/memory comparison against the mask-token baseline")
    p.add_argument("--config", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--csv", help="append a summary row to this CSV file")
    p.set_defaults(func=_benchmark)

    p = sub.add_parser("mask-stats", help="empirical statistics of a masking strategy")
    p.add_argument("--strategy", required=True, choices=["patch-random", "patch-chunked", "frame-random", "frame-chunked"])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--rows", type=int, default=None, help="channel rows of the token grid (8 for patch, 1 for frame)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_mask_stats)

    p = sub.add_parser("inspect-ckpt", help="print a checkpoint manifest")
    p.add_argument("ckpt")
    p.set_defaults(func=_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any fault maps to exit 1
        log.debug("fault", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
