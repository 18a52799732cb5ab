"""Flat ``key = value`` run configuration (one pair per line, ``#`` comments)."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Callable

from .bench import BenchConfig
from .masking import MaskStrategy
from .model import ModelConfig, Variant
from .objectives import LossConfig
from .tokenizer import TokenizationMode
from .trainer import FinetuneConfig, TrainConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in {"1", "true", "yes", "on"}:
        return True
    if low in {"0", "false", "no", "off"}:
        return False
    raise ValueError(f"not a boolean: {raw!r}")


# key -> (parser, default); default None means "no default"
KEYS: dict[str, tuple[Callable[[str], Any], Any]] = {
    "seed": (int, 0),
    # paths
    "data": (str, None),
    "out": (str, None),
    "labels": (str, None),
    # model
    "enc_layers": (int, 6),
    "dec_layers": (int, 2),
    "d": (int, 768),
    "heads": (int, 12),
    "mode": (str, "patch"),
    "variant": (str, Variant.MAE_AST.value),
    # optimisation
    "total_steps": (int, None),
    "max_tokens_per_batch": (int, 15872),
    "lr0": (float, 1e-4),
    "weight_decay": (float, 0.01),
    "lr_power": (float, 1.0),
    "warmup": (int, 0),
    "log_every": (int, 1),
    "ckpt_every": (int, 1000),
    "overfit": (_bool, False),
    "overfit_clips": (int, 4),
    # loss and masking
    "loss": (str, "joint"),
    "lambda": (float, 10.0),
    "mask_strategy": (str, MaskStrategy.PATCH_CHUNKED.value),
    "mask_p": (float, 0.75),
    # fine-tuning
    "ft_steps": (int, 300),
    "ft_lr": (float, 1e-2),
    "ft_weight_decay": (float, 0.0),
    "ft_batch_size": (int, 32),
    "holdout_fraction": (float, 0.2),
    "unfreeze_encoder": (_bool, False),
    # benchmark
    "n_tokens": (int, 496),
    "baseline_layers": (int, 14),
    "batch_clips": (int, 32),
    "micro_batch": (int, 8),
    "n_batches": (int, 3),
    "bench_warmup": (int, 3),
    "batches_per_epoch": (int, 0),
    "threads": (int, None),
}

REQUIRED = {
    "pretrain": ("data", "out", "total_steps"),
    "finetune": ("data", "labels", "out"),
    "benchmark": ("threads",),
}


class RunConfig:
    def __init__(self, values: dict[str, Any], explicit: set[str]):
        self._values = values
        self.explicit = explicit

    def __getitem__(self, key: str):
        value = self._values.get(key)
        if value is None:
            raise ConfigError(key, "required key missing")
        return value

    def get(self, key: str, default=None):
        value = self._values.get(key)
        return default if value is None else value

    def require(self, command: str) -> "RunConfig":
        for key in REQUIRED.get(command, ()):
            if self._values.get(key) is None:
                raise ConfigError(key, f"required key missing for '{command}'")
        return self

    # typed views ----------------------------------------------------------
    def model(self) -> ModelConfig:
        try:
            mode = TokenizationMode.parse(self["mode"])
        except ValueError as exc:
            raise ConfigError("mode", str(exc)) from None
        try:
            variant = Variant(self["variant"])
        except ValueError as exc:
            raise ConfigError("variant", str(exc)) from None
        kw = dict(d=self["d"], heads=self["heads"], mode=mode, d_in=mode.d_in)
        try:
            if variant is Variant.WITH_MASK_TOKENS:
                return ModelConfig.baseline(self["enc_layers"] + self["dec_layers"], **kw)
            return ModelConfig(self["enc_layers"], self["dec_layers"], **kw)
        except ValueError as exc:
            raise ConfigError("d" if "divisible" in str(exc) else "enc_layers", str(exc)) from None

    def loss(self) -> LossConfig:
        try:
            return LossConfig.from_name(self["loss"], self["lambda"])
        except ValueError as exc:
            raise ConfigError("loss", str(exc)) from None

    def train(self) -> TrainConfig:
        try:
            strategy = MaskStrategy(self["mask_strategy"])
        except ValueError as exc:
            raise ConfigError("mask_strategy", str(exc)) from None
        return TrainConfig(
            total_steps=self["total_steps"],
            max_tokens_per_batch=self["max_tokens_per_batch"],
            lr0=self["lr0"],
            weight_decay=self["weight_decay"],
            lr_power=self["lr_power"],
            warmup=self["warmup"],
            seed=self["seed"],
            loss=self.loss(),
            mask_strategy=strategy,
            mask_p=self["mask_p"],
            log_every=self["log_every"],
            ckpt_every=self["ckpt_every"],
            overfit=self["overfit"],
            overfit_clips=self["overfit_clips"],
        )

    def finetune(self) -> FinetuneConfig:
        return FinetuneConfig(
            steps=self["ft_steps"],
            lr=self["ft_lr"],
            weight_decay=self["ft_weight_decay"],
            holdout_fraction=self["holdout_fraction"],
            batch_size=self["ft_batch_size"],
            seed=self["seed"],
            unfreeze_encoder=self["unfreeze_encoder"],
        )

    def bench(self) -> BenchConfig:
        return BenchConfig(
            d=self.get("d", 256) if "d" in self.explicit else 256,
            heads=self.get("heads", 4) if "heads" in self.explicit else 4,
            n_tokens=self["n_tokens"],
            p=self["mask_p"],
            enc_layers=self.get("enc_layers") if "enc_layers" in self.explicit else 12,
            dec_layers=self["dec_layers"],
            baseline_layers=self["baseline_layers"],
            batch_clips=self["batch_clips"],
            micro_batch=self["micro_batch"],
            n_batches=self["n_batches"],
            warmup=self["bench_warmup"],
            batches_per_epoch=self["batches_per_epoch"],
            threads=self.get("threads"),
            seed=self["seed"],
        )


def parse_config(text: str) -> RunConfig:
    values = {k: default for k, (_, default) in KEYS.items()}
    explicit: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(key, "unknown key")
        if key in explicit:
            raise ConfigError(key, "duplicate key")
        parser = KEYS[key][0]
        try:
            values[key] = parser(raw)
        except ValueError as exc:
            raise ConfigError(key, f"bad value {raw!r} ({exc})") from None
        explicit.add(key)
    return RunConfig(values, explicit)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from None
    return parse_config(text)
