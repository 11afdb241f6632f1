"""Run configuration: a flat key=value config file plus CLI overrides.

Every behavioral decision in the trainer surfaces here as a key so a run
is fully described by its config snapshot (stored in checkpoints and
reports).
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields


@dataclass
class RunConfig:
    # data
    dataset: str = "synthetic"
    data_dir: str = ""
    sensitive: str = "gender"
    split_ratios: tuple = (0.8, 0.1, 0.1)
    synth_m: int = 300
    synth_n: int = 150
    synth_c: int = 2
    synth_bias: float = 0.8
    synth_n_per_user: int = 30
    synth_shared_frac: float = 0.5

    # model
    d: int = 64
    L: int = 3
    lr: float = 0.001
    weight_decay: float = 0.001
    batch_size: int = 0  # 0 = resolve per dataset
    cold_start: str = "copy"  # debiased layer-0 init: copy | random

    # objective
    lam_r: float = 1.0
    lam_c: float = 0.1
    lam_d: float = 30.0
    tau: float = 0.2
    noise_mode: str = "logit"  # logit | log-gumbel
    mask_refresh: str = "step"  # step | epoch
    contrastive_scope: str = "full"  # full | batch
    hsic_scope: str = "batch-users"  # batch-users | edges
    bandwidth_policy: str = "median"  # median | fixed
    sigma_fixed: float = 1.0

    # schedule
    epochs: int = 300
    patience: int = 10
    pretrain_epochs: int = 200
    pretrain_patience: int = 10
    select_rule: str = "utility"  # utility | dp-capped
    select_k: int = 10
    dp_cap: float = -1.0  # dp-capped rule: reject epochs with val DP above this

    # experiment
    variant: str = "full"  # full | no_dl | no_ep | no_fm | base
    ks: tuple = (10, 20, 30)
    seed: int = 0
    runs: int = 10
    out: str = "runs"

    VARIANTS = ("full", "no_dl", "no_ep", "no_fm", "base")

    def __post_init__(self):
        if self.variant not in self.VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        for name in ("d", "L", "lr", "tau", "epochs", "pretrain_epochs",
                     "select_k", "runs"):
            if getattr(self, name) <= 0 and name != "L":
                raise ValueError(f"{name} must be positive")
        if self.L < 0:
            raise ValueError("L must be >= 0")
        for name in ("lam_r", "lam_c", "lam_d", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def resolved_batch_size(self) -> int:
        if self.batch_size > 0:
            return self.batch_size
        return {"movielens": 2048, "lastfm": 4096}.get(self.dataset, 256)

    def resolved_data_dir(self) -> str:
        if self.data_dir:
            return self.data_dir
        root = os.environ.get("FAIRDDA_DATA_ROOT", "")
        if not root and self.dataset != "synthetic":
            raise ValueError("set data_dir or FAIRDDA_DATA_ROOT for file datasets")
        return os.path.join(root, self.dataset) if root else ""

    def seeds(self):
        return list(range(self.seed, self.seed + self.runs))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        d["ks"] = list(self.ks)
        return d


def _coerce(raw: str, like):
    if isinstance(like, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        elem = like[0] if like else 0
        return tuple(type(elem)(p) if not isinstance(elem, float) else float(p)
                     for p in parts)
    return raw


def parse_config_file(path: str) -> dict:
    """key = value lines; # starts a comment; unknown keys are an error."""
    raw = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path} line {lineno}: expected key = value")
            key, value = line.split("=", 1)
            raw[key.strip()] = value.strip()
    return raw


def build_config(file_path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then config file, then CLI overrides (strongest)."""
    values = {}
    defaults = RunConfig()
    known = {f.name for f in fields(RunConfig) if f.name != "VARIANTS"}
    for source in (parse_config_file(file_path) if file_path else {},
                   overrides or {}):
        for key, val in source.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            if val is None:
                continue
            current = getattr(defaults, key)
            values[key] = _coerce(val, current) if isinstance(val, str) else val
    return RunConfig(**values)
