"""Flat key=value run configuration.

One key per line, ``#`` starts a comment. Every key has a typed default;
CLI flags mirror the keys one-to-one and override file values. The
effective merged config is rendered back to text (sorted keys) and
written into each run directory, so a run can always be replayed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from .errors import ConfigError

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


@dataclass
class RunConfig:
    # reproducibility
    seed: int = 1
    # data generation
    num_concepts: int = 8
    d_img: int = 16
    patch_count: int = 32
    concepts_per_image: int = 3
    noise_std: float = 0.1
    n_train: int = 2000
    mismatch_rate: float = 0.0
    incomplete_rate: float = 0.0
    drop_fraction: float = 0.5
    n_eval: int = 128
    clean_fraction: float = 0.05
    corpus: str = ""  # optional path; empty means generate from the keys above
    # model
    d_txt: int = 16
    d_embed: int = 16
    blocks: int = 2
    mae_blocks: int = 1
    captioner_blocks: int = 2
    mask_ratio: float = 0.5
    use_positional: bool = True
    poisson_lambda: float = 3.0
    max_caption_len: int = 24
    temperature_init: float = 0.07
    top_k: int = 5
    min_frequency: int = 5
    # stage schedule
    E_e: int = 2
    E_t: int = 8
    E_f: int = 4
    captioner_epochs: int = 4
    alpha: float = 1.0
    beta: float = 1.0
    lam: float = 0.5  # config key: lambda
    batch_size: int = 64
    # optimizer
    base_rate: float = 0.003
    min_rate: float = 0.0
    captioner_lr: float = 0.0003
    weight_decay: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # noise model
    gmm_max_iters: int = 100
    gmm_tol: float = 1e-6

    def validate(self) -> "RunConfig":
        if not (0.0 <= self.lam < 1.0):
            raise ConfigError("lambda must be in [0, 1)")
        if min(self.E_e, self.E_t, self.E_f, self.captioner_epochs) < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (0.0 <= self.mask_ratio < 1.0):
            raise ConfigError("mask_ratio must be in [0, 1)")
        if self.n_train < 1:
            raise ConfigError("n_train must be >= 1")
        return self


# config-file key -> dataclass attribute ("lambda" is a Python keyword)
KEY_TO_ATTR = {
    **{f.name: f.name for f in fields(RunConfig) if f.name != "lam"},
    "lambda": "lam",
}
ATTR_TO_KEY = {attr: key for key, attr in KEY_TO_ATTR.items()}


def _parse_value(key: str, raw: str, target_type: type):
    raw = raw.strip()
    try:
        if target_type is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(
            f"bad value for {key}: {raw!r} (expected {target_type.__name__})"
        ) from exc


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    types = {f.name: f.type for f in fields(RunConfig)}
    py_types = {"int": int, "float": float, "bool": bool, "str": str}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in KEY_TO_ATTR:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        attr = KEY_TO_ATTR[key]
        target = py_types[str(types[attr])] if str(types[attr]) in py_types \
            else types[attr]
        setattr(cfg, attr, _parse_value(key, raw, target))
    return cfg.validate()


def load_config(path: str, base: RunConfig | None = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, base)


def render_config(cfg: RunConfig) -> str:
    lines = []
    for f in sorted(fields(RunConfig), key=lambda f: ATTR_TO_KEY[f.name]):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{ATTR_TO_KEY[f.name]} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(render_config(cfg).encode("utf-8")).hexdigest()
