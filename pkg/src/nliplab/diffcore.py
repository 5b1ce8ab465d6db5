"""Differentiable-parameter substrate.

Holds every learnable tensor of the model graphs together with its
gradient buffer, applies bias-corrected adaptive-moment updates, produces
the warmup+cosine learning-rate curve and round-trips everything through
a versioned binary checkpoint.

All storage is float64; the gradient-check suites rely on that.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericalError, ParseError
from .seeding import rng_for

CHECKPOINT_MAGIC = b"NLIPCKPT"
CHECKPOINT_VERSION = 1

# Parameters matching any of these substrings are exempt from weight decay
# (bias/normalization/embedding-style tensors and the temperature).
_NO_DECAY_MARKERS = ("bias", "embed", "pos", "cls", "mask_token", "tau")


@dataclass
class ParamStore:
    """Named float64 tensors with same-shape gradient buffers.

    ``step`` counts optimizer steps and doubles as the parameter version
    used to invalidate caches keyed on model state.
    """

    params: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise ContractError(f"parameter {name!r} already registered")
        arr = np.asarray(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        return arr

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        self.grads[name] += grad

    def names(self) -> list[str]:
        return list(self.params)

    def copy(self) -> "ParamStore":
        return ParamStore(
            params={k: v.copy() for k, v in self.params.items()},
            grads={k: v.copy() for k, v in self.grads.items()},
            m={k: v.copy() for k, v in self.m.items()},
            v={k: v.copy() for k, v in self.v.items()},
            step=self.step,
        )

    def reset_moments(self) -> None:
        for name in self.params:
            self.m[name][...] = 0.0
            self.v[name][...] = 0.0


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    # name -> (lo, hi) applied after the update, e.g. the temperature clamp
    clamps: dict[str, tuple[float, float]] = field(default_factory=dict)


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to ``base_rate`` then half-cosine decay to ``min_rate``."""

    base_rate: float
    warmup_steps: int
    total_steps: int
    min_rate: float = 0.0

    def __post_init__(self):
        if self.base_rate <= 0:
            raise ContractError("base_rate must be positive")
        if self.warmup_steps < 0:
            raise ContractError("warmup_steps must be >= 0")
        if self.total_steps <= self.warmup_steps:
            raise ContractError("total_steps must exceed warmup_steps")
        if self.min_rate < 0:
            raise ContractError("min_rate must be >= 0")


def decays(name: str) -> bool:
    """Whether weight decay applies to the named parameter."""
    return not any(marker in name for marker in _NO_DECAY_MARKERS)


# learned constant vectors (pooling slot, positions, mask token) start near
# zero so a fresh model's pooled embeddings are content-dominated, not
# constant-dominated; matches common transformer practice
SMALL_INIT_SCALE = 0.02
_SMALL_INIT_MARKERS = ("cls", "pos", "mask_token")


def init_params(specs: dict[str, tuple[int, ...]], root_seed: int,
                zero: tuple[str, ...] = ("bias",)) -> ParamStore:
    """Build a store from ``name -> shape``.

    Weight matrices are uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)];
    token-embedding tables use their vector length as fan. Names matching
    ``zero`` markers start at zero; learned constant vectors start at the
    small scale above. Each parameter draws from its own named stream, so
    registration order is irrelevant.
    """
    store = ParamStore()
    for name, shape in specs.items():
        if any(marker in name for marker in zero) or shape == ():
            store.add(name, np.zeros(shape))
            continue
        if any(m in name for m in _SMALL_INIT_MARKERS):
            scale = SMALL_INIT_SCALE
        else:
            fan_in = shape[-1] if "embed" in name else shape[0]
            scale = 1.0 / np.sqrt(fan_in)
        rng = rng_for(root_seed, "init", name)
        store.add(name, rng.uniform(-scale, scale, size=shape))
    return store


def zero_grads(store: ParamStore) -> ParamStore:
    """Zero every gradient buffer in place; parameters untouched."""
    for g in store.grads.values():
        g[...] = 0.0
    return store


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at ``step`` in [0, total_steps]."""
    if step < 0 or step > schedule.total_steps:
        raise ContractError(
            f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.base_rate * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / span
    cos = 0.5 * (1.0 + np.cos(np.pi * progress))
    return schedule.min_rate + (schedule.base_rate - schedule.min_rate) * cos


def sgd_adam_step(store: ParamStore, rate: float,
                  config: AdamConfig = AdamConfig()) -> ParamStore:
    """One bias-corrected adaptive-moment update over all parameters.

    Decoupled weight decay is applied only where :func:`decays` says so.
    Raises :class:`NumericalError` naming the first parameter with a
    non-finite gradient.
    """
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name!r}")
    t = store.step + 1
    bc1 = 1.0 - config.beta1 ** t
    bc2 = 1.0 - config.beta2 ** t
    for name, p in store.params.items():
        g = store.grads[name]
        m = store.m[name]
        v = store.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        if config.weight_decay and decays(name):
            update = update + config.weight_decay * p
        p -= rate * update
        if name in config.clamps:
            lo, hi = config.clamps[name]
            np.clip(p, lo, hi, out=p)
    store.step = t
    return store


def save_checkpoint(store: ParamStore, path: str) -> None:
    """Versioned binary dump: params, then moments, then the step counter."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for section in (store.params, store.m, store.v):
            fh.write(struct.pack("<I", len(section)))
            for name, arr in section.items():
                encoded = name.encode("utf-8")
                fh.write(struct.pack("<I", len(encoded)))
                fh.write(encoded)
                fh.write(struct.pack("<I", arr.ndim))
                for dim in arr.shape:
                    fh.write(struct.pack("<I", dim))
                fh.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        fh.write(struct.pack("<Q", store.step))


def load_checkpoint(path: str) -> ParamStore:
    """Bit-exact inverse of :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)

    def take(fmt: str):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise ParseError(f"{path}: truncated checkpoint")
        out = struct.unpack_from(fmt, blob, off)
        off += size
        return out

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    sections = []
    for _ in range(3):
        (count,) = take("<I")
        section: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = take("<I")
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = take("<I")
            shape = tuple(take("<I")[0] for _ in range(ndim))
            nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
            if off + nbytes > len(blob):
                raise ParseError(f"{path}: truncated checkpoint")
            arr = np.frombuffer(blob[off:off + nbytes],
                                dtype=np.float64).reshape(shape).copy()
            off += nbytes
            section[name] = arr
        sections.append(section)
    (step,) = take("<Q")
    params, m, v = sections
    store = ParamStore(
        params=params,
        grads={k: np.zeros_like(a) for k, a in params.items()},
        m=m,
        v=v,
        step=int(step),
    )
    return store
