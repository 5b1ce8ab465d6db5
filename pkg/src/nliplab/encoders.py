"""Masked image encoder, reconstruction decoder and text encoder.

The image path projects visible patches, prepends a learned [CLS] token,
runs single-head attention blocks and pools [CLS] into a unit-norm global
embedding. Reconstruction queries (learned mask token + position) cross-
attend to the visible token states and predict the normalized original
patches. The text path embeds tokens (position 0, the BOS token, is the
pooling slot) and produces the matching unit-norm global embedding.

Forward functions return a dict carrying every cache the matching
backward needs; backwards accumulate parameter gradients into the store
and return gradients for upstream activations.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import net
from .data_synth import MASK, MAX_TEXT_LEN
from .diffcore import ParamStore, init_params
from .errors import ContractError

# running count of (visible patch token x attention block) evaluations in
# the image encoder; basis of the masking-throughput accounting
_token_block_evals = 0


def reset_token_block_evals() -> None:
    global _token_block_evals
    _token_block_evals = 0


def token_block_evals() -> int:
    return _token_block_evals


@dataclass(frozen=True)
class ModelConfig:
    d_img: int
    d_txt: int
    d_embed: int
    vocab: tuple[str, ...]
    patch_count: int
    blocks: int = 2
    mask_ratio: float = 0.5
    use_positional: bool = True
    mae_blocks: int = 1
    captioner_blocks: int = 2
    poisson_lambda: float = 3.0
    temperature_init: float = 0.07
    max_text_len: int = MAX_TEXT_LEN

    def __post_init__(self):
        if self.d_embed <= 0:
            raise ContractError("d_embed must be positive")
        if not (0.0 <= self.mask_ratio < 1.0):
            raise ContractError("mask_ratio must be in [0, 1)")
        if self.blocks < 0:
            raise ContractError("blocks must be >= 0")

    @property
    def token_ids(self) -> dict[str, int]:
        return _token_id_map(self.vocab)


@lru_cache(maxsize=None)
def _token_id_map(vocab: tuple[str, ...]) -> dict[str, int]:
    return {tok: i for i, tok in enumerate(vocab)}


def tokens_to_ids(tokens, config: ModelConfig) -> np.ndarray:
    ids = config.token_ids
    try:
        return np.array([ids[t] for t in tokens], dtype=np.int64)
    except KeyError as exc:
        raise ContractError(f"token {exc.args[0]!r} not in vocabulary") from exc


@dataclass(frozen=True)
class MaskPlan:
    visible_indices: np.ndarray
    masked_indices: np.ndarray
    ratio: float
    seed: int

    def __post_init__(self):
        vis = set(int(i) for i in self.visible_indices)
        msk = set(int(i) for i in self.masked_indices)
        total = len(self.visible_indices) + len(self.masked_indices)
        if vis & msk or vis | msk != set(range(total)):
            raise ContractError("mask plan must partition the patch indices")


@dataclass(frozen=True)
class EmbeddingPair:
    pooled: np.ndarray  # (d_embed,), unit norm
    token_states: np.ndarray  # (n, width)


def param_specs(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Shapes of every learnable tensor, keyed by hierarchical name."""
    di, dt, de = config.d_img, config.d_txt, config.d_embed
    vocab_size = len(config.vocab)
    specs: dict[str, tuple[int, ...]] = {
        "img.patch_proj.w": (di, di),
        "img.patch_proj.bias": (di,),
        "img.cls": (di,),
        "img.pos": (config.patch_count + 1, di),
        "img.proj.w": (di, de),
        "img.proj.bias": (de,),
        "dec.mask_token": (di,),
        "dec.pos": (config.patch_count, di),
        "dec.head.w": (di, di),
        "dec.head.bias": (di,),
        "txt.tok_embed": (vocab_size, dt),
        "txt.pos": (config.max_text_len, dt),
        "txt.proj.w": (dt, de),
        "txt.proj.bias": (de,),
        "cap.tok_embed": (vocab_size, dt),
        "cap.pos": (config.max_text_len, dt),
        "cap.img_proj.w": (di, dt),
        "cap.img_proj.bias": (dt,),
        "cap.head.w": (dt, vocab_size),
        "cap.head.bias": (vocab_size,),
    }

    def block(prefix: str, d: int, cross: bool = False) -> None:
        parts = ["attn"] if not cross else ["self", "cross"]
        for part in parts:
            for w in ("wq", "wk", "wv", "wo"):
                specs[f"{prefix}.{part}.{w}"] = (d, d)
            for b in ("q_bias", "k_bias", "v_bias", "o_bias"):
                specs[f"{prefix}.{part}.{b}"] = (d,)
        specs[f"{prefix}.mlp.w1"] = (d, 2 * d)
        specs[f"{prefix}.mlp.b1_bias"] = (2 * d,)
        specs[f"{prefix}.mlp.w2"] = (2 * d, d)
        specs[f"{prefix}.mlp.b2_bias"] = (d,)

    for b in range(config.blocks):
        block(f"img.blk{b}", di)
        block(f"txt.blk{b}", dt)
    for b in range(config.mae_blocks):
        block(f"dec.blk{b}", di)
    for b in range(config.captioner_blocks):
        block(f"cap.blk{b}", dt, cross=True)
    return specs


def create_store(config: ModelConfig, seed: int) -> ParamStore:
    store = init_params(param_specs(config), seed)
    store.add("tau", np.asarray(config.temperature_init, dtype=np.float64))
    return store


# ---------------------------------------------------------------------------
# masking

def mask_patches(patch_grid: np.ndarray, ratio: float,
                 seed: int) -> tuple[np.ndarray, MaskPlan]:
    """Mask a uniformly random subset of round(ratio * P) patches."""
    if not (0.0 <= ratio < 1.0):
        raise ContractError("ratio must be in [0, 1)")
    p = patch_grid.shape[0]
    n_masked = int(round(ratio * p))
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(p)
    masked = np.sort(perm[:n_masked])
    visible = np.sort(perm[n_masked:])
    plan = MaskPlan(visible_indices=visible, masked_indices=masked,
                    ratio=ratio, seed=seed)
    return patch_grid[visible], plan


def full_plan(patch_count: int) -> MaskPlan:
    """Ratio-0 plan: every patch visible (retrieval/evaluation mode)."""
    return MaskPlan(visible_indices=np.arange(patch_count),
                    masked_indices=np.arange(0), ratio=0.0, seed=0)


def span_mask_text(caption, poisson_lambda: float, seed: int) -> tuple[str, ...]:
    """Replace one Poisson-length interior span with a single MASK token.

    The leading BOS (pooling slot) and trailing EOS are never masked, so
    the sampled span length is clamped to the interior length.
    """
    caption = tuple(caption)
    if not caption:
        raise ContractError("caption must be non-empty")
    if poisson_lambda < 0:
        raise ContractError("poisson_lambda must be >= 0")
    rng = np.random.Generator(np.random.PCG64(seed))
    interior = max(len(caption) - 2, 0)
    span = min(int(rng.poisson(poisson_lambda)), interior)
    if span == 0:
        return caption
    start = 1 + int(rng.integers(0, interior - span + 1))
    return caption[:start] + (MASK,) + caption[start + span:]


# ---------------------------------------------------------------------------
# image encoder (batched; equal visible count across the batch)

def image_forward(store: ParamStore, config: ModelConfig,
                  visible: np.ndarray, visible_idx: np.ndarray) -> dict:
    global _token_block_evals
    b, nv, _ = visible.shape
    _token_block_evals += b * nv * config.blocks

    x, proj_cache = net.linear_fwd(visible, store, "img.patch_proj.w",
                                   "img.patch_proj.bias")
    cls = np.broadcast_to(store.params["img.cls"], (b, 1, config.d_img))
    x = np.concatenate([cls, x], axis=1)
    pos_idx = None
    if config.use_positional:
        pos_idx = np.concatenate(
            [np.zeros((b, 1), dtype=np.int64), visible_idx + 1], axis=1)
        pos, pos_cache = net.rows_fwd(store, "img.pos", pos_idx)
        x = x + pos
    else:
        pos_cache = None

    block_caches = []
    for blk in range(config.blocks):
        x, attn_cache = net.attention_fwd(x, x, store, f"img.blk{blk}.attn")
        x, mlp_cache = net.mlp_fwd(x, store, f"img.blk{blk}.mlp")
        block_caches.append((attn_cache, mlp_cache))

    head, head_cache = net.linear_fwd(x[:, 0], store, "img.proj.w", "img.proj.bias")
    pooled, norm_cache = net.l2norm_fwd(head)
    return {
        "pooled": pooled,
        "token_states": x,
        "proj_cache": proj_cache,
        "pos_cache": pos_cache,
        "block_caches": block_caches,
        "head_cache": head_cache,
        "norm_cache": norm_cache,
        "visible_idx": visible_idx,
    }


def image_backward(store: ParamStore, config: ModelConfig, fwd: dict,
                   d_pooled: np.ndarray | None,
                   d_token_states: np.ndarray | None) -> None:
    x = fwd["token_states"]
    dx = np.zeros_like(x) if d_token_states is None else d_token_states.copy()
    if d_pooled is not None:
        d_head = net.l2norm_bwd(d_pooled, fwd["norm_cache"])
        dx[:, 0] += net.linear_bwd(d_head, fwd["head_cache"], store)
    for blk in reversed(range(config.blocks)):
        attn_cache, mlp_cache = fwd["block_caches"][blk]
        dx = net.mlp_bwd(dx, mlp_cache, store)
        dq, dkv = net.attention_bwd(dx, attn_cache, store)
        dx = dq + dkv
    if config.use_positional:
        net.rows_bwd(dx, fwd["pos_cache"], store)
    store.accumulate("img.cls", dx[:, 0].sum(axis=0))
    net.linear_bwd(dx[:, 1:], fwd["proj_cache"], store)


def encode_image(visible_patches: np.ndarray, plan: MaskPlan,
                 config: ModelConfig, store: ParamStore) -> EmbeddingPair:
    """Global embedding + visible-position token states for one record."""
    visible_patches = np.asarray(visible_patches, dtype=np.float64)
    if visible_patches.ndim != 2 or visible_patches.shape != (
            len(plan.visible_indices), config.d_img):
        raise ContractError(
            f"visible patches shape {visible_patches.shape} does not match "
            f"plan ({len(plan.visible_indices)} x {config.d_img})")
    fwd = image_forward(store, config, visible_patches[None],
                        plan.visible_indices[None])
    return EmbeddingPair(pooled=fwd["pooled"][0], token_states=fwd["token_states"][0])


# ---------------------------------------------------------------------------
# reconstruction decoder + loss

def ir_forward(store: ParamStore, config: ModelConfig,
               token_states: np.ndarray, masked_idx: np.ndarray,
               patch_grids: np.ndarray) -> dict:
    b, nm = masked_idx.shape
    if nm == 0:
        return {"loss": 0.0, "per_record": np.zeros(b), "empty": True}
    q = store.params["dec.mask_token"] + store.params["dec.pos"][masked_idx]
    block_caches = []
    x = q
    for blk in range(config.mae_blocks):
        x, attn_cache = net.attention_fwd(x, token_states, store,
                                          f"dec.blk{blk}.attn")
        x, mlp_cache = net.mlp_fwd(x, store, f"dec.blk{blk}.mlp")
        block_caches.append((attn_cache, mlp_cache))
    pred, head_cache = net.linear_fwd(x, store, "dec.head.w", "dec.head.bias")
    pred_n, norm_cache = net.l2norm_fwd(pred)

    targets = np.take_along_axis(patch_grids, masked_idx[..., None], axis=1)
    tgt_norm = np.linalg.norm(targets, axis=-1, keepdims=True)
    tgt_n = targets / (tgt_norm + net.NORM_EPS)

    diff = pred_n - tgt_n
    per_record = (diff * diff).sum(axis=(1, 2))
    return {
        "loss": float(per_record.mean()),
        "per_record": per_record,
        "empty": False,
        "diff": diff,
        "norm_cache": norm_cache,
        "head_cache": head_cache,
        "block_caches": block_caches,
        "masked_idx": masked_idx,
        "token_states_shape": token_states.shape,
    }


def ir_backward(store: ParamStore, config: ModelConfig, fwd: dict,
                upstream: float = 1.0) -> np.ndarray | None:
    """Accumulates decoder grads; returns d(token_states) or None if empty."""
    if fwd["empty"]:
        return None
    b = fwd["diff"].shape[0]
    d_pred_n = (2.0 * upstream / b) * fwd["diff"]
    d_pred = net.l2norm_bwd(d_pred_n, fwd["norm_cache"])
    dx = net.linear_bwd(d_pred, fwd["head_cache"], store)
    d_states = np.zeros(fwd["token_states_shape"])
    for blk in reversed(range(config.mae_blocks)):
        attn_cache, mlp_cache = fwd["block_caches"][blk]
        dx = net.mlp_bwd(dx, mlp_cache, store)
        dx, dkv = net.attention_bwd(dx, attn_cache, store)
        d_states += dkv
    # dx is now the gradient at the decoder inputs (mask token + positions)
    store.accumulate("dec.mask_token", dx.sum(axis=(0, 1)))
    acc = np.zeros_like(store.params["dec.pos"])
    np.add.at(acc, fwd["masked_idx"].reshape(-1), dx.reshape(-1, dx.shape[-1]))
    store.accumulate("dec.pos", acc)
    return d_states


def reconstruct_and_ir_loss(token_states: np.ndarray, plan: MaskPlan,
                            patch_grid: np.ndarray, config: ModelConfig,
                            store: ParamStore) -> tuple[float, np.ndarray]:
    """Reconstruction loss for one record.

    Returns (loss, gradient w.r.t. token_states); decoder parameter
    gradients are accumulated into the store. The loss sums the squared
    normalized-prediction vs normalized-patch differences over all masked
    positions (zero when nothing is masked).
    """
    patch_grid = np.asarray(patch_grid, dtype=np.float64)
    total = len(plan.visible_indices) + len(plan.masked_indices)
    if patch_grid.shape != (total, config.d_img):
        raise ContractError("patch grid inconsistent with mask plan")
    if token_states.shape[0] != len(plan.visible_indices) + 1:
        raise ContractError("token states inconsistent with mask plan")
    fwd = ir_forward(store, config, token_states[None],
                     plan.masked_indices[None], patch_grid[None])
    d_states = ir_backward(store, config, fwd)
    if d_states is None:
        d_states = np.zeros((token_states.shape[0], token_states.shape[1]))
    else:
        d_states = d_states[0]
    return fwd["loss"], d_states


# ---------------------------------------------------------------------------
# text encoder (batched, padded)

def pad_token_batch(token_seqs: list[np.ndarray], pad_id: int
                    ) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in token_seqs], dtype=np.int64)
    maxlen = int(lengths.max())
    ids = np.full((len(token_seqs), maxlen), pad_id, dtype=np.int64)
    for i, seq in enumerate(token_seqs):
        ids[i, : len(seq)] = seq
    return ids, lengths


def text_forward(store: ParamStore, config: ModelConfig,
                 ids: np.ndarray, lengths: np.ndarray) -> dict:
    b, maxlen = ids.shape
    valid = np.arange(maxlen)[None, :] < lengths[:, None]
    x, embed_cache = net.embed_fwd(ids, store, "txt.tok_embed")
    pos_cache = None
    if config.use_positional:
        pos_idx = np.broadcast_to(np.arange(maxlen, dtype=np.int64), (b, maxlen))
        pos, pos_cache = net.rows_fwd(store, "txt.pos", pos_idx)
        x = x + pos
    block_caches = []
    for blk in range(config.blocks):
        x, attn_cache = net.attention_fwd(x, x, store, f"txt.blk{blk}.attn",
                                          key_mask=valid)
        x, mlp_cache = net.mlp_fwd(x, store, f"txt.blk{blk}.mlp")
        block_caches.append((attn_cache, mlp_cache))
    head, head_cache = net.linear_fwd(x[:, 0], store, "txt.proj.w", "txt.proj.bias")
    pooled, norm_cache = net.l2norm_fwd(head)
    return {
        "pooled": pooled,
        "token_states": x,
        "valid": valid,
        "embed_cache": embed_cache,
        "pos_cache": pos_cache,
        "block_caches": block_caches,
        "head_cache": head_cache,
        "norm_cache": norm_cache,
    }


def text_backward(store: ParamStore, config: ModelConfig, fwd: dict,
                  d_pooled: np.ndarray | None,
                  d_token_states: np.ndarray | None) -> None:
    x = fwd["token_states"]
    dx = np.zeros_like(x) if d_token_states is None else d_token_states.copy()
    if d_pooled is not None:
        d_head = net.l2norm_bwd(d_pooled, fwd["norm_cache"])
        dx[:, 0] += net.linear_bwd(d_head, fwd["head_cache"], store)
    for blk in reversed(range(config.blocks)):
        attn_cache, mlp_cache = fwd["block_caches"][blk]
        dx = net.mlp_bwd(dx, mlp_cache, store)
        dq, dkv = net.attention_bwd(dx, attn_cache, store)
        dx = dq + dkv
    if config.use_positional:
        net.rows_bwd(dx, fwd["pos_cache"], store)
    net.embed_bwd(dx, fwd["embed_cache"], store)


def encode_text(tokens, config: ModelConfig, store: ParamStore) -> EmbeddingPair:
    """Unit-norm global embedding + token states for one token sequence.

    This is the only path that produces text embeddings for the alignment
    loss; by construction it sees no image data.
    """
    tokens = tuple(tokens)
    if len(tokens) > config.max_text_len:
        raise ContractError(
            f"text length {len(tokens)} exceeds maximum {config.max_text_len}")
    ids = tokens_to_ids(tokens, config)
    fwd = text_forward(store, config, ids[None],
                       np.array([len(tokens)], dtype=np.int64))
    return EmbeddingPair(pooled=fwd["pooled"][0],
                         token_states=fwd["token_states"][0])
