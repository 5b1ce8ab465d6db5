"""Similarity blocks and the symmetric contrastive losses.

``itc_loss`` is the plain in-batch softmax cross-entropy, averaged over
the image-to-text and text-to-image directions. ``nitc_loss`` is its
noise-adaptive variant: sample i's alignment target is smoothed to
(1 - w_i) on the diagonal with w_i/(B-1) spread over the negatives, so
likely-noisy pairs equilibrate at a softer alignment instead of being
pulled all the way in. At w = 0 the two losses coincide exactly.

All softmaxes are computed with log-sum-exp stabilization; gradients are
returned with respect to both embedding sets and the temperature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

TAU_MIN, TAU_MAX = 1e-3, 10.0
UNIT_NORM_TOL = 1e-4


@dataclass(frozen=True)
class SimilarityBlock:
    s: np.ndarray  # (B, B), s[i, j] = (v_i . t_j) / tau
    batch_ids: tuple[int, ...]
    tau: float
    img_embs: np.ndarray
    txt_embs: np.ndarray


@dataclass(frozen=True)
class PerSampleLosses:
    itc_x: np.ndarray  # image -> text, per sample
    itc_y: np.ndarray  # text -> image, per sample
    combined: np.ndarray  # (itc_x + itc_y) / 2


@dataclass(frozen=True)
class AlignmentGrads:
    d_img_embs: np.ndarray
    d_txt_embs: np.ndarray
    d_tau: float


def similarity_block(img_embs: np.ndarray, txt_embs: np.ndarray, tau: float,
                     batch_ids: tuple[int, ...] | None = None) -> SimilarityBlock:
    """Temperature-scaled similarity matrix shared by both directions."""
    img_embs = np.asarray(img_embs, dtype=np.float64)
    txt_embs = np.asarray(txt_embs, dtype=np.float64)
    if img_embs.ndim != 2 or img_embs.shape != txt_embs.shape:
        raise ContractError("embedding batches must share shape (B, d)")
    if img_embs.shape[0] < 1:
        raise ContractError("batch must contain at least one pair")
    if tau <= 0:
        raise ContractError("tau must be positive")
    for name, embs in (("image", img_embs), ("text", txt_embs)):
        norms = np.linalg.norm(embs, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise ContractError(f"{name} embeddings are not unit norm")
    s = (img_embs @ txt_embs.T) / tau
    if batch_ids is None:
        batch_ids = tuple(range(img_embs.shape[0]))
    return SimilarityBlock(s=s, batch_ids=tuple(batch_ids), tau=float(tau),
                           img_embs=img_embs, txt_embs=txt_embs)


def _log_softmax(s: np.ndarray, axis: int) -> np.ndarray:
    shifted = s - s.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _grads_from_dlds(block: SimilarityBlock, dlds: np.ndarray) -> AlignmentGrads:
    d_img = (dlds @ block.txt_embs) / block.tau
    d_txt = (dlds.T @ block.img_embs) / block.tau
    d_tau = float(-(dlds * block.s).sum() / block.tau)
    return AlignmentGrads(d_img_embs=d_img, d_txt_embs=d_txt, d_tau=d_tau)


def _smoothed_losses(block: SimilarityBlock, w: np.ndarray
                     ) -> tuple[float, PerSampleLosses, AlignmentGrads]:
    s = block.s
    if not np.all(np.isfinite(s)):
        raise ContractError("similarity matrix contains non-finite entries")
    b = s.shape[0]
    logp_row = _log_softmax(s, axis=1)  # image -> text
    logp_col = _log_softmax(s, axis=0)  # text -> image

    # per-sample targets: (1 - w_i) on the diagonal, w_i / (B - 1) elsewhere
    eye = np.eye(b)
    if b > 1:
        t_row = (w[:, None] / (b - 1)) * (1.0 - eye) + (1.0 - w)[:, None] * eye
        t_col = (w[None, :] / (b - 1)) * (1.0 - eye) + (1.0 - w)[None, :] * eye
    else:
        t_row = eye.copy()
        t_col = eye.copy()

    loss_x = -(t_row * logp_row).sum(axis=1)
    loss_y = -(t_col * logp_col).sum(axis=0)
    per_sample = PerSampleLosses(itc_x=loss_x, itc_y=loss_y,
                                 combined=0.5 * (loss_x + loss_y))
    total = float(per_sample.combined.mean())

    dlds = (np.exp(logp_row) - t_row) / (2 * b) + (np.exp(logp_col) - t_col) / (2 * b)
    return total, per_sample, _grads_from_dlds(block, dlds)


def itc_loss(block: SimilarityBlock
             ) -> tuple[float, PerSampleLosses, AlignmentGrads]:
    """Symmetric in-batch contrastive loss (hard diagonal targets)."""
    return _smoothed_losses(block, np.zeros(block.s.shape[0]))


def itc_per_sample(block: SimilarityBlock) -> np.ndarray:
    """Combined per-sample contrastive loss, no gradients (ledger input)."""
    s = block.s
    loss_x = -(_log_softmax(s, axis=1).diagonal())
    loss_y = -(_log_softmax(s, axis=0).diagonal())
    return 0.5 * (loss_x + loss_y)


def nitc_loss(block: SimilarityBlock, w: np.ndarray
              ) -> tuple[float, PerSampleLosses, AlignmentGrads]:
    """Noise-adaptive contrastive loss with per-sample smoothing rates."""
    w = np.asarray(w, dtype=np.float64)
    b = block.s.shape[0]
    if w.shape != (b,):
        raise ContractError("w must have one entry per batch sample")
    if np.any(w < 0.0) or np.any(w >= 1.0):
        raise ContractError("each w_i must lie in [0, 1)")
    if b == 1 and np.any(w > 0.0):
        raise ContractError("smoothing over negatives requires batch size >= 2")
    return _smoothed_losses(block, w)


def total_loss(ir: float, lm: float, nitc: float,
               alpha: float, beta: float) -> float:
    """Weighted objective: ir + alpha * lm + beta * nitc."""
    for name, value in (("ir", ir), ("lm", lm), ("nitc", nitc)):
        if not np.isfinite(value):
            raise ContractError(f"{name} component is not finite")
    return float(ir + alpha * lm + beta * nitc)
