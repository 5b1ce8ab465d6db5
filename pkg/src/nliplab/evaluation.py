"""Evaluation metrics: retrieval R@K, noise-detection AUC, caption concept
recall and prompt-based zero-shot classification.

All metrics are deterministic: retrieval ties break toward the lower
candidate index, the AUC uses midranks, and classification ties take the
lowest class index.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import concepts, encoders
from .data_synth import CLEAN
from .diffcore import ParamStore
from .errors import ContractError, UndefinedMetricError


def _ranks_of_truth(scores: np.ndarray) -> np.ndarray:
    """Rank (0-based) of the diagonal entry in each row, ties by index."""
    order = np.argsort(-scores, axis=1, kind="stable")
    n = scores.shape[0]
    ranks = np.empty(n, dtype=np.int64)
    for i in range(n):
        ranks[i] = int(np.nonzero(order[i] == i)[0][0])
    return ranks


def retrieval_recall(img_embs: np.ndarray, txt_embs: np.ndarray,
                     ks) -> dict[str, dict[int, float]]:
    """R@K (percent) for both directions; index i is the true match."""
    img_embs = np.asarray(img_embs, dtype=np.float64)
    txt_embs = np.asarray(txt_embs, dtype=np.float64)
    if img_embs.shape[0] == 0:
        raise ContractError("retrieval needs at least one pair")
    if img_embs.shape != txt_embs.shape:
        raise ContractError("embedding sets must share shape")
    scores = img_embs @ txt_embs.T
    i2t = _ranks_of_truth(scores)
    t2i = _ranks_of_truth(scores.T)
    out = {"image_to_text": {}, "text_to_image": {}}
    for k in ks:
        out["image_to_text"][k] = float(100.0 * np.mean(i2t < k))
        out["text_to_image"][k] = float(100.0 * np.mean(t2i < k))
    return out


def mean_r_at_1(img_embs: np.ndarray, txt_embs: np.ndarray) -> float:
    """Both-direction average R@1 in percent (main pipeline metric)."""
    r = retrieval_recall(img_embs, txt_embs, [1])
    return 0.5 * (r["image_to_text"][1] + r["text_to_image"][1])


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean rank of their group."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def noise_auc(epsilons, true_flags) -> float:
    """Rank-sum (Mann-Whitney) ROC-AUC of epsilon against flag != clean."""
    scores = np.asarray(list(epsilons), dtype=np.float64)
    labels = np.asarray([flag != CLEAN for flag in true_flags], dtype=bool)
    if scores.shape != labels.shape:
        raise ContractError("epsilons and flags must align")
    n_pos = int(labels.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC undefined with a single class")
    ranks = _midranks(scores)
    rank_sum = float(ranks[labels].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


class RecallResult(NamedTuple):
    recall: float
    skipped: int


def concept_recall(captions, true_concept_names) -> RecallResult:
    """Mean fraction of a record's true concepts its caption mentions.

    Records with no true concepts are skipped and tallied.
    """
    captions = list(captions)
    truths = [set(t) for t in true_concept_names]
    if not captions or len(captions) != len(truths):
        raise ContractError("captions and truths must align and be nonempty")
    total = 0.0
    counted = 0
    skipped = 0
    for caption, truth in zip(captions, truths):
        if not truth:
            skipped += 1
            continue
        mentioned = set(caption) & truth
        total += len(mentioned) / len(truth)
        counted += 1
    recall = total / counted if counted else 0.0
    return RecallResult(recall=recall, skipped=skipped)


def zero_shot_classify(patch_grid: np.ndarray, class_names,
                       config: encoders.ModelConfig, store: ParamStore,
                       prompt: str = concepts.DEFAULT_PROMPT) -> int:
    """Index of the class whose prompt embedding best matches the image."""
    class_names = list(class_names)
    if not class_names:
        raise ContractError("need at least one class")
    plan = encoders.full_plan(patch_grid.shape[0])
    pair = encoders.encode_image(patch_grid, plan, config, store)
    seqs = [encoders.tokens_to_ids(concepts.prompt_tokens(prompt, name), config)
            for name in class_names]
    ids, lengths = encoders.pad_token_batch(seqs, config.token_ids["<pad>"])
    fwd = encoders.text_forward(store, config, ids, lengths)
    scores = fwd["pooled"] @ pair.pooled
    return int(np.argmax(scores))
