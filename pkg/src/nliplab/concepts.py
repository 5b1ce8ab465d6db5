"""Concept vocabulary and prompt-based concept retrieval.

The vocabulary counts content tokens across a caption corpus (the
synthetic stand-in for noun parsing: template/function words are
reserved and excluded) and keeps tokens above a minimum frequency.
Retrieval scores every vocabulary entry against an image by embedding
"a photo of a <concept>" with the text encoder and taking the
temperature-scaled dot product with the unmasked image embedding.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import encoders
from .data_synth import BOS, EOS, GRAMMAR_TOKENS, PAD, PREFIX_TOKENS, SPECIAL_TOKENS
from .diffcore import ParamStore
from .errors import ContractError, ParseError

DEFAULT_PROMPT = "a photo of a {}"
NON_CONCEPT_TOKENS = frozenset(SPECIAL_TOKENS) | set(GRAMMAR_TOKENS) | set(PREFIX_TOKENS)


@dataclass
class ConceptVocabulary:
    entries: list[tuple[str, int]]  # (token, frequency), ordered
    min_frequency: int = 5
    # (prompt, params version) -> (|Q|, d_embed) prompt-embedding matrix
    _cache: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)

    def tokens(self) -> list[str]:
        return [tok for tok, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class ConceptQuery:
    prompt: str = DEFAULT_PROMPT
    k: int = 5

    def __post_init__(self):
        if self.k < 1:
            raise ContractError("k must be >= 1")


def build_vocabulary(captions, min_frequency: int = 5) -> ConceptVocabulary:
    """Count content tokens across captions and keep the frequent ones."""
    counts: Counter[str] = Counter()
    for caption in captions:
        for tok in caption:
            if tok not in NON_CONCEPT_TOKENS:
                counts[tok] += 1
    entries = [(tok, n) for tok, n in counts.items() if n >= min_frequency]
    entries.sort(key=lambda item: (-item[1], item[0]))
    return ConceptVocabulary(entries=entries, min_frequency=min_frequency)


def prompt_tokens(prompt: str, concept: str) -> tuple[str, ...]:
    return (BOS, *prompt.format(concept).split(), EOS)


def prompt_embeddings(vocab: ConceptVocabulary, prompt: str,
                      config: encoders.ModelConfig,
                      store: ParamStore) -> np.ndarray:
    """(|Q|, d_embed) unit-norm prompt embeddings, cached per params version."""
    key = (prompt, store.step)
    cached = vocab._cache.get(key)
    if cached is not None:
        return cached
    seqs = [encoders.tokens_to_ids(prompt_tokens(prompt, tok), config)
            for tok in vocab.tokens()]
    ids, lengths = encoders.pad_token_batch(seqs, config.token_ids[PAD])
    fwd = encoders.text_forward(store, config, ids, lengths)
    embs = fwd["pooled"]
    vocab._cache.clear()  # params changed: prior versions are dead
    vocab._cache[key] = embs
    return embs


def retrieve_concepts(patch_grid: np.ndarray, vocab: ConceptVocabulary,
                      query: ConceptQuery, config: encoders.ModelConfig,
                      store: ParamStore) -> list[tuple[str, float]]:
    """Top-k (concept, score) by prompt similarity; no masking applied.

    Scores are nonincreasing; ties resolve to vocabulary order.
    """
    if query.k > len(vocab):
        raise ContractError(
            f"k={query.k} exceeds vocabulary size {len(vocab)}")
    plan = encoders.full_plan(patch_grid.shape[0])
    pair = encoders.encode_image(patch_grid, plan, config, store)
    embs = prompt_embeddings(vocab, query.prompt, config, store)
    tau = float(store.params["tau"])
    scores = (embs @ pair.pooled) / tau
    order = np.argsort(-scores, kind="stable")[: query.k]
    names = vocab.tokens()
    return [(names[i], float(scores[i])) for i in order]


def save_vocabulary(vocab: ConceptVocabulary, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tok, freq in vocab.entries:
            fh.write(f"{tok}\t{freq}\n")


def load_vocabulary(path: str, min_frequency: int = 5) -> ConceptVocabulary:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}: line {lineno}: expected token<TAB>frequency")
            try:
                entries.append((parts[0], int(parts[1])))
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: bad frequency") from exc
    return ConceptVocabulary(entries=entries, min_frequency=min_frequency)
