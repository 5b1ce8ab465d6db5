"""Synthetic multimodal corpora with controllable noise.

Images are patch grids built from per-concept signature vectors; captions
follow a fixed template grammar ("a photo of <c1> and <c2> ..."). Noise
injection produces mismatched captions (a derangement among the selected
records) and incomplete captions (concept mentions dropped). Ground-truth
noise flags are carried for evaluation only; training code receives
records through :func:`training_view`, which strips them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, ParseError
from .seeding import rng_for

PAD, BOS, EOS, MASK = "<pad>", "<bos>", "<eos>", "<mask>"
SPECIAL_TOKENS = (PAD, BOS, EOS, MASK)
# template grammar plus the caption-prompt prefix words; reserved so the
# vocabulary builder can tell content tokens from function tokens
GRAMMAR_TOKENS = ("a", "photo", "of", "and")
PREFIX_TOKENS = ("this", "photo", "may", "describe", "these", "objects")
MAX_TEXT_LEN = 77

CLEAN, MISMATCHED, INCOMPLETE = "clean", "mismatched", "incomplete"
NOISE_FLAGS = (CLEAN, MISMATCHED, INCOMPLETE)

# dominant-signature weight for each patch; the remainder spreads over the
# record's full concept set so reconstruction needs cross-patch context
_DOMINANT_WEIGHT = 0.7


@dataclass(frozen=True)
class ConceptWorld:
    num_concepts: int
    concept_names: tuple[str, ...]
    concept_image_signatures: np.ndarray  # (num_concepts, d_img), unit rows
    token_vocab: tuple[str, ...]
    seed: int

    @property
    def d_img(self) -> int:
        return self.concept_image_signatures.shape[1]


@dataclass(eq=False)
class PairRecord:
    pair_id: int
    patch_grid: np.ndarray  # (patch_count, d_img)
    caption: tuple[str, ...]  # BOS ... EOS, length <= 77
    true_concepts: tuple[int, ...]  # sorted image-side concept ids
    noise_flag: str = CLEAN
    epsilon: float | None = None
    w: float | None = None

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PairRecord)
            and self.pair_id == other.pair_id
            and np.array_equal(self.patch_grid, other.patch_grid)
            and self.caption == other.caption
            and self.true_concepts == other.true_concepts
            and self.noise_flag == other.noise_flag
        )


@dataclass(frozen=True)
class TrainingPair:
    """Flag-stripped view handed to every training-path operation."""

    pair_id: int
    patch_grid: np.ndarray
    caption: tuple[str, ...]


@dataclass(frozen=True)
class NoiseSpec:
    mismatch_rate: float
    incomplete_rate: float
    drop_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.mismatch_rate <= 1.0):
            raise ContractError("mismatch_rate must be in [0, 1]")
        if not (0.0 <= self.incomplete_rate <= 1.0):
            raise ContractError("incomplete_rate must be in [0, 1]")
        if self.mismatch_rate + self.incomplete_rate > 1.0:
            raise ContractError("mismatch_rate + incomplete_rate must be <= 1")
        if not (0.0 < self.drop_fraction <= 1.0):
            raise ContractError("drop_fraction must be in (0, 1]")


@dataclass(eq=False)
class Corpus:
    records: list[PairRecord]
    d_img: int
    patch_count: int
    vocab: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Corpus)
            and self.d_img == other.d_img
            and self.patch_count == other.patch_count
            and self.vocab == other.vocab
            and self.records == other.records
        )


def build_vocab(concept_names: tuple[str, ...]) -> tuple[str, ...]:
    seen: dict[str, None] = {}
    for tok in SPECIAL_TOKENS + GRAMMAR_TOKENS + PREFIX_TOKENS:
        seen.setdefault(tok, None)
    for name in concept_names:
        seen.setdefault(name, None)
    return tuple(seen)


def generate_world(num_concepts: int, d_img: int, seed: int) -> ConceptWorld:
    """Deterministic concept world with unit-norm, pairwise-distinct signatures."""
    if num_concepts < 2:
        raise ContractError("num_concepts must be >= 2")
    if d_img < 4:
        raise ContractError("d_img must be >= 4")
    rng = rng_for(seed, "world", "signatures")
    raw = rng.standard_normal((max(num_concepts, d_img), d_img))
    if num_concepts <= d_img:
        # orthonormal rows: maximally separated signatures
        q, _ = np.linalg.qr(raw.T)
        sigs = q.T[:num_concepts]
    else:
        sigs = raw[:num_concepts]
    sigs = sigs / np.linalg.norm(sigs, axis=1, keepdims=True)
    names = tuple(f"c{i:02d}" for i in range(num_concepts))
    return ConceptWorld(
        num_concepts=num_concepts,
        concept_names=names,
        concept_image_signatures=sigs,
        token_vocab=build_vocab(names),
        seed=seed,
    )


def caption_for(world: ConceptWorld, concept_ids: tuple[int, ...]) -> tuple[str, ...]:
    """Template caption listing the given concepts in the given order."""
    tokens = [BOS, "a", "photo", "of"]
    for pos, cid in enumerate(concept_ids):
        if pos > 0:
            tokens.append("and")
        tokens.append(world.concept_names[cid])
    tokens.append(EOS)
    if len(tokens) > MAX_TEXT_LEN:
        raise ContractError("caption exceeds the maximum text length")
    return tuple(tokens)


def generate_pair(world: ConceptWorld, concepts_per_image: int,
                  patch_count: int, noise_std: float, pair_id: int) -> PairRecord:
    """One clean record; deterministic in (world.seed, pair_id)."""
    if not (1 <= concepts_per_image <= world.num_concepts):
        raise ContractError("concepts_per_image must be in [1, num_concepts]")
    if patch_count < 1:
        raise ContractError("patch_count must be >= 1")
    rng = rng_for(world.seed, "pair", pair_id)
    drawn = rng.choice(world.num_concepts, size=concepts_per_image, replace=False)
    sigs = world.concept_image_signatures[drawn]
    mixture = sigs.mean(axis=0)
    grid = np.empty((patch_count, world.d_img))
    for j in range(patch_count):
        dominant = sigs[j % concepts_per_image]
        grid[j] = _DOMINANT_WEIGHT * dominant + (1.0 - _DOMINANT_WEIGHT) * mixture
    if noise_std > 0:
        grid += noise_std * rng.standard_normal(grid.shape)
    return PairRecord(
        pair_id=pair_id,
        patch_grid=grid,
        caption=caption_for(world, tuple(int(c) for c in drawn)),
        true_concepts=tuple(sorted(int(c) for c in drawn)),
        noise_flag=CLEAN,
    )


def generate_corpus(world: ConceptWorld, n: int, concepts_per_image: int,
                    patch_count: int, noise_std: float,
                    start_id: int = 0) -> Corpus:
    records = [
        generate_pair(world, concepts_per_image, patch_count, noise_std, pid)
        for pid in range(start_id, start_id + n)
    ]
    return Corpus(records=records, d_img=world.d_img,
                  patch_count=patch_count, vocab=world.token_vocab)


def _concept_mentions(caption: tuple[str, ...],
                      concept_names: frozenset[str]) -> list[str]:
    return [tok for tok in caption if tok in concept_names]


def concept_tokens(vocab: tuple[str, ...]) -> tuple[str, ...]:
    """Content tokens of a corpus vocabulary (everything non-reserved)."""
    reserved = set(SPECIAL_TOKENS) | set(GRAMMAR_TOKENS) | set(PREFIX_TOKENS)
    return tuple(t for t in vocab if t not in reserved)


def inject_noise(corpus: Corpus, spec: NoiseSpec) -> Corpus:
    """Apply mismatch (derangement) and incomplete (dropped mentions) noise.

    Mismatched captions are permuted among the selected records by a
    single-cycle permutation, so no selected record keeps its own caption.
    Incomplete records lose ceil(drop_fraction * k) of their k concept
    mentions and are rebuilt on the template grammar. true_concepts always
    stays image-side.
    """
    records = corpus.records
    n = len(records)
    n_mismatch = math.floor(spec.mismatch_rate * n)
    n_incomplete = math.floor(spec.incomplete_rate * n)
    if spec.mismatch_rate > 0 and n < 2:
        raise ContractError("mismatch injection needs at least 2 records")
    if n_mismatch == 1:
        raise ContractError(
            "cannot derange a single record; adjust mismatch_rate or corpus size")
    if n_mismatch + n_incomplete > n:
        raise ContractError("noise rates exceed corpus size")

    rng = rng_for(spec.seed, "noise", "selection")
    order = rng.permutation(n)
    mismatch_pos = sorted(int(i) for i in order[:n_mismatch])
    incomplete_pos = sorted(int(i) for i in order[n_mismatch:n_mismatch + n_incomplete])

    name_set = frozenset(concept_tokens(corpus.vocab))
    out = [replace(rec) for rec in records]

    if n_mismatch >= 2:
        # permute caption sources among the selected records, then repair
        # until no record receives a caption equal (by value) to its own;
        # value inequality subsumes the index-level derangement
        perm_rng = rng_for(spec.seed, "noise", "derangement")
        source = [mismatch_pos[i]
                  for i in perm_rng.permutation(len(mismatch_pos))]
        own = [records[pos].caption for pos in mismatch_pos]
        m = len(source)
        for _ in range(m):
            colliding = [i for i in range(m)
                         if records[source[i]].caption == own[i]]
            if not colliding:
                break
            i = colliding[0]
            fixed = False
            start = int(perm_rng.integers(0, m))
            for off in range(m):
                j = (start + off) % m
                if j == i:
                    continue
                if (records[source[j]].caption != own[i]
                        and records[source[i]].caption != own[j]):
                    source[i], source[j] = source[j], source[i]
                    fixed = True
                    break
            if not fixed:
                raise ContractError(
                    "cannot mismatch captions: too many selected records "
                    "share identical captions")
        else:
            if any(records[source[i]].caption == own[i] for i in range(m)):
                raise ContractError(
                    "cannot mismatch captions: too many selected records "
                    "share identical captions")
        for pos, src in zip(mismatch_pos, source):
            out[pos].caption = records[src].caption
            out[pos].noise_flag = MISMATCHED

    for pos in incomplete_pos:
        rec = records[pos]
        mentions = _concept_mentions(rec.caption, name_set)
        k = len(mentions)
        if k == 0:
            out[pos].noise_flag = INCOMPLETE
            continue
        n_drop = math.ceil(spec.drop_fraction * k)
        drop_rng = rng_for(spec.seed, "noise", "drop", rec.pair_id)
        dropped = set(int(i) for i in
                      drop_rng.choice(k, size=n_drop, replace=False))
        kept = [m for i, m in enumerate(mentions) if i not in dropped]
        tokens = [BOS, "a", "photo", "of"]
        for idx, name in enumerate(kept):
            if idx > 0:
                tokens.append("and")
            tokens.append(name)
        tokens.append(EOS)
        out[pos].caption = tuple(tokens)
        out[pos].noise_flag = INCOMPLETE

    return Corpus(records=out, d_img=corpus.d_img,
                  patch_count=corpus.patch_count, vocab=corpus.vocab)


def training_view(corpus: Corpus) -> list[TrainingPair]:
    """Records with evaluation-only fields stripped."""
    return [TrainingPair(r.pair_id, r.patch_grid, r.caption)
            for r in corpus.records]


# ---------------------------------------------------------------------------
# corpus file format: one JSON header line, then one JSON record per line

def save_corpus(corpus: Corpus, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(corpus_to_text(corpus))


def corpus_to_text(corpus: Corpus) -> str:
    lines = [json.dumps({
        "format": "nlip-corpus",
        "version": 1,
        "d_img": corpus.d_img,
        "patch_count": corpus.patch_count,
        "vocab": list(corpus.vocab),
    }, separators=(",", ":"))]
    for rec in corpus.records:
        lines.append(json.dumps({
            "pair_id": rec.pair_id,
            "patches": [float(x) for x in rec.patch_grid.reshape(-1)],
            "caption": list(rec.caption),
            "true_concepts": list(rec.true_concepts),
            "noise_flag": rec.noise_flag,
        }, separators=(",", ":")))
    return "\n".join(lines) + "\n"


def load_corpus(path: str) -> Corpus:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    lines = text.splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file, expected a corpus header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line 1: bad header ({exc.msg})") from exc
    if not isinstance(header, dict) or header.get("format") != "nlip-corpus":
        raise ParseError(f"{path}: line 1: not a corpus header")
    if header.get("version") != 1:
        raise ParseError(f"{path}: unsupported corpus version {header.get('version')}")
    d_img = int(header["d_img"])
    patch_count = int(header["patch_count"])
    records = []
    last_good = 1
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            flat = np.asarray(obj["patches"], dtype=np.float64)
            grid = flat.reshape(patch_count, d_img)
            flag = obj["noise_flag"]
            if flag not in NOISE_FLAGS:
                raise ValueError(f"unknown noise flag {flag!r}")
            records.append(PairRecord(
                pair_id=int(obj["pair_id"]),
                patch_grid=grid,
                caption=tuple(obj["caption"]),
                true_concepts=tuple(int(c) for c in obj["true_concepts"]),
                noise_flag=flag,
            ))
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            raise ParseError(
                f"{path}: line {lineno}: malformed record "
                f"(last good line {last_good}): {exc}") from exc
        last_good = lineno
    return Corpus(records=records, d_img=d_img, patch_count=patch_count,
                  vocab=tuple(header["vocab"]))
