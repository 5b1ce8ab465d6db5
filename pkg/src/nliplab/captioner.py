"""Concept-conditioned cross-modal decoder.

Teacher-forced language-modeling loss and autoregressive generation over
a memory of [projected image token states || concept-conditioned text
states], plus the epsilon-sampled corpus completion that swaps
likely-noisy captions for synthetic ones.

The alignment path never touches this module: text embeddings for the
contrastive loss come from :func:`nliplab.encoders.encode_text`, whose
signature admits no image data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import encoders, net
from .data_synth import BOS, EOS, MAX_TEXT_LEN, PREFIX_TOKENS, Corpus
from .diffcore import ParamStore
from .errors import ContractError, ParseError
from .noise_model import NoiseEstimates
from .seeding import rng_for

CAPTION_PREFIX = PREFIX_TOKENS  # "this photo may describe these objects"


@dataclass(frozen=True)
class DecoderState:
    """Conditioning bundle for the cross-modal decoder.

    ``image_states`` is present on the language-modeling/generation path
    and absent nowhere else by construction; the contrastive path never
    builds this type.
    """

    text_states: np.ndarray  # (B, nt, d_txt)
    text_valid: np.ndarray  # (B, nt) bool
    image_states: np.ndarray | None = None  # (B, ni, d_img)
    max_len: int = MAX_TEXT_LEN


@dataclass(frozen=True)
class SyntheticCaption:
    tokens: tuple[str, ...]
    source_pair_id: int
    generation_strategy: str  # "greedy" or "sampled:<seed>"


def conditioning_tokens(concepts, masked_caption=None) -> tuple[str, ...]:
    """Text-encoder input [prompt-prefix, concepts(, masked caption)]."""
    tokens = [BOS, *CAPTION_PREFIX, *concepts]
    if masked_caption is not None:
        tokens.extend(masked_caption[1:])  # drop the caption's BOS, keep EOS
    else:
        tokens.append(EOS)
    if len(tokens) > MAX_TEXT_LEN:
        raise ContractError("conditioning sequence exceeds maximum text length")
    return tuple(tokens)


def _memory_forward(store: ParamStore, state: DecoderState):
    if state.image_states is not None:
        img_mem, img_cache = net.linear_fwd(state.image_states, store,
                                            "cap.img_proj.w", "cap.img_proj.bias")
        mem = np.concatenate([img_mem, state.text_states], axis=1)
        ni = img_mem.shape[1]
        img_valid = np.ones((mem.shape[0], ni), dtype=bool)
        mem_valid = np.concatenate([img_valid, state.text_valid], axis=1)
        return mem, mem_valid, img_cache, ni
    return state.text_states, state.text_valid, None, 0


def decoder_forward(store: ParamStore, config: encoders.ModelConfig,
                    in_ids: np.ndarray, in_lengths: np.ndarray,
                    state: DecoderState) -> dict:
    """Causal decoder over teacher-forced inputs; returns logits + caches."""
    b, n = in_ids.shape
    in_valid = np.arange(n)[None, :] < in_lengths[:, None]
    mem, mem_valid, img_cache, ni = _memory_forward(store, state)

    x, embed_cache = net.embed_fwd(in_ids, store, "cap.tok_embed")
    pos_idx = np.broadcast_to(np.arange(n, dtype=np.int64), (b, n))
    pos, pos_cache = net.rows_fwd(store, "cap.pos", pos_idx)
    x = x + pos

    block_caches = []
    for blk in range(config.captioner_blocks):
        x, self_cache = net.attention_fwd(x, x, store, f"cap.blk{blk}.self",
                                          key_mask=in_valid, causal=True)
        x, cross_cache = net.attention_fwd(x, mem, store, f"cap.blk{blk}.cross",
                                           key_mask=mem_valid)
        x, mlp_cache = net.mlp_fwd(x, store, f"cap.blk{blk}.mlp")
        block_caches.append((self_cache, cross_cache, mlp_cache))
    logits, head_cache = net.linear_fwd(x, store, "cap.head.w", "cap.head.bias")
    return {
        "logits": logits,
        "in_valid": in_valid,
        "embed_cache": embed_cache,
        "pos_cache": pos_cache,
        "block_caches": block_caches,
        "head_cache": head_cache,
        "img_cache": img_cache,
        "n_img_mem": ni,
        "mem_shape": mem.shape,
    }


def decoder_backward(store: ParamStore, config: encoders.ModelConfig,
                     fwd: dict, d_logits: np.ndarray
                     ) -> tuple[np.ndarray | None, np.ndarray]:
    """Returns (d_image_states or None, d_text_states)."""
    dx = net.linear_bwd(d_logits, fwd["head_cache"], store)
    d_mem = np.zeros(fwd["mem_shape"])
    for blk in reversed(range(config.captioner_blocks)):
        self_cache, cross_cache, mlp_cache = fwd["block_caches"][blk]
        dx = net.mlp_bwd(dx, mlp_cache, store)
        dx, dkv = net.attention_bwd(dx, cross_cache, store)
        d_mem += dkv
        dq, dkv = net.attention_bwd(dx, self_cache, store)
        dx = dq + dkv
    net.rows_bwd(dx, fwd["pos_cache"], store)
    net.embed_bwd(dx, fwd["embed_cache"], store)
    ni = fwd["n_img_mem"]
    if fwd["img_cache"] is not None:
        d_img_states = net.linear_bwd(d_mem[:, :ni], fwd["img_cache"], store)
        return d_img_states, d_mem[:, ni:]
    return None, d_mem


def lm_forward(store: ParamStore, config: encoders.ModelConfig,
               target_ids: np.ndarray, target_lengths: np.ndarray,
               state: DecoderState) -> dict:
    """Teacher-forced cross-entropy, averaged over predicted positions."""
    in_ids = target_ids[:, :-1]
    in_lengths = target_lengths - 1
    fwd = decoder_forward(store, config, in_ids, in_lengths, state)
    predict_ids = target_ids[:, 1:]
    n = in_ids.shape[1]
    predict_valid = np.arange(n)[None, :] < in_lengths[:, None]
    loss, nll, ce_cache = net.cross_entropy_fwd(fwd["logits"], predict_ids,
                                                predict_valid)
    fwd.update({"loss": loss, "nll": nll, "ce_cache": ce_cache})
    return fwd


def lm_backward(store: ParamStore, config: encoders.ModelConfig, fwd: dict,
                upstream: float = 1.0) -> tuple[np.ndarray | None, np.ndarray]:
    d_logits = net.cross_entropy_bwd(fwd["ce_cache"]) * upstream
    return decoder_backward(store, config, fwd, d_logits)


def lm_loss(image_states: np.ndarray | None, concept_text_states: np.ndarray,
            targets, config: encoders.ModelConfig, store: ParamStore
            ) -> tuple[float, tuple[np.ndarray | None, np.ndarray]]:
    """Single-record LM loss; accumulates decoder parameter gradients.

    Returns (loss, (d_image_states, d_text_states)) so callers can chain
    the gradient into the encoders.
    """
    targets = tuple(targets)
    if len(targets) < 2:
        raise ContractError("target must have at least BOS plus one token")
    target_ids = encoders.tokens_to_ids(targets, config)
    state = DecoderState(
        text_states=concept_text_states[None],
        text_valid=np.ones((1, concept_text_states.shape[0]), dtype=bool),
        image_states=None if image_states is None else image_states[None],
    )
    fwd = lm_forward(store, config, target_ids[None],
                     np.array([len(targets)], dtype=np.int64), state)
    d_img, d_txt = lm_backward(store, config, fwd)
    return fwd["loss"], (None if d_img is None else d_img[0], d_txt[0])


def generate_caption(patch_grid: np.ndarray, concepts, config: encoders.ModelConfig,
                     store: ParamStore, strategy: str = "greedy",
                     seed: int = 0, max_len: int = 24,
                     source_pair_id: int = -1) -> SyntheticCaption:
    """Autoregressive decode conditioned on the unmasked image and the
    prompt-wrapped concept list. Greedy decoding is deterministic; the
    sampled strategy draws from the softmax with the given seed."""
    if max_len > MAX_TEXT_LEN:
        raise ContractError(f"max_len must be <= {MAX_TEXT_LEN}")
    plan = encoders.full_plan(patch_grid.shape[0])
    img_fwd = encoders.image_forward(store, config,
                                     patch_grid[plan.visible_indices][None],
                                     plan.visible_indices[None])
    cond = conditioning_tokens(concepts)
    cond_ids = encoders.tokens_to_ids(cond, config)
    txt_fwd = encoders.text_forward(store, config, cond_ids[None],
                                    np.array([len(cond)], dtype=np.int64))
    state = DecoderState(text_states=txt_fwd["token_states"],
                         text_valid=txt_fwd["valid"],
                         image_states=img_fwd["token_states"])

    ids = config.token_ids
    eos_id = ids[EOS]
    rng = rng_for(seed, "generate", source_pair_id) if strategy == "sampled" else None
    out = [ids[BOS]]
    while len(out) < max_len:
        in_ids = np.array([out], dtype=np.int64)
        fwd = decoder_forward(store, config, in_ids,
                              np.array([len(out)], dtype=np.int64), state)
        logits = fwd["logits"][0, len(out) - 1]
        if strategy == "greedy":
            nxt = int(np.argmax(logits))
        elif strategy == "sampled":
            shifted = logits - logits.max()
            probs = np.exp(shifted) / np.exp(shifted).sum()
            nxt = int(rng.choice(len(probs), p=probs))
        else:
            raise ContractError(f"unknown generation strategy {strategy!r}")
        out.append(nxt)
        if nxt == eos_id:
            break
    vocab = config.vocab
    tokens = tuple(vocab[i] for i in out)
    label = strategy if strategy == "greedy" else f"sampled:{seed}"
    return SyntheticCaption(tokens=tokens, source_pair_id=source_pair_id,
                            generation_strategy=label)


def complete_corpus(corpus: Corpus, estimates: NoiseEstimates,
                    captions: dict[int, SyntheticCaption], seed: int) -> Corpus:
    """Replace each caption with its synthetic one w.p. epsilon_i.

    The replacement draw is per-record (derived seed) and happens once;
    images, pair ids and noise flags are untouched.
    """
    out = []
    for rec in corpus.records:
        eps = estimates.epsilon.get(rec.pair_id)
        if eps is None:
            raise ContractError(f"no noise estimate for pair {rec.pair_id}")
        new = replace(rec)
        if eps > 0.0:
            if rec.pair_id not in captions:
                raise ContractError(
                    f"missing synthetic caption for pair {rec.pair_id} "
                    f"with epsilon > 0")
            draw = rng_for(seed, "complete", rec.pair_id).random()
            if draw < eps:
                new.caption = captions[rec.pair_id].tokens
        out.append(new)
    return Corpus(records=out, d_img=corpus.d_img,
                  patch_count=corpus.patch_count, vocab=corpus.vocab)


# ---------------------------------------------------------------------------
# synthetic-caption sidecar file

def save_captions(captions: dict[int, SyntheticCaption], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"format": "nlip-captions", "version": 1},
                            separators=(",", ":")) + "\n")
        for pid in sorted(captions):
            cap = captions[pid]
            fh.write(json.dumps({
                "pair_id": pid,
                "tokens": list(cap.tokens),
                "strategy": cap.generation_strategy,
            }, separators=(",", ":")) + "\n")


def load_captions(path: str) -> dict[int, SyntheticCaption]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty caption sidecar")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line 1: bad header ({exc.msg})") from exc
    if header.get("format") != "nlip-captions" or header.get("version") != 1:
        raise ParseError(f"{path}: line 1: not a caption sidecar")
    out: dict[int, SyntheticCaption] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            out[int(obj["pair_id"])] = SyntheticCaption(
                tokens=tuple(obj["tokens"]),
                source_pair_id=int(obj["pair_id"]),
                generation_strategy=obj["strategy"],
            )
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            raise ParseError(f"{path}: line {lineno}: malformed caption: {exc}") from exc
    return out
