"""Three-stage training pipeline.

Stage 1 (noisy-aware): warmup epochs on reconstruction + language modeling
+ plain contrastive alignment, recording per-sample contrastive losses;
then adaptive epochs where the alignment loss switches to its
noise-adaptive variant with smoothing rates refreshed from the GMM at
every epoch boundary. Stage 2 (captioning): fine-tune the captioner on a
guaranteed-clean split and synthesize a caption for every training
record. Stage 3 (conception-enhanced): rebuild the corpus by
epsilon-sampled caption replacement and fine-tune with the stage-1 warmup
objective at a 10x smaller base rate, smoothing off.

Every random draw derives from the run seed through named streams, so
reruns are bit-identical and checkpoint-resume matches straight-through
training.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import alignment, captioner, concepts, data_synth, encoders, evaluation
from .config import RunConfig, config_hash, render_config
from .data_synth import Corpus, TrainingPair, training_view
from .diffcore import (AdamConfig, LrSchedule, ParamStore, lr_at,
                       save_checkpoint, sgd_adam_step, zero_grads)
from .errors import ConfigError, ContractError
from .noise_model import (LossLedger, NoiseEstimates, refresh_epoch,
                          zero_estimates)
from .seeding import rng_for, seed_for

TAU_CLAMP = {"tau": (alignment.TAU_MIN, alignment.TAU_MAX)}
STAGE3_WARMUP_CAP = 4000


@dataclass(frozen=True)
class StageSchedule:
    """Epoch counts and loss weights for the three stages."""

    warmup_epochs: int  # E_e
    adaptive_epochs: int  # E_t
    enhanced_epochs: int  # E_f
    alpha: float = 1.0
    beta: float = 1.0
    lam: float = 0.5
    batch_size: int = 64
    seed: int = 1

    def __post_init__(self):
        if min(self.warmup_epochs, self.adaptive_epochs, self.enhanced_epochs) < 0:
            raise ContractError("epoch counts must be >= 0")
        if not (0.0 <= self.lam < 1.0):
            raise ContractError("lambda must be in [0, 1)")

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "StageSchedule":
        return cls(warmup_epochs=cfg.E_e, adaptive_epochs=cfg.E_t,
                   enhanced_epochs=cfg.E_f, alpha=cfg.alpha, beta=cfg.beta,
                   lam=cfg.lam, batch_size=cfg.batch_size, seed=cfg.seed)


@dataclass
class RunManifest:
    config_hash: str
    corpus_fingerprint: str
    stage_boundaries: dict[str, list[int]] = field(default_factory=dict)
    checkpoints: dict[str, str] = field(default_factory=dict)
    metrics_path: str = ""
    config_path: str = ""
    status: str = "ok"
    failed_stage: str = ""

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"


METRIC_COLUMNS = ("epoch", "stage", "L_IR", "L_LM", "L_ITC_or_NITC",
                  "mean_epsilon", "retrieval_R1", "noise_auc")


class MetricsWriter:
    """Fixed-schema CSV rows; blank cells for undefined values."""

    def __init__(self):
        self.rows: list[tuple] = []

    def add(self, epoch: int, stage: int, l_ir, l_lm, l_align,
            mean_eps, retrieval_r1, auc) -> None:
        self.rows.append((epoch, stage, l_ir, l_lm, l_align,
                          mean_eps, retrieval_r1, auc))

    @staticmethod
    def _fmt(value, spec: str) -> str:
        return "" if value is None else format(value, spec)

    def render(self) -> str:
        lines = [",".join(METRIC_COLUMNS)]
        for (epoch, stage, l_ir, l_lm, l_align, eps, r1, auc) in self.rows:
            lines.append(",".join([
                str(epoch), str(stage),
                self._fmt(l_ir, ".6f"), self._fmt(l_lm, ".6f"),
                self._fmt(l_align, ".6f"), self._fmt(eps, ".6f"),
                self._fmt(r1, ".2f"), self._fmt(auc, ".6f"),
            ]))
        return "\n".join(lines) + "\n"

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.render())


def model_config(cfg: RunConfig, vocab: tuple[str, ...]) -> encoders.ModelConfig:
    return encoders.ModelConfig(
        d_img=cfg.d_img, d_txt=cfg.d_txt, d_embed=cfg.d_embed, vocab=vocab,
        patch_count=cfg.patch_count, blocks=cfg.blocks,
        mask_ratio=cfg.mask_ratio, use_positional=cfg.use_positional,
        mae_blocks=cfg.mae_blocks, captioner_blocks=cfg.captioner_blocks,
        poisson_lambda=cfg.poisson_lambda,
        temperature_init=cfg.temperature_init,
    )


def build_corpora(cfg: RunConfig) -> tuple[data_synth.ConceptWorld, Corpus, Corpus, Corpus]:
    """World plus train (noisy), clean fine-tune split and clean eval split."""
    world = data_synth.generate_world(cfg.num_concepts, cfg.d_img, cfg.seed)
    if cfg.corpus:
        train = data_synth.load_corpus(cfg.corpus)
        if train.d_img != cfg.d_img or train.patch_count != cfg.patch_count:
            raise ConfigError("corpus file dimensions do not match the config")
        if train.vocab != world.token_vocab:
            raise ConfigError("corpus vocabulary does not match the config world")
    else:
        train = data_synth.generate_corpus(
            world, cfg.n_train, cfg.concepts_per_image, cfg.patch_count,
            cfg.noise_std, start_id=0)
        spec = data_synth.NoiseSpec(
            mismatch_rate=cfg.mismatch_rate,
            incomplete_rate=cfg.incomplete_rate,
            drop_fraction=cfg.drop_fraction,
            seed=cfg.seed)
        train = data_synth.inject_noise(train, spec)
    n_clean = max(1, round(cfg.clean_fraction * len(train)))
    clean = data_synth.generate_corpus(
        world, n_clean, cfg.concepts_per_image, cfg.patch_count,
        cfg.noise_std, start_id=len(train))
    evalc = data_synth.generate_corpus(
        world, cfg.n_eval, cfg.concepts_per_image, cfg.patch_count,
        cfg.noise_std, start_id=len(train) + n_clean)
    return world, train, clean, evalc


def make_batches(n: int, batch_size: int,
                 rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches; a trailing singleton is merged into its neighbor
    so the noise-adaptive loss never sees a single-pair batch."""
    perm = rng.permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


@dataclass
class RunState:
    cfg: RunConfig
    mcfg: encoders.ModelConfig
    store: ParamStore
    schedule: StageSchedule
    ledger: LossLedger = field(default_factory=LossLedger)
    estimates: NoiseEstimates | None = None
    vocab: concepts.ConceptVocabulary | None = None
    snapshot: ParamStore | None = None
    concept_cache: dict[int, tuple[str, ...]] = field(default_factory=dict)
    metrics: MetricsWriter = field(default_factory=MetricsWriter)
    eval_records: list[TrainingPair] = field(default_factory=list)
    train_flags: dict[int, str] = field(default_factory=dict)
    epoch_counter: int = 0
    epoch_seconds: list[float] = field(default_factory=list)


def adam_config(cfg: RunConfig) -> AdamConfig:
    return AdamConfig(beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                      eps=cfg.adam_eps, weight_decay=cfg.weight_decay,
                      clamps=TAU_CLAMP)


def stage1_lr_schedule(cfg: RunConfig, batches_per_epoch: int) -> LrSchedule:
    """Linear ramp over the warmup epochs, cosine over the adaptive ones."""
    warmup = cfg.E_e * batches_per_epoch
    total = (cfg.E_e + cfg.E_t) * batches_per_epoch
    return LrSchedule(base_rate=cfg.base_rate, warmup_steps=warmup,
                      total_steps=max(total, warmup + 1),
                      min_rate=cfg.min_rate)


def stage2_lr_schedule(cfg: RunConfig, steps: int) -> LrSchedule:
    warmup = max(1, min(round(0.1 * steps), steps - 1)) if steps > 1 else 0
    return LrSchedule(base_rate=cfg.captioner_lr, warmup_steps=warmup,
                      total_steps=max(steps, warmup + 1),
                      min_rate=cfg.min_rate)


def stage3_lr_schedule(cfg: RunConfig, steps: int) -> LrSchedule:
    """Base rate shrunk 10x; warmup capped at 4000 steps or 10% of the stage."""
    warmup = min(STAGE3_WARMUP_CAP, max(1, round(0.1 * steps)))
    warmup = min(warmup, steps - 1) if steps > 1 else 0
    return LrSchedule(base_rate=0.1 * cfg.base_rate, warmup_steps=warmup,
                      total_steps=max(steps, warmup + 1),
                      min_rate=cfg.min_rate)


# ---------------------------------------------------------------------------
# batched forward/backward for one training batch

def _image_pass(state: RunState, batch: list[TrainingPair], ratio: float,
                stage: str, epoch: int):
    visibles = []
    vis_idx = []
    masked_idx = []
    for rec in batch:
        seed = seed_for(state.schedule.seed, "mask", stage, epoch, rec.pair_id)
        vis, plan = encoders.mask_patches(rec.patch_grid, ratio, seed)
        visibles.append(vis)
        vis_idx.append(plan.visible_indices)
        masked_idx.append(plan.masked_indices)
    visible = np.stack(visibles)
    vis_idx = np.stack(vis_idx)
    masked_idx = np.stack(masked_idx)
    grids = np.stack([rec.patch_grid for rec in batch])
    img_fwd = encoders.image_forward(state.store, state.mcfg, visible, vis_idx)
    return img_fwd, masked_idx, grids


def _pad(seqs: list[np.ndarray], state: RunState):
    return encoders.pad_token_batch(seqs, state.mcfg.token_ids[data_synth.PAD])


def batch_step(state: RunState, batch: list[TrainingPair], mode: str,
               stage: str, epoch: int) -> dict[str, float]:
    """Forward + backward for one batch; gradients land in the store."""
    cfg, mcfg, store = state.cfg, state.mcfg, state.store
    alpha, beta = state.schedule.alpha, state.schedule.beta
    ratio = 0.0 if mode == "captioning" else cfg.mask_ratio

    img_fwd, masked_idx, grids = _image_pass(state, batch, ratio, stage, epoch)

    # language-modeling pass: [prefix, concepts(, span-masked caption)]
    if mode == "captioning":
        cond_tokens = [captioner.conditioning_tokens(
            state.concept_cache.get(rec.pair_id, ())) for rec in batch]
    else:
        masked_caps = [encoders.span_mask_text(
            rec.caption, cfg.poisson_lambda,
            seed_for(state.schedule.seed, "span", stage, epoch, rec.pair_id))
            for rec in batch]
        cond_tokens = [captioner.conditioning_tokens(
            state.concept_cache.get(rec.pair_id, ()), masked)
            for rec, masked in zip(batch, masked_caps)]
    cond_ids, cond_lengths = _pad(
        [encoders.tokens_to_ids(t, mcfg) for t in cond_tokens], state)
    cond_fwd = encoders.text_forward(store, mcfg, cond_ids, cond_lengths)

    target_ids, target_lengths = _pad(
        [encoders.tokens_to_ids(rec.caption, mcfg) for rec in batch], state)
    dec_state = captioner.DecoderState(
        text_states=cond_fwd["token_states"], text_valid=cond_fwd["valid"],
        image_states=img_fwd["token_states"])
    lm_fwd = captioner.lm_forward(store, mcfg, target_ids, target_lengths,
                                  dec_state)

    losses = {"lm": lm_fwd["loss"], "ir": 0.0, "align": 0.0}

    if mode == "captioning":
        d_img_states, d_txt_states = captioner.lm_backward(store, mcfg, lm_fwd, 1.0)
        encoders.image_backward(store, mcfg, img_fwd, None, d_img_states)
        encoders.text_backward(store, mcfg, cond_fwd, None, d_txt_states)
        return losses

    # reconstruction
    ir_fwd = encoders.ir_forward(store, mcfg, img_fwd["token_states"],
                                 masked_idx, grids)
    losses["ir"] = ir_fwd["loss"]

    # alignment pass on the span-masked caption alone (no concepts, no image)
    nitc_ids, nitc_lengths = _pad(
        [encoders.tokens_to_ids(t, mcfg) for t in masked_caps], state)
    txt_fwd = encoders.text_forward(store, mcfg, nitc_ids, nitc_lengths)
    tau = float(store.params["tau"])
    pair_ids = tuple(rec.pair_id for rec in batch)
    block = alignment.similarity_block(img_fwd["pooled"], txt_fwd["pooled"],
                                       tau, pair_ids)
    if mode == "adaptive":
        w = np.array([state.estimates.w.get(pid, 0.0) for pid in pair_ids])
        loss_align, _, agrads = alignment.nitc_loss(block, w)
    else:
        loss_align, _, agrads = alignment.itc_loss(block)
    losses["align"] = loss_align

    # backward: IR (weight 1), LM (alpha), alignment (beta)
    d_img_states = np.zeros_like(img_fwd["token_states"])
    ir_grad = encoders.ir_backward(store, mcfg, ir_fwd, 1.0)
    if ir_grad is not None:
        d_img_states += ir_grad
    d_img_lm, d_txt_lm = captioner.lm_backward(store, mcfg, lm_fwd, alpha)
    d_img_states += d_img_lm
    encoders.image_backward(store, mcfg, img_fwd,
                            beta * agrads.d_img_embs, d_img_states)
    encoders.text_backward(store, mcfg, txt_fwd, beta * agrads.d_txt_embs, None)
    encoders.text_backward(store, mcfg, cond_fwd, None, d_txt_lm)
    store.accumulate("tau", np.asarray(beta * agrads.d_tau))
    return losses


def ledger_sweep(state: RunState, records: list[TrainingPair], stage: str,
                 epoch: int) -> None:
    """Record each pair's alignment loss under the end-of-epoch model.

    Images are encoded with the same mask plans the epoch trained on (so
    the measurement cost stays proportional to the mask ratio); captions
    are the pair's own text, unmasked. Gradient-free, batched in pair-id
    order, overwriting the ledger for every record.
    """
    cfg, mcfg, store = state.cfg, state.mcfg, state.store
    ordered = sorted(records, key=lambda r: r.pair_id)
    tau = float(store.params["tau"])
    chunk = state.schedule.batch_size
    for lo in range(0, len(ordered), chunk):
        part = ordered[lo:lo + chunk]
        img_fwd, _, _ = _image_pass(state, part, cfg.mask_ratio, stage, epoch)
        ids, lengths = _pad(
            [encoders.tokens_to_ids(r.caption, mcfg) for r in part], state)
        txt_fwd = encoders.text_forward(store, mcfg, ids, lengths)
        block = alignment.similarity_block(
            img_fwd["pooled"], txt_fwd["pooled"], tau,
            tuple(r.pair_id for r in part))
        for rec, value in zip(part, alignment.itc_per_sample(block)):
            state.ledger.record(rec.pair_id, float(value))


# ---------------------------------------------------------------------------
# evaluation helpers (unmasked, read-only)

def embed_records(records: list[TrainingPair], mcfg: encoders.ModelConfig,
                  store: ParamStore, chunk: int = 256):
    img_out, txt_out = [], []
    pad_id = mcfg.token_ids[data_synth.PAD]
    for lo in range(0, len(records), chunk):
        part = records[lo:lo + chunk]
        grids = np.stack([r.patch_grid for r in part])
        idx = np.broadcast_to(np.arange(mcfg.patch_count, dtype=np.int64),
                              (len(part), mcfg.patch_count))
        img_fwd = encoders.image_forward(store, mcfg, grids, idx)
        img_out.append(img_fwd["pooled"])
        ids, lengths = encoders.pad_token_batch(
            [encoders.tokens_to_ids(r.caption, mcfg) for r in part], pad_id)
        txt_fwd = encoders.text_forward(store, mcfg, ids, lengths)
        txt_out.append(txt_fwd["pooled"])
    return np.concatenate(img_out), np.concatenate(txt_out)


def eval_retrieval_r1(state: RunState) -> float | None:
    if not state.eval_records:
        return None
    img, txt = embed_records(state.eval_records, state.mcfg, state.store)
    return evaluation.mean_r_at_1(img, txt)


def current_noise_auc(state: RunState) -> float | None:
    if state.estimates is None or not state.train_flags:
        return None
    flags = [state.train_flags[pid] for pid in sorted(state.train_flags)]
    eps = [state.estimates.epsilon.get(pid, 0.0)
           for pid in sorted(state.train_flags)]
    if len(set(flag != data_synth.CLEAN for flag in flags)) < 2:
        return None
    return evaluation.noise_auc(eps, flags)


def _epoch_metrics(state: RunState, stage: int, losses: dict[str, float],
                   include_align: bool = True) -> None:
    state.epoch_counter += 1
    mean_eps = state.estimates.mean_epsilon() if state.estimates else None
    state.metrics.add(
        state.epoch_counter, stage,
        losses.get("ir"), losses.get("lm"),
        losses.get("align") if include_align else None,
        mean_eps, eval_retrieval_r1(state), current_noise_auc(state))


# ---------------------------------------------------------------------------
# stages

def _run_epoch(state: RunState, records: list[TrainingPair], mode: str,
               stage: str, epoch: int, lr_schedule: LrSchedule,
               stage_step: int, adam: AdamConfig) -> tuple[dict, int]:
    order_rng = rng_for(state.schedule.seed, "order", stage, epoch)
    batches = make_batches(len(records), state.schedule.batch_size, order_rng)
    sums = {"ir": 0.0, "lm": 0.0, "align": 0.0}
    count = 0
    state.ledger.start_epoch(epoch)
    started = time.perf_counter()
    for batch_idx in batches:
        batch = [records[i] for i in batch_idx]
        losses = batch_step(state, batch, mode, stage, epoch)
        for key in sums:
            sums[key] += losses[key] * len(batch)
        count += len(batch)
        rate = lr_at(lr_schedule, stage_step)
        sgd_adam_step(state.store, rate, adam)
        zero_grads(state.store)
        stage_step += 1
    state.epoch_seconds.append(time.perf_counter() - started)
    means = {key: value / count for key, value in sums.items()}
    return means, stage_step


def _build_retrieval_assets(state: RunState, corpora: list[Corpus]) -> None:
    """Freeze the retrieval snapshot and cache per-record concepts."""
    state.snapshot = state.store.copy()
    all_captions = [rec.caption for corpus in corpora for rec in corpus.records]
    state.vocab = concepts.build_vocabulary(all_captions, state.cfg.min_frequency)
    if len(state.vocab) == 0:
        for corpus in corpora:
            for rec in corpus.records:
                state.concept_cache[rec.pair_id] = ()
        return
    k = min(state.cfg.top_k, len(state.vocab))
    query = concepts.ConceptQuery(k=k)
    embs = concepts.prompt_embeddings(state.vocab, query.prompt, state.mcfg,
                                      state.snapshot)
    names = state.vocab.tokens()
    for corpus in corpora:
        records = corpus.records
        for lo in range(0, len(records), 256):
            part = records[lo:lo + 256]
            grids = np.stack([r.patch_grid for r in part])
            idx = np.broadcast_to(
                np.arange(state.mcfg.patch_count, dtype=np.int64),
                (len(part), state.mcfg.patch_count))
            fwd = encoders.image_forward(state.snapshot, state.mcfg, grids, idx)
            scores = fwd["pooled"] @ embs.T
            for row, rec in zip(scores, part):
                order = np.argsort(-row, kind="stable")[:k]
                state.concept_cache[rec.pair_id] = tuple(names[i] for i in order)


def stage1_noisy_aware(corpus: Corpus, state: RunState,
                       extra_corpora: list[Corpus] | None = None
                       ) -> tuple[ParamStore, LossLedger, NoiseEstimates]:
    """Warmup epochs with plain alignment, then noise-adaptive epochs.

    Returns the trained store, the final-epoch loss ledger and the last
    noise estimates (all-zero when no adaptive epoch ran).
    """
    if len(corpus.records) == 0:
        raise ContractError("training corpus is empty")
    sched = state.schedule
    if sched.adaptive_epochs > 0 and sched.warmup_epochs == 0:
        raise ConfigError(
            "adaptive epochs need at least one warmup epoch to seed the "
            "loss ledger for the GMM")
    records = training_view(corpus)
    batches_per_epoch = len(make_batches(
        len(records), sched.batch_size, rng_for(sched.seed, "order", "s1", 0)))
    total_steps = (sched.warmup_epochs + sched.adaptive_epochs) * batches_per_epoch
    adam = adam_config(state.cfg)
    step = 0
    if total_steps > 0:
        lr_schedule = stage1_lr_schedule(state.cfg, batches_per_epoch)
        for epoch in range(sched.warmup_epochs):
            losses, step = _run_epoch(state, records, "warmup", "s1", epoch,
                                      lr_schedule, step, adam)
            ledger_sweep(state, records, "s1", epoch)
            _epoch_metrics(state, 1, losses)
    _build_retrieval_assets(
        state, [corpus] + (extra_corpora or []))
    if sched.adaptive_epochs > 0:
        for epoch in range(sched.warmup_epochs,
                           sched.warmup_epochs + sched.adaptive_epochs):
            state.estimates = refresh_epoch(
                state.ledger, sched.lam, state.cfg.gmm_max_iters,
                state.cfg.gmm_tol)
            losses, step = _run_epoch(state, records, "adaptive", "s1", epoch,
                                      lr_schedule, step, adam)
            ledger_sweep(state, records, "s1", epoch)
            _epoch_metrics(state, 1, losses)
        state.estimates = refresh_epoch(
            state.ledger, sched.lam, state.cfg.gmm_max_iters, state.cfg.gmm_tol)
    else:
        state.estimates = zero_estimates(
            [r.pair_id for r in records], sched.lam)
    return state.store, state.ledger, state.estimates


def stage2_captioning(clean_corpus: Corpus, train_corpus: Corpus,
                      state: RunState
                      ) -> dict[int, captioner.SyntheticCaption]:
    """Fine-tune the captioner on the clean split, then synthesize a
    caption for every training record."""
    cfg = state.cfg
    state.store.reset_moments()
    records = training_view(clean_corpus)
    if cfg.captioner_epochs > 0:
        if not records:
            raise ConfigError("captioner fine-tuning needs a nonempty clean split")
        batches_per_epoch = len(make_batches(
            len(records), state.schedule.batch_size,
            rng_for(state.schedule.seed, "order", "s2", 0)))
        steps = cfg.captioner_epochs * batches_per_epoch
        lr_schedule = stage2_lr_schedule(cfg, steps)
        adam = adam_config(cfg)
        step = 0
        for epoch in range(cfg.captioner_epochs):
            losses, step = _run_epoch(state, records, "captioning", "s2",
                                      epoch, lr_schedule, step, adam)
            state.epoch_counter += 1
            state.metrics.add(state.epoch_counter, 2, None, losses["lm"],
                              None,
                              state.estimates.mean_epsilon() if state.estimates else None,
                              eval_retrieval_r1(state), current_noise_auc(state))
    captions: dict[int, captioner.SyntheticCaption] = {}
    for rec in train_corpus.records:
        captions[rec.pair_id] = captioner.generate_caption(
            rec.patch_grid, state.concept_cache.get(rec.pair_id, ()),
            state.mcfg, state.store, strategy="greedy",
            max_len=cfg.max_caption_len, source_pair_id=rec.pair_id)
    return captions


def stage3_conception_enhanced(corpus_prime: Corpus, state: RunState) -> ParamStore:
    """Enhanced epochs on the revised corpus; smoothing off, base rate / 10."""
    sched = state.schedule
    if sched.enhanced_epochs == 0:
        return state.store
    state.store.reset_moments()
    records = training_view(corpus_prime)
    batches_per_epoch = len(make_batches(
        len(records), sched.batch_size, rng_for(sched.seed, "order", "s3", 0)))
    steps = sched.enhanced_epochs * batches_per_epoch
    lr_schedule = stage3_lr_schedule(state.cfg, steps)
    adam = adam_config(state.cfg)
    step = 0
    for epoch in range(sched.enhanced_epochs):
        losses, step = _run_epoch(state, records, "enhanced", "s3", epoch,
                                  lr_schedule, step, adam)
        _epoch_metrics(state, 3, losses)
    return state.store


# ---------------------------------------------------------------------------
# full run

def corpus_fingerprint(corpus: Corpus) -> str:
    text = data_synth.corpus_to_text(corpus)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def init_run(cfg: RunConfig) -> tuple[RunState, Corpus, Corpus, Corpus]:
    cfg.validate()
    world, train, clean, evalc = build_corpora(cfg)
    mcfg = model_config(cfg, world.token_vocab)
    store = encoders.create_store(mcfg, cfg.seed)
    state = RunState(cfg=cfg, mcfg=mcfg, store=store,
                     schedule=StageSchedule.from_config(cfg))
    state.eval_records = training_view(evalc)
    state.train_flags = {r.pair_id: r.noise_flag for r in train.records}
    return state, train, clean, evalc


def run_all(cfg: RunConfig, out_dir: str) -> RunManifest:
    """Execute stages 1-3, writing checkpoints, metrics and the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    state, train, clean, evalc = init_run(cfg)
    config_path = os.path.join(out_dir, "config.effective")
    with open(config_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(render_config(cfg))
    metrics_path = os.path.join(out_dir, "metrics.csv")
    manifest = RunManifest(config_hash=config_hash(cfg),
                           corpus_fingerprint=corpus_fingerprint(train),
                           metrics_path=metrics_path,
                           config_path=config_path)

    def checkpoint(stage: str) -> None:
        path = os.path.join(out_dir, f"ckpt_{stage}.bin")
        save_checkpoint(state.store, path)
        manifest.checkpoints[stage] = path

    stage = "stage1"
    try:
        start = state.store.step
        stage1_noisy_aware(train, state, extra_corpora=[clean])
        manifest.stage_boundaries["stage1"] = [start, state.store.step]
        checkpoint("stage1")

        stage = "stage2"
        start = state.store.step
        captions = stage2_captioning(clean, train, state)
        captioner.save_captions(captions,
                                os.path.join(out_dir, "captions.jsonl"))
        if state.vocab is not None:
            concepts.save_vocabulary(state.vocab,
                                     os.path.join(out_dir, "vocab.tsv"))
        manifest.stage_boundaries["stage2"] = [start, state.store.step]
        checkpoint("stage2")

        stage = "stage3"
        start = state.store.step
        corpus_prime = captioner.complete_corpus(
            train, state.estimates, captions,
            seed_for(cfg.seed, "stage3-completion"))
        stage3_conception_enhanced(corpus_prime, state)
        manifest.stage_boundaries["stage3"] = [start, state.store.step]
        checkpoint("stage3")
    except Exception:
        manifest.status = "failed"
        manifest.failed_stage = stage
        state.metrics.write(metrics_path)
        with open(os.path.join(out_dir, "manifest.json"), "w",
                  encoding="utf-8", newline="\n") as fh:
            fh.write(manifest.to_json())
        raise

    state.metrics.write(metrics_path)
    with open(os.path.join(out_dir, "manifest.json"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write(manifest.to_json())
    return manifest
