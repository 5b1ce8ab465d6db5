import numpy as np
import pytest

from nliplab import data_synth, encoders, pipeline
from nliplab.config import RunConfig


def tiny_run_config(**overrides) -> RunConfig:
    """Small everything: fast end-to-end paths for unit tests."""
    base = dict(
        n_train=12, n_eval=6, batch_size=6, patch_count=6, d_img=6,
        d_txt=6, d_embed=6, num_concepts=4, concepts_per_image=2,
        noise_std=0.2, blocks=2, mae_blocks=1, captioner_blocks=2,
        E_e=1, E_t=1, E_f=1, captioner_epochs=1, max_caption_len=12,
        min_frequency=1, top_k=2, n_eval_override=None,
    )
    base.pop("n_eval_override")
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture
def tiny_state():
    cfg = tiny_run_config()
    state, train, clean, evalc = pipeline.init_run(cfg)
    return state, train, clean, evalc


@pytest.fixture
def tiny_world():
    return data_synth.generate_world(4, 6, seed=7)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray,
                    floor: float = 1e-5, noise: float = 1e-8) -> np.ndarray:
    """Elementwise |a - f| / max(|a|, |f|, floor).

    Central differences at h = 1e-6 on O(1)-O(10) losses carry ~1e-9 of
    rounding noise; differences at or below ``noise`` are treated as exact
    so near-zero gradient elements are not flagged spuriously. Any real
    missing-term bug shows up orders of magnitude above this guard.
    """
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(a - f)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
    return np.where(diff <= noise, 0.0, diff / denom)


def finite_difference_check(loss_fn, store, params=None, h: float = 1e-6,
                            tol: float = 1e-4) -> float:
    """Compare store.grads against central differences of ``loss_fn``.

    ``loss_fn()`` must rebuild the forward pass from the current parameter
    values. Gradients must already be accumulated. Returns the worst
    relative error over every element of every checked parameter.
    """
    worst = 0.0
    names = params if params is not None else list(store.params)
    for name in names:
        p = store.params[name]
        flat = p.reshape(-1) if p.ndim else p.reshape(1)
        analytic = store.grads[name]
        aflat = analytic.reshape(-1) if analytic.ndim else analytic.reshape(1)
        numeric = np.empty_like(aflat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * h)
        err = float(relative_errors(aflat, numeric).max())
        assert err <= tol, f"gradient mismatch in {name}: rel err {err:.3e}"
        worst = max(worst, err)
    return worst


def batch_arrays(records, mcfg: encoders.ModelConfig):
    """Pad a record batch's captions; convenience for loss-level tests."""
    pad = mcfg.token_ids[data_synth.PAD]
    seqs = [encoders.tokens_to_ids(r.caption, mcfg) for r in records]
    return encoders.pad_token_batch(seqs, pad)


def gradient_scenario(kind: str, seed: int):
    """(loss_fn, run_backward, store) for one loss path on a small config.

    ``kind`` is one of itc / nitc / ir / lm. The forward rebuilds from the
    current parameter values, so ``loss_fn`` is finite-difference-ready;
    ``run_backward`` zeroes gradients, reruns the forward and accumulates
    analytic gradients for every parameter the loss touches.
    """
    import numpy as np

    from nliplab import alignment, captioner
    from nliplab.diffcore import zero_grads
    from nliplab.seeding import seed_for

    rng = np.random.default_rng(seed)
    world = data_synth.generate_world(4, 6, seed=seed)
    mcfg = encoders.ModelConfig(
        d_img=6, d_txt=6, d_embed=6, vocab=world.token_vocab, patch_count=6,
        blocks=2, mae_blocks=1, captioner_blocks=2, max_text_len=24)
    store = encoders.create_store(mcfg, seed=seed + 1)
    corpus = data_synth.generate_corpus(world, 3, 2, patch_count=6,
                                        noise_std=0.3, start_id=0)
    records = data_synth.training_view(corpus)
    w = rng.uniform(0.0, 0.6, size=len(records))
    pad = mcfg.token_ids[data_synth.PAD]

    plans = [encoders.mask_patches(r.patch_grid, 0.5,
                                   seed_for(seed, "m", r.pair_id))[1]
             for r in records]
    visible = np.stack([r.patch_grid[p.visible_indices]
                        for r, p in zip(records, plans)])
    vis_idx = np.stack([p.visible_indices for p in plans])
    masked_idx = np.stack([p.masked_indices for p in plans])
    grids = np.stack([r.patch_grid for r in records])
    masked_caps = [encoders.span_mask_text(
        r.caption, 3.0, seed_for(seed, "s", r.pair_id)) for r in records]
    cond = [captioner.conditioning_tokens(("c00", "c01"), m)
            for m in masked_caps]

    def run(with_backward: bool) -> float:
        if kind in ("itc", "nitc"):
            img_fwd = encoders.image_forward(store, mcfg, visible, vis_idx)
            ids, lengths = encoders.pad_token_batch(
                [encoders.tokens_to_ids(t, mcfg) for t in masked_caps], pad)
            txt_fwd = encoders.text_forward(store, mcfg, ids, lengths)
            block = alignment.similarity_block(
                img_fwd["pooled"], txt_fwd["pooled"],
                float(store.params["tau"]))
            if kind == "itc":
                loss, _, grads = alignment.itc_loss(block)
            else:
                loss, _, grads = alignment.nitc_loss(block, w)
            if with_backward:
                encoders.image_backward(store, mcfg, img_fwd,
                                        grads.d_img_embs, None)
                encoders.text_backward(store, mcfg, txt_fwd,
                                       grads.d_txt_embs, None)
                store.accumulate("tau", np.asarray(grads.d_tau))
            return loss
        if kind == "ir":
            img_fwd = encoders.image_forward(store, mcfg, visible, vis_idx)
            ir_fwd = encoders.ir_forward(store, mcfg, img_fwd["token_states"],
                                         masked_idx, grids)
            if with_backward:
                d_states = encoders.ir_backward(store, mcfg, ir_fwd, 1.0)
                encoders.image_backward(store, mcfg, img_fwd, None, d_states)
            return ir_fwd["loss"]
        if kind == "lm":
            img_fwd = encoders.image_forward(store, mcfg, visible, vis_idx)
            cond_ids, cond_len = encoders.pad_token_batch(
                [encoders.tokens_to_ids(t, mcfg) for t in cond], pad)
            cond_fwd = encoders.text_forward(store, mcfg, cond_ids, cond_len)
            tids, tlen = encoders.pad_token_batch(
                [encoders.tokens_to_ids(r.caption, mcfg) for r in records],
                pad)
            state = captioner.DecoderState(
                text_states=cond_fwd["token_states"],
                text_valid=cond_fwd["valid"],
                image_states=img_fwd["token_states"])
            lm_fwd = captioner.lm_forward(store, mcfg, tids, tlen, state)
            if with_backward:
                d_img, d_txt = captioner.lm_backward(store, mcfg, lm_fwd, 1.0)
                encoders.image_backward(store, mcfg, img_fwd, None, d_img)
                encoders.text_backward(store, mcfg, cond_fwd, None, d_txt)
            return lm_fwd["loss"]
        raise ValueError(kind)

    def run_backward() -> float:
        zero_grads(store)
        return run(True)

    return (lambda: run(False)), run_backward, store
