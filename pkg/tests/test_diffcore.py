import numpy as np
import pytest

from nliplab.diffcore import (AdamConfig, LrSchedule, ParamStore, decays,
                              init_params, load_checkpoint, lr_at,
                              save_checkpoint, sgd_adam_step, zero_grads)
from nliplab.errors import ContractError, NumericalError, ParseError


def small_store() -> ParamStore:
    store = ParamStore()
    store.add("w", np.array([[1.0, -2.0], [0.5, 3.0]]))
    store.add("b_bias", np.array([0.25, -0.75]))
    return store


class TestZeroGrads:
    def test_zeroes_all_buffers(self):
        store = small_store()
        store.grads["w"][...] = np.array([[1.0, -2.0], [3.0, 4.0]])
        store.grads["b_bias"][...] = 1.0
        zero_grads(store)
        for g in store.grads.values():
            assert np.all(g == 0.0)

    def test_parameters_untouched(self):
        store = small_store()
        before = {k: v.copy() for k, v in store.params.items()}
        store.grads["w"][...] = 5.0
        zero_grads(store)
        for k, v in store.params.items():
            np.testing.assert_array_equal(v, before[k])

    def test_empty_store(self):
        store = ParamStore()
        zero_grads(store)
        assert store.params == {}

    def test_idempotent(self):
        store = small_store()
        store.grads["w"][...] = 2.0
        once = zero_grads(store)
        snap = {k: v.copy() for k, v in once.grads.items()}
        twice = zero_grads(store)
        for k in snap:
            np.testing.assert_array_equal(twice.grads[k], snap[k])


class TestLrSchedule:
    SCHED = LrSchedule(base_rate=0.003, warmup_steps=100, total_steps=1000,
                       min_rate=0.0)

    def test_ramp_start(self):
        assert lr_at(self.SCHED, 0) == 0.0

    def test_ramp_end(self):
        assert lr_at(self.SCHED, 100) == pytest.approx(0.003, abs=1e-15)

    def test_decay_midpoint(self):
        # half-cosine evaluated directly: base * 0.5 * (1 + cos(pi/2))
        expected = 0.003 * 0.5 * (1.0 + np.cos(np.pi / 2.0))
        assert lr_at(self.SCHED, 550) == pytest.approx(expected, rel=1e-12)
        assert lr_at(self.SCHED, 550) == pytest.approx(0.0015, rel=1e-12)

    def test_final_step_hits_min_rate(self):
        sched = LrSchedule(base_rate=0.01, warmup_steps=10, total_steps=50,
                           min_rate=0.002)
        assert lr_at(sched, 50) == pytest.approx(0.002, abs=1e-15)

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            lr_at(self.SCHED, -1)
        with pytest.raises(ContractError):
            lr_at(self.SCHED, 1001)

    def test_monotone_up_then_down(self):
        rates = [lr_at(self.SCHED, s) for s in range(0, 1001)]
        warm = rates[:101]
        decay = rates[100:]
        assert all(b >= a for a, b in zip(warm, warm[1:]))
        assert all(b <= a for a, b in zip(decay, decay[1:]))

    def test_invalid_construction(self):
        with pytest.raises(ContractError):
            LrSchedule(base_rate=0.0, warmup_steps=0, total_steps=1)
        with pytest.raises(ContractError):
            LrSchedule(base_rate=0.1, warmup_steps=5, total_steps=5)


class TestAdamStep:
    def test_zero_gradients_leave_parameters_bit_identical(self):
        store = small_store()
        before = {k: v.copy() for k, v in store.params.items()}
        sgd_adam_step(store, rate=0.1)
        for k, v in store.params.items():
            assert np.array_equal(v, before[k])
        assert store.step == 1

    def test_hand_evaluated_single_step(self):
        # p=1, g=1: bias-corrected m_hat = v_hat = 1, so p <- 1 - 0.1/(1+eps)
        store = ParamStore()
        store.add("p", np.array(1.0))
        store.grads["p"][...] = 1.0
        sgd_adam_step(store, rate=0.1,
                      config=AdamConfig(beta1=0.9, beta2=0.999, eps=1e-8))
        expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8))
        assert float(store.params["p"]) == pytest.approx(expected, abs=1e-12)
        assert float(store.params["p"]) == pytest.approx(0.9, abs=1e-8)

    def test_constant_gradient_monotone_decrease(self):
        store = ParamStore()
        store.add("p", np.array(5.0))
        values = [5.0]
        for _ in range(50):
            store.grads["p"][...] = 0.37
            sgd_adam_step(store, rate=0.01)
            values.append(float(store.params["p"]))
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_non_finite_gradient_names_parameter(self):
        store = small_store()
        store.grads["b_bias"][0] = np.nan
        with pytest.raises(NumericalError, match="b_bias"):
            sgd_adam_step(store, rate=0.1)

    def test_clamp_applied(self):
        store = ParamStore()
        store.add("tau", np.array(0.0015))
        store.grads["tau"][...] = 1.0
        sgd_adam_step(store, rate=0.1,
                      config=AdamConfig(clamps={"tau": (1e-3, 10.0)}))
        assert float(store.params["tau"]) == pytest.approx(1e-3)

    def test_weight_decay_exclusions(self):
        assert decays("img.blk0.attn.wq")
        assert not decays("img.blk0.attn.q_bias")
        assert not decays("txt.tok_embed")
        assert not decays("txt.pos")
        assert not decays("img.cls")
        assert not decays("dec.mask_token")
        assert not decays("tau")


class TestInit:
    def test_named_streams_are_order_independent(self):
        a = init_params({"x.w": (4, 4), "y.w": (3, 3)}, root_seed=9)
        b = init_params({"y.w": (3, 3), "x.w": (4, 4), "z.w": (2, 2)}, root_seed=9)
        np.testing.assert_array_equal(a.params["x.w"], b.params["x.w"])
        np.testing.assert_array_equal(a.params["y.w"], b.params["y.w"])

    def test_scale_respects_fan_in(self):
        store = init_params({"x.w": (100, 3)}, root_seed=1)
        assert np.abs(store.params["x.w"]).max() <= 1.0 / np.sqrt(100)

    def test_bias_starts_zero(self):
        store = init_params({"x.w_bias": (7,)}, root_seed=1)
        assert np.all(store.params["x.w_bias"] == 0.0)


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path):
        store = small_store()
        store.grads["w"][...] = 1.0
        sgd_adam_step(store, rate=0.05)
        store.grads["w"][...] = -0.5
        sgd_adam_step(store, rate=0.05)
        path = str(tmp_path / "ckpt.bin")
        save_checkpoint(store, path)
        loaded = load_checkpoint(path)
        assert loaded.step == store.step
        for section in ("params", "m", "v"):
            for name, arr in getattr(store, section).items():
                assert np.array_equal(getattr(loaded, section)[name], arr)

    def test_double_roundtrip_identical_bytes(self, tmp_path):
        store = small_store()
        p1, p2 = str(tmp_path / "a.bin"), str(tmp_path / "b.bin")
        save_checkpoint(store, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(ParseError):
            load_checkpoint(str(path))

    def test_truncated(self, tmp_path):
        store = small_store()
        path = str(tmp_path / "ckpt.bin")
        save_checkpoint(store, path)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[: len(blob) // 2])
        with pytest.raises(ParseError):
            load_checkpoint(path)
