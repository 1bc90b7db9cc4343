import math

import numpy as np
import pytest

from dynaeval.autodiff import Tensor
from dynaeval.model import ModelConfig, Params
from dynaeval.optim import AdamWState, ScheduleConfig, adamw_step, lr_at, throttled_update

CFG = ModelConfig(num_blocks=1, d_model=2, num_heads=1, kv_size=2, ffn_mult=1, vocab_size=4, context_length=4)


def scalar_params(value: float) -> Params:
    t = Tensor(np.array([value], dtype=np.float64), requires_grad=True)
    return Params(config=CFG, tensors={"w": t})


def reference_adam(theta, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Hand-stepped Adam with bias correction, one scalar trajectory."""
    m = v = 0.0
    out = []
    for step, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**step)
        v_hat = v / (1 - beta2**step)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        out.append(theta)
    return out


class TestAdamW:
    def test_zero_grads_no_decay_leaves_params(self):
        p = scalar_params(3.0)
        st = AdamWState(p, lr=0.1)
        p["w"].grad = np.zeros(1)
        assert adamw_step(p, st)
        assert p["w"].data[0] == 3.0
        assert st.step == 1

    def test_decoupled_decay_only(self):
        p = scalar_params(2.0)
        st = AdamWState(p, lr=0.01, weight_decay=0.1)
        p["w"].grad = np.zeros(1)
        adamw_step(p, st)
        assert p["w"].data[0] == pytest.approx(2.0 * (1 - 0.001), rel=1e-12)

    def test_first_step_matches_hand_formula(self):
        # theta=0, g=1, lr=0.1: m_hat = v_hat = 1 -> theta = -0.1 / (1 + eps')
        p = scalar_params(0.0)
        st = AdamWState(p, lr=0.1)
        p["w"].grad = np.ones(1)
        adamw_step(p, st)
        expected = reference_adam(0.0, [1.0], lr=0.1)[-1]
        assert p["w"].data[0] == pytest.approx(expected, abs=1e-12)
        assert p["w"].data[0] == pytest.approx(-0.1, rel=1e-6)

    def test_matches_reference_on_100_trajectories(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            theta0 = float(rng.normal())
            grads = rng.normal(size=8)
            lr = float(10 ** rng.uniform(-4, -1))
            p = scalar_params(theta0)
            st = AdamWState(p, lr=lr)
            mine = []
            for g in grads:
                p["w"].grad = np.array([g])
                adamw_step(p, st)
                mine.append(float(p["w"].data[0]))
            ref = reference_adam(theta0, grads, lr)
            np.testing.assert_allclose(mine, ref, atol=1e-10)

    def test_nonfinite_grad_skips_update_entirely(self):
        p = scalar_params(1.0)
        st = AdamWState(p, lr=0.1)
        p["w"].grad = np.array([math.nan])
        assert not adamw_step(p, st)
        assert p["w"].data[0] == 1.0
        assert st.step == 0
        assert st.skipped == 1
        assert st.m["w"][0] == 0.0

    def test_missing_grad_raises(self):
        p = scalar_params(1.0)
        st = AdamWState(p, lr=0.1)
        with pytest.raises(ValueError, match="missing gradient"):
            adamw_step(p, st)

    def test_clip_norm(self):
        p = scalar_params(0.0)
        st = AdamWState(p, lr=0.1, clip_norm=1.0)
        p["w"].grad = np.array([10.0])
        adamw_step(p, st)
        clipped = reference_adam(0.0, [1.0], lr=0.1)[-1]
        assert p["w"].data[0] == pytest.approx(clipped, abs=1e-12)

    def test_zero_lr_is_bit_identical(self):
        p = scalar_params(1.2345678)
        before = p["w"].data.copy()
        st = AdamWState(p, lr=0.0)
        for g in (0.5, -2.0, 3.0):
            p["w"].grad = np.array([g])
            adamw_step(p, st)
        assert np.array_equal(p["w"].data, before)

    def test_snapshot_restore(self):
        p = scalar_params(1.0)
        st = AdamWState(p, lr=0.1)
        p["w"].grad = np.ones(1)
        adamw_step(p, st)
        snap = st.snapshot()
        p["w"].grad = np.ones(1)
        adamw_step(p, st)
        st.restore(snap)
        assert st.step == 1
        assert st.m["w"][0] == pytest.approx(0.1)


class TestSchedule:
    SCHED = ScheduleConfig(kind="warmup_cosine", warmup_steps=100, total_steps=1100, max_lr=2e-4)

    def test_step_zero(self):
        assert lr_at(0, self.SCHED) == 0.0

    def test_warmup_end(self):
        assert lr_at(100, self.SCHED) == pytest.approx(2e-4)

    def test_decay_midpoint(self):
        # midpoint of the cosine segment: max_lr * (1 + cos(pi/2)) / 2 = max_lr / 2
        mid = (self.SCHED.warmup_steps + self.SCHED.total_steps) // 2
        expected = 2e-4 * 0.5 * (1.0 + math.cos(math.pi * 0.5))
        assert lr_at(mid, self.SCHED) == pytest.approx(expected)
        assert lr_at(mid, self.SCHED) == pytest.approx(1e-4)

    def test_clamped_beyond_total(self):
        assert lr_at(self.SCHED.total_steps + 500, self.SCHED) == 0.0

    def test_constant(self):
        sched = ScheduleConfig(kind="constant", max_lr=3e-5)
        assert lr_at(0, sched) == 3e-5
        assert lr_at(10**6, sched) == 3e-5

    def test_invalid(self):
        with pytest.raises(ValueError):
            ScheduleConfig(kind="linear")
        with pytest.raises(ValueError):
            ScheduleConfig(kind="warmup_cosine", warmup_steps=10, total_steps=5)
        with pytest.raises(ValueError):
            lr_at(-1, self.SCHED)


class TestThrottle:
    def test_every_increment_at_one(self):
        assert all(throttled_update(i, 1) for i in range(10))

    def test_counting_n4(self):
        updates = [i for i in range(10) if throttled_update(i, 4)]
        assert updates == [3, 7]

    def test_floor_invariant(self):
        for n in (1, 2, 3, 5, 8):
            for total in (1, 7, 16, 33):
                count = sum(throttled_update(i, n) for i in range(total))
                assert count == total // n

    def test_bad_frequency(self):
        with pytest.raises(ValueError):
            throttled_update(0, 0)
