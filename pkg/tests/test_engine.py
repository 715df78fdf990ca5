"""Tests for the write / read / forget memory operations."""

import math

import numpy as np
import pytest

from bayespcn.engine import (
    DivergenceError,
    OptimizerConfig,
    Query,
    ReadConfig,
    _read_auto_batch,
    _write_given_activations,
    fit_activations,
    forget,
    read_auto,
    read_hetero,
    write,
)
from bayespcn.gaussian import TopLayerPosterior, log_sum_exp
from bayespcn.network import (
    build_memory,
    grad_mixture_log_joint,
    mixture_log_joint,
)

import oracles
from test_network import mhn_equivalent_memory

# big enough for the sharp post-write modes at unit-test scale, small
# enough to keep the suite fast
ATTRACTOR_READ = ReadConfig(icm_iterations=6, steps_per_phase=1500)


class TestFitActivations:
    def test_stationary_on_empty_memory(self):
        m = build_memory((4, 3), sigma_x2=0.5, seed=0)
        x0 = np.random.default_rng(0).normal(size=4)
        stack = fit_activations(m, x0, cfg=OptimizerConfig(steps=2000))
        np.testing.assert_allclose(stack[0], x0, atol=0)
        grads = grad_mixture_log_joint(m, stack)
        assert np.linalg.norm(grads[1]) < 1e-3

    def test_l0_identity_when_everything_fixed(self):
        m = build_memory((5,), seed=1)
        x0 = np.random.default_rng(1).normal(size=5)
        stack = fit_activations(m, x0)
        assert len(stack) == 1
        np.testing.assert_allclose(stack[0], x0, atol=0)

    def test_monotone_improvement(self):
        m = build_memory((6, 5, 4), sigma_x2=0.1, seed=2)
        x0 = np.random.default_rng(2).uniform(-1, 1, 6)
        start = mixture_log_joint(m, [x0, np.zeros(5), np.zeros(4)])
        stack = fit_activations(m, x0, cfg=OptimizerConfig(steps=300))
        assert mixture_log_joint(m, stack) >= start

    def test_free_sensory_entries_move(self):
        m = build_memory((4, 3), seed=3)
        x0 = np.array([1.0, -1.0, 0.5, 0.0])
        free = np.array([True, False, False, False])
        stack = fit_activations(m, x0, free_x0_mask=free, cfg=OptimizerConfig(steps=50))
        assert stack[0][0] != x0[0]
        np.testing.assert_allclose(stack[0][1:], x0[1:], atol=0)


class TestReadAuto:
    def test_single_item_memory_is_attractor(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-1, 1, 24)
        m = build_memory((24, 16, 16), sigma_w2=1.0, sigma_x2=1e-4, seed=4)
        m = write(m, x)
        recall = read_auto(m, Query(values=x), ATTRACTOR_READ)
        assert float(np.mean((recall - x) ** 2)) < 1e-4

    def test_l0_mixture_read_matches_softmax_oracle(self):
        rng = np.random.default_rng(5)
        keys = rng.uniform(-1, 1, size=(4, 6))
        beta = 100.0
        m = mhn_equivalent_memory(keys, beta)
        q = keys[1] + 0.05 * rng.normal(size=6)
        cfg = ReadConfig(
            icm_iterations=4, steps_per_phase=500,
            optimizer=OptimizerConfig(learning_rate=0.002),
        )
        recall = read_auto(m, Query(values=q), cfg)
        expected = oracles.softmax_recall(keys, beta, q)
        assert float(np.mean((recall - expected) ** 2)) < 1e-4

    def test_empty_memory_read_is_finite(self):
        m = build_memory((8, 6), seed=6)
        q = np.random.default_rng(6).uniform(-1, 1, 8)
        out = read_auto(m, Query(values=q), ReadConfig(icm_iterations=2, steps_per_phase=50))
        assert np.all(np.isfinite(out))

    def test_rejects_masked_query(self):
        m = build_memory((4,), seed=7)
        q = Query(values=np.zeros(4), known_mask=np.array([True, False, True, True]))
        with pytest.raises(ValueError):
            read_auto(m, q)


class TestReadHetero:
    def test_all_known_mask_returns_query(self):
        m = build_memory((6, 4), seed=8)
        q = np.random.default_rng(7).uniform(-1, 1, 6)
        out = read_hetero(
            m, Query(values=q, known_mask=np.ones(6, dtype=bool)),
            ReadConfig(icm_iterations=1, steps_per_phase=20),
        )
        np.testing.assert_allclose(out, q, atol=0)

    def test_single_item_completion(self):
        rng = np.random.default_rng(9)
        x = rng.uniform(-1, 1, 24)
        m = build_memory((24, 16, 16), sigma_x2=1e-4, seed=9)
        m = write(m, x)
        known = np.ones(24, dtype=bool)
        known[rng.choice(24, size=6, replace=False)] = False
        q = x.copy()
        q[~known] = 0.0
        out = read_hetero(m, Query(values=q, known_mask=known),
                          ReadConfig(icm_iterations=10, steps_per_phase=500))
        assert float(np.mean((out - x) ** 2)) < 1e-3
        np.testing.assert_allclose(out[known], x[known], atol=0)

    def test_l0_mixture_matches_masked_oracle(self):
        rng = np.random.default_rng(10)
        keys = rng.uniform(-1, 1, size=(5, 8))
        beta = 100.0
        m = mhn_equivalent_memory(keys, beta)
        known = np.zeros(8, dtype=bool)
        known[:4] = True
        q = keys[2].copy()
        q[~known] = 0.0
        cfg = ReadConfig(
            icm_iterations=6, steps_per_phase=500,
            optimizer=OptimizerConfig(learning_rate=0.002),
        )
        out = read_hetero(m, Query(values=q, known_mask=known), cfg)
        expected = oracles.masked_softmax_recall(keys, beta, q, known)
        assert float(np.mean((out - expected) ** 2)) < 1e-4

    def test_requires_mask(self):
        m = build_memory((4,), seed=11)
        with pytest.raises(ValueError):
            read_hetero(m, Query(values=np.zeros(4)))


class TestWrite:
    def test_top_only_conjugate_example(self):
        m = build_memory((3,), sigma_w2=1.0, sigma_x2=1.0, seed=12)
        m.particles[0].top = TopLayerPosterior(mean=np.zeros(3), var=1.0)
        x = np.array([0.6, -0.2, 1.0])
        out = write(m, x)
        np.testing.assert_allclose(out.particles[0].top.mean, x / 2.0)
        assert out.particles[0].top.var == pytest.approx(0.5)
        assert out.particles[0].log_weight == 0.0
        assert out.write_count == 1

    def test_singleton_weight_stays_zero(self):
        m = build_memory((6, 4), seed=13)
        rng = np.random.default_rng(8)
        for _ in range(3):
            m = write(m, rng.uniform(-1, 1, 6))
            assert m.particles[0].log_weight == 0.0

    def test_weight_normalization_many_particles(self):
        m = build_memory((6, 4), n_particles=3, seed=14)
        rng = np.random.default_rng(9)
        for _ in range(4):
            m = write(m, rng.uniform(-1, 1, 6))
            assert abs(log_sum_exp(m.log_weights())) < 1e-9

    def test_fixed_activation_updates_commute(self):
        m = build_memory((5, 4), seed=15)
        rng = np.random.default_rng(10)
        pairs = [
            ([rng.normal(size=(1, 5)), rng.normal(size=(1, 4))],
             [rng.normal(size=(1, 5)), rng.normal(size=(1, 4))])
            for _ in range(20)
        ]
        for s1, s2 in pairs:
            ab = _write_given_activations(_write_given_activations(m, [s1]), [s2])
            ba = _write_given_activations(_write_given_activations(m, [s2]), [s1])
            for la, lb in zip(ab.particles[0].layers, ba.particles[0].layers):
                np.testing.assert_allclose(la.mean, lb.mean, atol=1e-8)
                np.testing.assert_allclose(la.row_cov, lb.row_cov, atol=1e-8)
            np.testing.assert_allclose(ab.particles[0].top.mean, ba.particles[0].top.mean,
                                       atol=1e-8)

    def test_degenerate_particle_excluded(self):
        m = build_memory((3,), n_particles=2, sigma_x2=1.0, seed=16)
        m.particles[1].top = TopLayerPosterior(mean=np.full(3, 1e200), var=1.0)
        out = write(m, np.zeros(3))
        assert out.particles[1].log_weight == -np.inf
        assert out.particles[0].log_weight == pytest.approx(0.0, abs=1e-12)
        # the dead particle's posterior is frozen, not corrupted
        np.testing.assert_allclose(out.particles[1].top.mean, m.particles[1].top.mean)

    def test_all_degenerate_raises(self):
        m = build_memory((3,), n_particles=2, sigma_x2=1.0, seed=17)
        for p in m.particles:
            p.top = TopLayerPosterior(mean=np.full(3, 1e200), var=1.0)
        with pytest.raises(DivergenceError):
            write(m, np.zeros(3))

    def test_input_unchanged(self):
        m = build_memory((4, 3), seed=18)
        before = m.particles[0].layers[0].mean.copy()
        write(m, np.zeros(4))
        np.testing.assert_allclose(m.particles[0].layers[0].mean, before, atol=0)
        assert m.write_count == 0


class TestForget:
    def test_beta_zero_is_identity(self):
        m = build_memory((5, 3), seed=19)
        m = write(m, np.random.default_rng(11).uniform(-1, 1, 5))
        out = forget(m, 0.0)
        assert np.array_equal(out.particles[0].layers[0].mean, m.particles[0].layers[0].mean)
        assert np.array_equal(out.particles[0].layers[0].row_cov, m.particles[0].layers[0].row_cov)
        assert out.particles[0].top.var == m.particles[0].top.var

    def test_full_forget_then_rewrite_matches_fresh(self):
        rng = np.random.default_rng(12)
        xs = [rng.uniform(-1, 1, 5) for _ in range(3)]
        fresh = build_memory((5, 4), n_particles=2, seed=20)
        used = build_memory((5, 4), n_particles=2, seed=20)
        for x in xs:
            used = write(used, x)
        wiped = forget(used, 1.0)
        for p, prior in zip(wiped.particles, wiped.priors):
            np.testing.assert_allclose(p.layers[0].mean, prior.layers[0].mean, atol=0)
            assert p.top.var == prior.top.var
        redo = fresh
        again = wiped
        for x in xs:
            redo = write(redo, x)
            again = write(again, x)
        for pa, pb in zip(redo.particles, again.particles):
            for la, lb in zip(pa.layers, pb.layers):
                assert np.array_equal(la.mean, lb.mean)
                assert np.array_equal(la.row_cov, lb.row_cov)
            assert np.array_equal(pa.top.mean, pb.top.mean)
            assert pa.top.var == pb.top.var

    def test_geometric_contraction_64_steps(self):
        m = build_memory((5, 4), seed=21)
        m = write(m, np.random.default_rng(13).uniform(-1, 1, 5))
        prior_mean = m.priors[0].layers[0].mean
        gap0 = np.linalg.norm(m.particles[0].layers[0].mean - prior_mean)
        cur = m
        for _ in range(64):
            cur = forget(cur, 0.001)
        gap = np.linalg.norm(cur.particles[0].layers[0].mean - prior_mean)
        assert gap == pytest.approx(0.999**32 * gap0, abs=1e-9)

    def test_beta_out_of_range(self):
        m = build_memory((4,), seed=22)
        with pytest.raises(ValueError):
            forget(m, 1.01)

    def test_weights_unchanged(self):
        m = build_memory((5, 3), n_particles=2, seed=23)
        m = write(m, np.random.default_rng(14).uniform(-1, 1, 5))
        before = m.log_weights()
        out = forget(m, 0.4)
        np.testing.assert_allclose(out.log_weights(), before, atol=0)


class TestReadMonotonicity:
    def test_log_joint_non_decreasing_at_phase_boundaries(self):
        rng = np.random.default_rng(15)
        total, good = 0, 0
        for seed in range(3):
            m = build_memory((12, 8, 8), sigma_x2=1e-3, seed=30 + seed)
            for _ in range(2):
                m = write(m, rng.uniform(-1, 1, 12))
            q = rng.uniform(-1, 1, 12)
            _, bounds = _read_auto_batch(
                m, q[None, :], ReadConfig(icm_iterations=5, steps_per_phase=300)
            )
            vals = [float(b[0]) for b in bounds]
            for a, b in zip(vals, vals[1:]):
                total += 1
                good += b >= a - 1e-6 * max(1.0, abs(a))
        assert good / total >= 0.95
