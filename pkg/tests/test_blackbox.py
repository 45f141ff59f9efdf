"""Black-box attack tests: NES estimator against analytic gradients,
ledger accounting, parsimonious search against exhaustive enumeration,
bandits structure, feasibility of every queried point, and CSR curves."""

import itertools

import numpy as np
import pytest

from opusim import (BanditsConfig, Dense, InputError, LossOracle, Model,
                    NesConfig, ParsimoniousConfig, QueryLedger,
                    bandits_attack, csr_curve, nes_attack, nes_gradient,
                    parsimonious_attack)
from opusim.nn import log_softmax


class FnModel:
    """Duck-typed model built from a logits function; row-stable since it
    only uses elementwise ops and per-row reductions."""

    def __init__(self, fn):
        self.fn = fn

    def forward(self, X):
        X = np.asarray(X)
        if X.ndim == 1:
            return self.fn(X[None])[0]
        return self.fn(X)

    def predict(self, X):
        return np.argmax(self.forward(np.asarray(X)), axis=-1)


def margin_model(w, margin=30.0):
    """Always predicts class 0; loss increases as w.x decreases."""
    w = np.asarray(w, dtype=np.float64)

    def fn(X):
        score = np.sum(X.reshape(len(X), -1) * w.reshape(-1), axis=1)
        logits = np.zeros((len(X), 2))
        logits[:, 0] = margin + score
        return logits

    return FnModel(fn)


def flippable_model(w, bias):
    """Predicts 0 while w.x + bias > 0, class 1 otherwise."""
    w = np.asarray(w, dtype=np.float64)

    def fn(X):
        score = np.sum(X.reshape(len(X), -1) * w.reshape(-1), axis=1) + bias
        logits = np.zeros((len(X), 2))
        logits[:, 0] = score
        return logits

    return FnModel(fn)


class CountingModel:
    """Wraps a model and counts evaluated rows: the ledger oracle."""

    def __init__(self, inner):
        self.inner = inner
        self.rows = 0

    def forward(self, X):
        X = np.asarray(X)
        self.rows += 1 if X.ndim == len(np.shape(X)) and X.ndim == 1 else len(X)
        return self.inner.forward(X)

    def predict(self, X):
        return self.inner.predict(X)


class RecordingModel:
    """Remembers every row it is asked to evaluate."""

    def __init__(self, inner):
        self.inner = inner
        self.seen = []

    def forward(self, X):
        X = np.asarray(X)
        rows = X[None] if X.ndim == 1 else X
        self.seen.extend(np.array(r, copy=True) for r in rows)
        return self.inner.forward(X)


def toy_oracle(fn_model, y, ledger):
    return LossOracle(fn_model, y, ledger)


class TestNesGradient:
    def test_constant_loss_exactly_zero_with_antithetic(self):
        model = FnModel(lambda X: np.tile([1.0, 0.0], (len(X), 1)))
        ledger = QueryLedger(max_queries=10 ** 6)
        oracle = toy_oracle(model, 0, ledger)
        cfg = NesConfig(sigma=0.1, n_samples=40)
        est = nes_gradient(lambda X: oracle(X)[0], np.zeros(5), 0, cfg, ledger,
                           np.random.default_rng(0))
        assert est.complete
        assert np.array_equal(est.grad, np.zeros(5))

    def test_linear_loss_aligns_with_analytic_gradient(self):
        # the cross-entropy of the margin model is monotone in -w.x, so
        # the loss gradient points along -w; check cosine alignment.
        rng = np.random.default_rng(1)
        w = rng.standard_normal(32)
        model = margin_model(w, margin=0.0)
        passes = 0
        for seed in range(10):
            ledger = QueryLedger(max_queries=10 ** 6)
            oracle = toy_oracle(model, 0, ledger)
            cfg = NesConfig(sigma=0.01, n_samples=1000)
            est = nes_gradient(lambda X: oracle(X)[0], np.zeros(32), 0, cfg,
                               ledger, np.random.default_rng(seed))
            target = -w  # analytic direction of the loss gradient
            cos = est.grad @ target / (np.linalg.norm(est.grad)
                                       * np.linalg.norm(target))
            passes += cos > 0.9
        assert passes >= 9

    def test_quadratic_loss_within_ten_percent(self):
        x = np.zeros(4)
        x[0] = 1.0

        def loss_fn(X):
            return 0.5 * np.sum(X * X, axis=1)

        cfg = NesConfig(sigma=0.001, n_samples=2000)
        ledger = QueryLedger(max_queries=10 ** 6)
        est = nes_gradient(loss_fn, x, 0, cfg, ledger,
                           np.random.default_rng(3))
        rel = np.linalg.norm(est.grad - x) / np.linalg.norm(x)
        assert rel < 0.10

    def test_antithetic_unbiased_on_linear_loss(self):
        # mean over >= 1e4 antithetic samples within 2 standard errors
        rng = np.random.default_rng(7)
        w = rng.standard_normal(6)

        def loss_fn(X):
            return X @ w

        cfg = NesConfig(sigma=0.05, n_samples=20000)
        ledger = QueryLedger(max_queries=10 ** 6)
        est = nes_gradient(loss_fn, np.zeros(6), 0, cfg, ledger,
                           np.random.default_rng(8))
        # per-coordinate std of the antithetic estimator is about
        # sqrt(2 (|w|^2 + w_i^2) / N)
        se = np.sqrt(2 * (w @ w + w ** 2) / cfg.n_samples)
        assert np.all(np.abs(est.grad - w) <= 2.5 * se)

    def test_partial_budget_flagged_incomplete(self):
        model = FnModel(lambda X: np.tile([1.0, 0.0], (len(X), 1)))
        ledger = QueryLedger(max_queries=13)
        oracle = toy_oracle(model, 0, ledger)
        cfg = NesConfig(sigma=0.1, n_samples=50)
        est = nes_gradient(lambda X: oracle(X)[0], np.zeros(3), 0, cfg, ledger,
                           np.random.default_rng(0))
        assert not est.complete
        assert est.n_evaluated == 12  # whole antithetic pairs only
        assert ledger.count == 12

    def test_chunking_does_not_change_the_estimate(self):
        def loss_fn(X):
            return np.sum(X ** 3 - 2 * X, axis=1)

        grads = []
        for batch in (7, 1000):
            cfg = NesConfig(sigma=0.1, n_samples=100, batch=batch)
            ledger = QueryLedger(max_queries=10 ** 6)
            est = nes_gradient(loss_fn, np.ones(5), 0, cfg, ledger,
                               np.random.default_rng(5))
            grads.append(est.grad)
        assert np.allclose(grads[0], grads[1], atol=1e-12)

    def test_config_validation(self):
        with pytest.raises(InputError):
            NesConfig(sigma=0.0)
        with pytest.raises(InputError):
            NesConfig(n_samples=51, antithetic=True)
        NesConfig(n_samples=51, antithetic=False)


class TestNesAttack:
    def test_input_ignoring_model_never_succeeds(self):
        model = FnModel(lambda X: np.tile([5.0, 0.0], (len(X), 1)))
        ledger = QueryLedger(max_queries=500)
        cfg = NesConfig(sigma=0.1, n_samples=20)
        out = nes_attack(model, np.zeros((1, 4, 4)), 0, cfg, 0.1, ledger)
        assert not out.success
        assert out.first_success_query is None
        assert ledger.remaining < cfg.n_samples + 1

    def test_linear_toy_with_small_margin_broken(self):
        # margin < eps * |w|_1 makes the vertex x0 - eps*sign(w) adversarial
        w = np.array([1.0, 1.0, -1.0, 0.5])
        model = flippable_model(w, bias=0.2)
        x0 = np.zeros(4)
        assert model.predict(x0[None])[0] == 0
        cfg = NesConfig(sigma=0.05, n_samples=20, step_size=0.1)
        ledger = QueryLedger(max_queries=2000)
        out = nes_attack(model, x0, 0, cfg, epsilon=0.1, ledger=ledger, seed=1,
                         pixel_range=(-1.0, 1.0))
        assert out.success
        assert model.predict(out.x_adv[None])[0] != 0
        assert np.max(np.abs(out.x_adv - x0)) <= 0.1 + 1e-12

    def test_every_query_feasible(self):
        w = np.random.default_rng(0).standard_normal(9)
        inner = margin_model(w)
        spy = RecordingModel(inner)
        x0 = np.full(9, 0.5)
        cfg = NesConfig(sigma=0.3, n_samples=10, step_size=0.05)
        ledger = QueryLedger(max_queries=300)
        nes_attack(spy, x0, 0, cfg, epsilon=0.08, ledger=ledger, seed=2,
                   pixel_range=(0.0, 1.0))
        assert len(spy.seen) == ledger.count
        for q in spy.seen:
            assert np.max(np.abs(q - x0)) <= 0.08 + 1e-12
            assert q.min() >= 0.0 and q.max() <= 1.0

    def test_ledger_matches_instrumented_count(self):
        w = np.random.default_rng(1).standard_normal(6)
        counting = CountingModel(margin_model(w))
        ledger = QueryLedger(max_queries=457)
        cfg = NesConfig(sigma=0.1, n_samples=10)
        nes_attack(counting, np.zeros(6), 0, cfg, 0.1, ledger, seed=0)
        assert counting.rows == ledger.count


class TestParsimonious:
    def brute_force(self, model, x0, y, eps, blocks, pixel_range=(0.0, 1.0)):
        """Exhaustive enumeration over all block-sign assignments."""
        H, W = x0.shape[1], x0.shape[2]
        best = -np.inf
        for assignment in itertools.product((-1.0, 1.0), repeat=len(blocks)):
            pert = np.empty((H, W))
            for s, (r0, r1, c0, c1) in zip(assignment, blocks):
                pert[r0:r1, c0:c1] = s
            cand = np.clip(x0 + eps * pert[None], *pixel_range)
            cand = np.clip(cand, x0 - eps, x0 + eps)
            logits = model.forward(cand[None])[0]
            ls = logits - logits.max()
            loss = -(ls[y] - np.log(np.exp(ls).sum()))
            best = max(best, loss)
        return best

    def loss_of(self, model, x, y):
        logits = model.forward(x[None])
        return float(-log_softmax(logits)[0, y])

    def test_one_block_matches_two_case_enumeration(self):
        w = np.random.default_rng(0).standard_normal(4)
        model = margin_model(w)
        x0 = np.full((1, 2, 2), 0.5)
        cfg = ParsimoniousConfig(epsilon=0.1, init_block_size=2)
        ledger = QueryLedger(max_queries=100)
        out = parsimonious_attack(model, x0, 0, cfg, ledger)
        blocks = [(0, 2, 0, 2)]
        assert self.loss_of(model, out.x_adv, 0) == pytest.approx(
            self.brute_force(model, x0, 0, 0.1, blocks), abs=1e-12)

    @pytest.mark.parametrize("seed", range(6))
    def test_four_blocks_reach_global_optimum(self, seed):
        rng = np.random.default_rng(seed)
        w = rng.standard_normal(16)
        model = margin_model(w)
        x0 = rng.uniform(0.3, 0.7, size=(1, 4, 4))
        cfg = ParsimoniousConfig(epsilon=0.07, init_block_size=2)
        ledger = QueryLedger(max_queries=10 ** 4)
        out = parsimonious_attack(model, x0, 0, cfg, ledger)
        blocks = [(0, 2, 0, 2), (0, 2, 2, 4), (2, 4, 0, 2), (2, 4, 2, 4)]
        assert self.loss_of(model, out.x_adv, 0) == pytest.approx(
            self.brute_force(model, x0, 0, 0.07, blocks), abs=1e-12)

    def test_every_candidate_is_a_ball_vertex(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal(16)
        spy = RecordingModel(margin_model(w))
        x0 = rng.uniform(0.2, 0.8, size=(1, 4, 4))
        eps = 0.09
        cfg = ParsimoniousConfig(epsilon=eps, init_block_size=4)
        ledger = QueryLedger(max_queries=10 ** 4)
        parsimonious_attack(spy, x0, 0, cfg, ledger)
        lo_img = np.clip(x0 - eps, 0.0, 1.0)
        hi_img = np.clip(x0 + eps, 0.0, 1.0)
        assert len(spy.seen) == ledger.count > 0
        for q in spy.seen:
            at_vertex = np.isclose(q, lo_img, atol=0) | np.isclose(q, hi_img,
                                                                   atol=0)
            assert np.all(at_vertex)

    def test_stops_at_first_misclassified_query(self):
        w = np.ones(4)
        model = flippable_model(w, bias=-1.5)  # flips at the all-low vertex
        x0 = np.full((1, 2, 2), 0.5)
        cfg = ParsimoniousConfig(epsilon=0.2, init_block_size=2)
        ledger = QueryLedger(max_queries=100)
        out = parsimonious_attack(model, x0, 0, cfg, ledger)
        # all-(-eps) start flips the prediction immediately
        assert out.success and out.first_success_query == 1
        assert model.predict(out.x_adv[None])[0] != 0

    def test_budget_exhaustion_is_a_failure_outcome(self):
        w = np.random.default_rng(4).standard_normal(16)
        model = margin_model(w)
        x0 = np.full((1, 4, 4), 0.5)
        cfg = ParsimoniousConfig(epsilon=0.05, init_block_size=1)
        ledger = QueryLedger(max_queries=5)
        out = parsimonious_attack(model, x0, 0, cfg, ledger)
        assert not out.success
        assert ledger.count <= 5

    def test_hierarchical_mode_rejected(self):
        with pytest.raises(InputError):
            ParsimoniousConfig(hierarchical=True)

    def test_block_split_covers_remainders(self):
        from opusim.blackbox import _block_grid
        blocks = _block_grid(5, 5, 4)
        covered = np.zeros((5, 5), dtype=int)
        for r0, r1, c0, c1 in blocks:
            covered[r0:r1, c0:c1] += 1
        assert np.all(covered == 1)


class TestBandits:
    def test_zero_exploration_rejected_at_validation(self):
        with pytest.raises(InputError):
            BanditsConfig(exploration=0.0)

    def test_prior_size_equal_to_image_side_runs(self):
        w = np.random.default_rng(0).standard_normal(16)
        model = margin_model(w)
        cfg = BanditsConfig(sigma=0.1, prior_size=4)
        ledger = QueryLedger(max_queries=100)
        out = bandits_attack(model, np.full((1, 4, 4), 0.5), 0, cfg, 0.1,
                             ledger, seed=0)
        assert not out.success  # margin model never flips

    def test_every_query_feasible_and_counted(self):
        w = np.random.default_rng(1).standard_normal(16)
        spy = RecordingModel(margin_model(w))
        x0 = np.full((1, 4, 4), 0.5)
        cfg = BanditsConfig(sigma=0.5, prior_size=2, image_step=0.04)
        ledger = QueryLedger(max_queries=200)
        bandits_attack(spy, x0, 0, cfg, 0.06, ledger, seed=1)
        assert len(spy.seen) == ledger.count > 0
        for q in spy.seen:
            assert np.max(np.abs(q - x0)) <= 0.06 + 1e-12
            assert q.min() >= 0.0 and q.max() <= 1.0

    def test_breaks_linear_toy(self):
        w = np.array([2.0, 1.0, -1.0, 1.5])
        model = flippable_model(w, bias=0.15)
        cfg = BanditsConfig(sigma=0.1, prior_size=2, image_step=0.05)
        ledger = QueryLedger(max_queries=3000)
        out = bandits_attack(model, np.full((1, 2, 2), 0.0), 0, cfg, 0.15,
                             ledger, seed=3, pixel_range=(-1.0, 1.0))
        assert out.success


class TestBatchedEqualsSequential:
    def test_oracle_batched_rows_equal_sequential_rows(self):
        w = np.random.default_rng(2).standard_normal(8)
        model = margin_model(w)  # row-stable arithmetic
        X = np.random.default_rng(3).uniform(0, 1, size=(32, 8))
        batched_ledger = QueryLedger(max_queries=10 ** 4)
        batched = LossOracle(model, 0, batched_ledger)(X)[0]
        seq = np.concatenate([
            LossOracle(model, 0, QueryLedger(max_queries=10))(X[i:i + 1])[0]
            for i in range(32)
        ])
        assert np.array_equal(batched, seq)
        assert batched_ledger.count == 32

    def test_parsimonious_decisions_independent_of_eval_batch(self):
        rng = np.random.default_rng(5)
        w = rng.standard_normal(16)
        model = margin_model(w)
        x0 = rng.uniform(0.3, 0.7, size=(1, 4, 4))
        losses = []
        for batch in (1, 64):
            cfg = ParsimoniousConfig(epsilon=0.07, init_block_size=1,
                                     batch=batch)
            ledger = QueryLedger(max_queries=10 ** 4)
            out = parsimonious_attack(model, x0, 0, cfg, ledger)
            logits = model.forward(out.x_adv[None])
            losses.append(float(-log_softmax(logits)[0, 0]))
        assert losses[0] == pytest.approx(losses[1], abs=1e-12)


class TestQueryLedger:
    def test_cap_enforced(self):
        ledger = QueryLedger(max_queries=3)
        ledger.record([0.1, 0.2], [False, False])
        with pytest.raises(InputError):
            ledger.record([0.1, 0.2], [False, False])

    def test_events_are_one_per_evaluation(self):
        ledger = QueryLedger(max_queries=10)
        ledger.record([0.1, 0.2, 0.3], [False, True, False])
        assert ledger.count == 3
        assert [e.index for e in ledger.events] == [1, 2, 3]
        assert ledger.first_success() == 2


class TestCsrCurve:
    def test_all_failures_constant_zero(self):
        q, f = csr_curve([None, None, None], max_queries=100)
        assert np.array_equal(q, [0, 100])
        assert np.array_equal(f, [0.0, 0.0])

    def test_single_success_at_query_one(self):
        q, f = csr_curve([1], max_queries=50)
        assert np.array_equal(q, [0, 1, 50])
        assert np.array_equal(f, [0.0, 1.0, 1.0])

    def test_two_successes_step_function(self):
        q, f = csr_curve([10, 100], max_queries=200)
        assert np.array_equal(q, [0, 10, 100, 200])
        assert np.array_equal(f, [0.0, 0.5, 1.0, 1.0])

    def test_monotone_nondecreasing_property(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(1, 30))
            firsts = [int(rng.integers(1, 1000)) if rng.random() < 0.6 else None
                      for _ in range(n)]
            q, f = csr_curve(firsts, max_queries=1000)
            assert np.all(np.diff(f) >= 0)
            assert np.all(np.diff(q) > 0)
            assert q[0] == 0 and q[-1] == 1000

    def test_empty_collection_rejected(self):
        with pytest.raises(InputError):
            csr_curve([], max_queries=10)

    def test_duplicate_success_indices_collapse(self):
        q, f = csr_curve([5, 5, None, 7], max_queries=10)
        assert np.array_equal(q, [0, 5, 7, 10])
        assert np.array_equal(f, [0.0, 0.5, 0.75, 0.75])
