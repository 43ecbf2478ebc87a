import io
import json
from dataclasses import replace

import numpy as np
import pytest

from epo.core import EngineError, EpoConfig, InputError, ScoredPrompt, combined_objective
from epo.engine import (
    Population,
    RunAborted,
    Scorer,
    best_index,
    init_population,
    propose_children,
    restart,
    run,
    select,
    topk_candidates,
)
from epo.objectives import FeatureSpec, rejected_tokens

NEURON = FeatureSpec("neuron", layer=1, index=3)
SHORT = EpoConfig(T=12, M=4, r=8, k=16, n=6, T_restart=5, seed=3)


def sp(f, ce, seq):
    return ScoredPrompt(tuple(seq), f, (ce,))


class TestInit:
    def test_user_init(self, toy_vocab):
        seq = toy_vocab.encode("the dog runs")
        assert init_population(EpoConfig(n=3, M=5), toy_vocab, seq) == [seq] * 5

    def test_user_init_length(self, toy_vocab):
        with pytest.raises(InputError):
            init_population(EpoConfig(n=4), toy_vocab, toy_vocab.encode("the dog"))

    def test_seeded(self, toy_vocab):
        c = EpoConfig(seed=9)
        assert init_population(c, toy_vocab) == init_population(c, toy_vocab)
        assert init_population(c, toy_vocab) != init_population(replace(c, seed=10), toy_vocab)

    def test_rejected_never_drawn(self, toy_vocab):
        patterns = ["dog", "cat", "fox", "Rex"]
        mask = rejected_tokens(toy_vocab, patterns)
        banned = set(np.flatnonzero(mask).tolist())
        assert len(banned) >= 4
        for seed in range(1000):
            for seq in init_population(EpoConfig(seed=seed, M=2, n=6, reject_substrings=patterns), toy_vocab):
                assert not banned & set(seq)


class TestTopK:
    def test_crafted_gradient(self):
        grad = np.zeros((3, 8))
        grad[0, 5] = 10.0
        grad[0, 2] = 9.0
        cand = topk_candidates(grad, (2, 0, 0), 1)
        # t2 is the current token at position 0, so t5 is the top admissible choice
        assert cand[0, 0] == 5
        rng = np.random.default_rng(0)
        member = sp(0, 1, (2, 0, 0))
        cfg = EpoConfig(k=1, r=64, n=3)
        for child in propose_children(member, grad, cfg, rng):
            if child[0] != 2:
                assert child[0] == 5

    def test_k1_takes_argmax(self, rng):
        grad = rng.standard_normal((4, 10))
        seq = (0, 1, 2, 3)
        cand = topk_candidates(grad, seq, 1)
        for j in range(4):
            g = grad[j].copy()
            g[seq[j]] = -np.inf
            assert cand[j, 0] == int(np.argmax(g))

    def test_signed_vs_abs(self):
        grad = np.array([[0.0, -5.0, 1.0, 0.5]])
        assert topk_candidates(grad, (0,), 1, "signed")[0, 0] == 2
        assert topk_candidates(grad, (0,), 1, "abs")[0, 0] == 1

    def test_reject_mask_and_clamp(self):
        grad = np.arange(6.0)[None, :]
        mask = np.array([False, False, False, False, True, True])
        with pytest.warns(RuntimeWarning, match="clamping"):
            cand = topk_candidates(grad, (0,), 10, reject_mask=mask)
        assert cand.tolist() == [[3, 2, 1]]

    def test_no_admissible(self):
        with pytest.raises(EngineError):
            topk_candidates(np.zeros((1, 2)), (0,), 1, reject_mask=np.array([False, True]))


class TestSelect:
    def test_single_candidate(self):
        a = sp(1, 1, (1,))
        assert select([a], [0.1, 1, 10]) == [a, a, a]

    def test_two_candidate_grid(self):
        a, b = sp(4, 4, (1,)), sp(1, 0.5, (2,))
        assert combined_objective(a, 0.1) == pytest.approx(3.6)
        assert combined_objective(b, 0.1) == pytest.approx(0.95)
        assert combined_objective(a, 10) == -36 and combined_objective(b, 10) == -4
        assert select([a, b], [0.1, 10]) == [a, b]

    def test_ties(self):
        pool = [sp(2, 1, (3,)), sp(1, 0, (2,)), sp(2, 1, (1,))]
        # lambda=0: feature tie between 0 and 2 at equal ce -> lexicographic ids
        assert best_index(pool, 0.0) == 2
        # lambda=1: all three score 1 -> lowest ce wins
        assert best_index(pool, 1.0) == 1

    def test_empty(self):
        with pytest.raises(EngineError):
            select([], [1.0])


class TestRestart:
    def test_single_slot_noop(self):
        a = sp(1, 1, (4,))
        pop, _ = restart(Population([a]), np.random.default_rng(0), EpoConfig(M=1))
        assert pop.members == [a]

    def test_collapses_to_linear_scan_argmax(self, rng):
        members = [sp(float(rng.normal()), float(rng.uniform(0, 5)), (i,)) for i in range(8)]
        for seed in range(50):
            pop, lam = restart(Population(members), np.random.default_rng(seed), EpoConfig())
            assert 0.667 <= lam <= 6.0
            scores = [m.feature - lam * m.mean_ce for m in members]
            assert pop.unique() == 1 and len(pop) == 8
            assert pop.members[0] is members[int(np.argmax(scores))]


class TestRun:
    def test_zero_iterations(self, small_model):
        res = run(replace(SHORT, T=0), small_model, NEURON)
        init = init_population(SHORT, small_model.vocab)
        assert res.per_iteration_log == []
        assert {h.seq for h in res.archive.history} == set(init)
        assert all(p.iteration == 0 for p in res.archive.points)

    def test_contracts_every_iteration(self, small_model):
        grid = SHORT.grid()
        events = []

        def check(e):
            events.append(e)
            # the pool is slot-major: r children per parent, each one token away from it
            assert len(e.pool) == SHORT.M * SHORT.r
            for i, c in enumerate(e.pool):
                parent = e.parents.members[i // SHORT.r].seq
                assert sum(a != b for a, b in zip(c.seq, parent)) == 1
            for lam, chosen in zip(grid, e.population.members):
                best = max(combined_objective(c, lam) for c in e.pool)
                assert combined_objective(chosen, lam) == best

        res = run(SHORT, small_model, NEURON, observer=check)
        assert len(events) == SHORT.T == len(res.per_iteration_log)
        assert [e.iteration for e in events if e.restart] == [5, 10]

    def test_archive_monotone(self, small_model):
        grid = SHORT.grid()
        prev = None

        def check(e):
            nonlocal prev
            cur = [e.archive.best(lam) for lam in grid]
            if prev is not None:
                assert all(c >= p for c, p in zip(cur, prev))
            prev = cur

        run(SHORT, small_model, NEURON, observer=check)

    def test_deterministic_across_workers(self, small_model):
        cfg = replace(SHORT, r=40)
        a = run(cfg, small_model, NEURON, workers=1)
        b = run(cfg, small_model, NEURON, workers=3)
        assert a.archive.sorted_points() == b.archive.sorted_points()
        assert [r.slots for r in a.per_iteration_log] == [r.slots for r in b.per_iteration_log]

    def test_diversity_recovers_after_restart(self, toy64):
        recovered = 0
        for seed in range(5):
            cfg = EpoConfig(T=40, n=6, seed=seed)
            uniques = {}
            run(cfg, toy64, NEURON, observer=lambda e: uniques.__setitem__(e.iteration, e.population.unique()))
            recovered += max(uniques[it] for it in range(31, 41)) >= 2
        assert recovered >= 4

    def test_include_parents(self, small_model):
        cfg = replace(SHORT, include_parents=True, T_restart=0)
        sizes = []
        run(cfg, small_model, NEURON, observer=lambda e: sizes.append(len(e.pool)))
        assert set(sizes) == {cfg.M * cfg.r + cfg.M}

    def test_iteration_log_format(self, small_model):
        buf = io.StringIO()
        run(replace(SHORT, T=3), small_model, NEURON, iteration_log=buf)
        lines = [json.loads(x) for x in buf.getvalue().splitlines()]
        assert [x["iter"] for x in lines] == [1, 2, 3]
        assert set(lines[0]) == {"iter", "slots", "restart"}
        assert set(lines[0]["slots"][0]) == {"lambda", "feature", "mean_ce", "text"}

    def test_abort_keeps_partial(self, small_model):
        def boom(e):
            if e.iteration == 4:
                raise EngineError("stop")

        with pytest.raises(RunAborted) as info:
            run(SHORT, small_model, NEURON, observer=boom)
        assert len(info.value.partial.per_iteration_log) == 4
        assert len(info.value.partial.archive) > 0

    def test_prompt_too_long(self, small_model):
        with pytest.raises(InputError):
            run(replace(SHORT, n=13), small_model, NEURON)

    def test_reject_filter(self, small_model):
        cfg = replace(SHORT, reject_substrings=["dog", "the"])
        res = run(cfg, small_model, NEURON)
        for h in res.archive.history:
            text = small_model.vocab.decode(h.seq).casefold()
            assert "dog" not in text and "the" not in text


def test_gradients_match_per_prompt(small_model, rng):
    feat = NEURON.bind(small_model)
    scorer = Scorer(small_model, feat)
    ids = rng.integers(0, 64, size=(3, 5))
    lams = [0.1, 1.0, 4.0]
    grads = scorer.gradients(ids, lams)
    for i, lam in enumerate(lams):
        g = small_model.grad_onehot(ids[i], lambda out: feat(out) - lam * out.mean_ce).grad
        np.testing.assert_allclose(grads[i], g, rtol=1e-10, atol=1e-12)


def test_separate_fluency_model(small_model, toy64, rng):
    feat = NEURON.bind(small_model)
    scorer = Scorer(small_model, feat, toy64)
    ids = rng.integers(0, 64, size=(2, 5))
    f, ce = scorer.score_arrays(ids)
    np.testing.assert_allclose(ce, toy64.forward_batch(ids).ce_terms.numpy())
    np.testing.assert_allclose(f, feat(small_model.forward_batch(ids)).numpy())
