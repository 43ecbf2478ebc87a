import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epo.core import (
    ConfigError,
    EpoConfig,
    InputError,
    ParetoArchive,
    ScoredPrompt,
    Vocabulary,
    combined_objective,
    lambda_grid,
    load_json_object,
)


def sp(f, ce, seq=(0,)):
    return ScoredPrompt(tuple(seq), f, (ce,))


class TestLambdaGrid:
    def test_degenerate(self):
        assert lambda_grid(1, 0.5, 0.5).lambdas == (0.5,)

    def test_three_point(self):
        g = lambda_grid(3, 0.1, 10)
        # independent route: 10 ** linspace(-1, 1, 3)
        np.testing.assert_allclose(g.lambdas, 10.0 ** np.linspace(-1, 1, 3), rtol=1e-12)
        assert g.lambdas[0] == 0.1 and g.lambdas[-1] == 10

    def test_default_grid_matches_logspace(self):
        g = EpoConfig().grid()
        assert len(g) == 8
        np.testing.assert_allclose(g.as_array(), np.logspace(-1, 1, 8), rtol=1e-12)

    def test_unregularised(self):
        assert lambda_grid(1, 0, 0).lambdas == (0.0,)

    @pytest.mark.parametrize("M,lo,hi", [(0, 0.1, 1), (3, 0, 1), (3, -1, 1), (3, 2, 1)])
    def test_rejects(self, M, lo, hi):
        with pytest.raises(ConfigError):
            lambda_grid(M, lo, hi)

    @given(st.integers(2, 30), st.floats(1e-3, 1e2), st.floats(1.0, 1e3))
    def test_geometric_and_sorted(self, M, lo, ratio):
        g = lambda_grid(M, lo, lo * ratio).as_array()
        assert np.all(np.diff(g) >= 0)
        ratios = g[1:] / g[:-1]
        np.testing.assert_allclose(ratios, ratios[0], rtol=1e-9)


class TestObjective:
    def test_examples(self):
        assert combined_objective(sp(5.0, 3.7), 1.0) == pytest.approx(1.3)
        assert combined_objective(sp(0.0, 2.0), 3.0) == -6.0

    @given(st.floats(-1e6, 1e6), st.floats(0, 50))
    def test_lambda_zero_is_feature(self, f, ce):
        assert combined_objective(sp(f, ce), 0.0) == f

    def test_mean_ce_and_perplexity(self):
        p = ScoredPrompt((1, 2, 3), 0.0, (1.0, 2.0, 3.0))
        assert p.mean_ce == 2.0
        assert p.perplexity == pytest.approx(math.exp(2.0))

    def test_empty_ce_rejected(self):
        with pytest.raises(InputError):
            ScoredPrompt((), 0.0, ())


class TestArchive:
    def test_strict_dominance_replaces(self):
        a = ParetoArchive()
        a.insert(sp(1, 3, (1,)), 0)
        assert a.insert(sp(2, 3, (2,)), 1)
        assert [(p.feature, p.mean_ce) for p in a.points] == [(2, 3)]

    def test_incomparable_coexist(self):
        a = ParetoArchive()
        a.insert(sp(2, 3, (1,)), 0)
        a.insert(sp(1, 2, (2,)), 0)
        assert len(a) == 2

    def test_dominated_rejected(self):
        a = ParetoArchive()
        a.insert(sp(2, 2, (1,)), 0)
        assert not a.insert(sp(1, 3, (2,)), 0)
        assert len(a) == 1

    def test_equal_point_first_wins(self):
        a = ParetoArchive()
        a.insert(sp(1, 1, (1,)), 0)
        assert not a.insert(sp(1, 1, (2,)), 3)
        assert a.points[0].seq == (1,)

    def test_history_keeps_first_discovery(self):
        a = ParetoArchive()
        a.insert(sp(1, 1, (5,)), 2)
        a.insert(sp(1, 1, (5,)), 7)
        assert [(h.seq, h.iteration) for h in a.history] == [((5,), 2)]

    @settings(max_examples=200)
    @given(st.lists(st.tuples(st.integers(-5, 5), st.integers(0, 5)), min_size=1, max_size=40))
    def test_non_dominated_and_complete(self, pts):
        a = ParetoArchive()
        for i, (f, ce) in enumerate(pts):
            a.insert(sp(float(f), float(ce), (i,)), 0)
            # invariant after every insertion
            for p in a.points:
                assert not any(q.dominates(p.feature, p.mean_ce) for q in a.points)
        # oracle: the set of non-dominated distinct values
        vals = set(pts)
        front = {v for v in vals if not any(w[0] >= v[0] and w[1] <= v[1] and w != v for w in vals)}
        assert {(p.feature, p.mean_ce) for p in a.points} == {(float(f), float(c)) for f, c in front}

    @given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0, 5)), min_size=1, max_size=30), st.floats(0, 10))
    def test_best_is_history_max(self, pts, lam):
        a = ParetoArchive()
        for i, (f, ce) in enumerate(pts):
            a.insert(sp(f, ce, (i,)), 0)
        assert a.best(lam) == max(f - lam * ce for f, ce in pts)


class TestConfig:
    def test_defaults(self):
        c = EpoConfig()
        assert (c.T, c.M, c.r, c.k, c.T_restart, c.n) == (300, 8, 32, 512, 30, 12)
        assert (c.lambda_r_min, c.lambda_r_max) == (0.667, 6.0)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            EpoConfig.from_dict({"bogus": 1})

    @pytest.mark.parametrize("kw", [{"M": 0}, {"T": -1}, {"position_reduction": "median"},
                                    {"lambda_r_min": 5, "lambda_r_max": 1}, {"grad_ranking": "x"},
                                    {"reject_substrings": [""]}, {"r": True}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            EpoConfig(**kw)

    def test_round_trip(self):
        c = EpoConfig(T=5, reject_substrings=["dog"])
        assert EpoConfig.from_dict(c.to_dict()) == c

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(ConfigError, match="nope.json"):
            load_json_object(tmp_path / "nope.json")


class TestVocabulary:
    def test_word_round_trip(self, toy_vocab):
        s = toy_vocab.encode("the dog runs .")
        assert toy_vocab.decode(s) == "the dog runs ."

    def test_duplicates(self):
        with pytest.raises(InputError):
            Vocabulary(("a", "a"), 0)

    def test_check(self, toy_vocab):
        with pytest.raises(InputError):
            toy_vocab.check([64])
