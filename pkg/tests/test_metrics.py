"""Scoring: brute-force confusion-matrix oracles, threshold/tie-break
conventions, and report serialization round-trips."""

import numpy as np
import pytest
from sklearn.metrics import f1_score

from affmtl.errors import ConfigError, DegenerateInputError, DimensionError, ParseError
from affmtl.metrics import (
    EvalReport,
    au_macro_f1,
    binary_f1,
    build_report,
    ccc_value,
    composite_score,
    expr_macro_f1,
)


def f1_oracle(pred: np.ndarray, target: np.ndarray, vacuous: float) -> float:
    """Count the confusion matrix by explicit iteration."""
    tp = fp = fn = 0
    for p, t in zip(pred, target):
        if p and t:
            tp += 1
        elif p and not t:
            fp += 1
        elif t and not p:
            fn += 1
    return vacuous if (2 * tp + fp + fn) == 0 else 2 * tp / (2 * tp + fp + fn)


class TestBinaryF1:
    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("vacuous", [1.0, 0.0])
    def test_matches_brute_force_and_sklearn(self, seed, vacuous):
        rng = np.random.default_rng(seed)
        pred = rng.integers(0, 2, 50).astype(bool)
        target = rng.integers(0, 2, 50).astype(bool)
        ours = binary_f1(pred, target, vacuous)
        assert ours == pytest.approx(f1_oracle(pred, target, vacuous), abs=1e-12)
        assert ours == pytest.approx(
            f1_score(target, pred, zero_division=vacuous), abs=1e-12)

    def test_vacuous_conventions(self):
        none = np.zeros(10, dtype=bool)
        assert binary_f1(none, none) == 1.0
        assert binary_f1(none, none, vacuous_value=0.0) == 0.0

    def test_all_wrong_is_zero(self):
        assert binary_f1(np.array([1, 1, 0]), np.array([0, 0, 1])) == 0.0

    def test_hand_case(self):
        """TP=2, FP=1, FN=1 ⇒ 4/6."""
        pred = np.array([1, 1, 1, 0, 0])
        target = np.array([1, 1, 0, 1, 0])
        assert binary_f1(pred, target) == pytest.approx(2.0 / 3.0, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            binary_f1(np.zeros(3), np.zeros(4))


class TestAuMacroF1:
    def test_threshold_is_strict(self):
        """Probability exactly at the threshold counts as negative."""
        probs = np.full((4, 12), 0.5)
        targets = np.ones((4, 12))
        per_unit, macro = au_macro_f1(probs, targets, threshold=0.5, vacuous_value=0.0)
        assert macro == 0.0  # nothing predicted positive, all targets positive
        probs2 = np.full((4, 12), 0.5000001)
        _, macro2 = au_macro_f1(probs2, targets, threshold=0.5)
        assert macro2 == 1.0

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_per_unit_oracle(self, seed):
        rng = np.random.default_rng(seed)
        probs = rng.uniform(size=(60, 12))
        targets = rng.integers(0, 2, (60, 12)).astype(float)
        targets[rng.integers(0, 60, 10)] = -1.0
        per_unit, macro = au_macro_f1(probs, targets)
        keep = targets[:, 0] != -1
        for j in range(12):
            expect = f1_oracle(probs[keep, j] > 0.5, targets[keep, j] > 0, 1.0)
            assert per_unit[j] == pytest.approx(expect, abs=1e-12)
        assert macro == pytest.approx(per_unit.mean(), abs=1e-12)

    def test_sentinel_rows_do_not_score(self):
        probs = np.vstack([np.full((3, 12), 0.9), np.full((2, 12), 0.9)])
        targets = np.vstack([np.ones((3, 12)), np.full((2, 12), -1.0)])
        _, macro = au_macro_f1(probs, targets)
        assert macro == 1.0

    def test_all_sentinel_rejected(self):
        with pytest.raises(DegenerateInputError):
            au_macro_f1(np.full((2, 12), 0.5), np.full((2, 12), -1.0))


class TestExprMacroF1:
    def test_tie_breaks_to_lowest_index(self):
        dist = np.full((3, 8), 0.125)  # all ties → class 0
        _, macro = expr_macro_f1(dist, np.array([0, 0, 0]), vacuous_value=0.0)
        per_class, _ = expr_macro_f1(dist, np.array([0, 0, 0]), vacuous_value=0.0)
        assert per_class[0] == 1.0
        assert macro == pytest.approx(1.0 / 8.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_sklearn_per_class(self, seed):
        rng = np.random.default_rng(seed)
        dist = rng.uniform(size=(80, 8))
        targets = rng.integers(0, 8, 80)
        per_class, macro = expr_macro_f1(dist, targets, vacuous_value=0.0)
        pred = np.argmax(dist, axis=1)
        expect = f1_score(targets, pred, labels=list(range(8)),
                          average=None, zero_division=0.0)
        np.testing.assert_allclose(per_class, expect, atol=1e-12)
        assert macro == pytest.approx(expect.mean(), abs=1e-12)

    def test_sentinels_dropped(self):
        dist = np.eye(8)[[0, 1, 2, 3]]
        targets = np.array([0, 1, -1, -1])
        per_class, macro = expr_macro_f1(dist, targets)
        assert per_class[0] == 1.0 and per_class[1] == 1.0
        # classes 2,3 had predictions only on dropped rows → vacuous 1.0
        assert macro == 1.0

    def test_all_sentinel_rejected(self):
        with pytest.raises(DegenerateInputError):
            expr_macro_f1(np.full((2, 8), 0.125), np.array([-1, -1]))


class TestCccValue:
    def test_exact_fraction(self):
        assert ccc_value([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]) == 4.0 / 11.0

    def test_perfect_agreement(self):
        x = np.array([0.3, -0.2, 0.8, 0.0])
        assert ccc_value(x, x) == 1.0

    def test_sentinels_filtered(self):
        pred = np.array([1.0, 2.0, 9.0, 3.0])
        target = np.array([2.0, 4.0, -5.0, 6.0])
        assert ccc_value(pred, target) == 4.0 / 11.0

    def test_too_few_valid(self):
        with pytest.raises(DegenerateInputError):
            ccc_value([1.0, 2.0], [0.5, -5.0])


class TestCompositeScore:
    def test_reference_arithmetic(self):
        assert composite_score(0.6533, 0.5030, 0.6351) == pytest.approx(1.7914, abs=1e-12)

    def test_perfect_is_three(self):
        assert composite_score(1.0, 1.0, 1.0) == 3.0

    def test_hand_mean_ccc(self):
        assert composite_score((0.24 + 0.40) / 2.0, 0.0, 0.0) == pytest.approx(0.32, abs=1e-15)

    def test_missing_component_rejected(self):
        with pytest.raises(ConfigError):
            composite_score(None, 0.5, 0.5)


class TestEvalReport:
    def make_report(self):
        rng = np.random.default_rng(0)
        n = 40
        return build_report(
            ("AU", "EXPR", "VA"), seed=3, config_hash="abc123",
            au_probs=rng.uniform(size=(n, 12)),
            au_targets=rng.integers(0, 2, (n, 12)).astype(float),
            expr_dist=rng.uniform(size=(n, 8)),
            expr_targets=rng.integers(0, 8, n),
            pred_valence=rng.uniform(-1, 1, n), target_valence=rng.uniform(-1, 1, n),
            pred_arousal=rng.uniform(-1, 1, n), target_arousal=rng.uniform(-1, 1, n),
        )

    def test_json_roundtrip(self):
        rep = self.make_report()
        back = EvalReport.from_json(rep.to_json())
        assert back == rep

    def test_from_json_rejects_garbage(self):
        with pytest.raises(ParseError):
            EvalReport.from_json("{not json")

    def test_composite_assembled(self):
        rep = self.make_report()
        assert rep.mean_ccc == pytest.approx((rep.ccc_valence + rep.ccc_arousal) / 2)
        assert rep.composite == pytest.approx(rep.mean_ccc + rep.expr_f1 + rep.au_f1)

    def test_counts_recorded(self):
        rep = self.make_report()
        assert rep.n_au == rep.n_expr == rep.n_valence == rep.n_arousal == 40

    def test_single_task_report_has_no_composite(self):
        rng = np.random.default_rng(1)
        rep = build_report(("EXPR",), seed=0, config_hash="x",
                           expr_dist=rng.uniform(size=(10, 8)),
                           expr_targets=rng.integers(0, 8, 10))
        assert rep.expr_f1 is not None
        assert rep.composite is None and rep.mean_ccc is None and rep.au_f1 is None

    def test_text_floats_roundtrip_exactly(self):
        rep = self.make_report()
        text = rep.to_text()
        values = dict(line.split("=", 1) for line in text.strip().splitlines())
        assert float(values["composite"]) == rep.composite
        assert float(values["ccc_valence"]) == rep.ccc_valence
        per_unit = [float(x) for x in values["au_f1_per_unit"].split(",")]
        assert per_unit == rep.au_f1_per_unit

    def test_conventions_stored(self):
        rep = build_report(("AU",), seed=0, config_hash="x",
                           au_probs=np.full((4, 12), 0.9), au_targets=np.ones((4, 12)),
                           au_threshold=0.7, vacuous_f1=0.0)
        assert rep.au_threshold == 0.7 and rep.vacuous_f1 == 0.0
