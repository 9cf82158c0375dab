import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenecls import evaluation as ev
from scenecls import models
from scenecls.features import V1


class StubGraph:
    """Fixed per-segment outputs, for exercising fusion arithmetic."""

    def __init__(self, outputs, n_segments=9):
        self.outputs = np.asarray(outputs, dtype=np.float64)
        self.name = "stub"
        self.input_shape = (111, 64)

        class _V:  # minimal variant surface
            pass

        self.variant = _V()
        self.variant.n_segments = n_segments

    def forward(self, x, train=False):
        assert not train
        return self.outputs


def padded(row, n=15):
    out = np.zeros(n)
    out[: len(row)] = row
    return out / out.sum()


class TestPredictClip:
    def test_two_point_mean(self):
        outs = np.stack([padded([0.8, 0.2]), padded([0.6, 0.4])])
        g = StubGraph(outs, n_segments=2)
        fused = ev.predict_clip(g, np.zeros((2, 111, 64)))
        np.testing.assert_allclose(fused[:2], [0.7, 0.3])

    def test_identical_segments_unchanged(self):
        dist = padded([0.5, 0.25, 0.25])
        g = StubGraph(np.tile(dist, (9, 1)))
        fused = ev.predict_clip(g, np.zeros((9, 111, 64)))
        np.testing.assert_allclose(fused, dist)

    def test_segment_count_enforced(self):
        g = StubGraph(np.tile(padded([1.0]), (9, 1)))
        with pytest.raises(ValueError):
            ev.predict_clip(g, np.zeros((10, 111, 64)))

    def test_real_model_fuses_nine_segments(self):
        g = models.build_lenet(3, V1, base_filters=2, dense_units=8)
        segs = np.random.default_rng(0).standard_normal((9, 111, 64))
        fused = ev.predict_clip(g, segs)
        assert fused.shape == (15,)
        np.testing.assert_allclose(fused.sum(), 1.0, atol=1e-9)


class TestGeomean:
    def test_idempotent_on_identical(self):
        d = padded([0.5, 0.3, 0.2])
        np.testing.assert_allclose(ev.ensemble_geomean([d, d, d]), d, atol=1e-12)

    def test_two_member_oracle(self):
        # oracle: sqrt(0.5*0.18), sqrt(0.5*0.82), renormalized
        a = padded([0.5, 0.5])
        b = padded([0.18, 0.82])
        got = ev.ensemble_geomean([a, b])
        raw = np.array([np.sqrt(0.5 * 0.18), np.sqrt(0.5 * 0.82)])
        want = raw / raw.sum()
        np.testing.assert_allclose(got[:2] / got[:2].sum(), want, atol=1e-3)
        np.testing.assert_allclose(got[:2], [0.319, 0.681], atol=1e-3)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        dists = rng.dirichlet(np.ones(15), size=4)
        base = ev.ensemble_geomean(dists)
        shuffled = ev.ensemble_geomean(dists[rng.permutation(4)])
        np.testing.assert_allclose(base, shuffled, atol=1e-12)
        np.testing.assert_allclose(base.sum(), 1.0, atol=1e-9)
        assert np.all(base >= 0.0)

    @given(st.integers(0, 2**31 - 1), st.floats(0.2, 5.0))
    @settings(max_examples=30, deadline=None)
    def test_argmax_invariant_under_common_power(self, seed, power):
        rng = np.random.default_rng(seed)
        dists = rng.dirichlet(np.ones(15), size=3)
        base = ev.ensemble_geomean(dists)
        powered = [d**power / (d**power).sum() for d in dists]
        assert np.argmax(ev.ensemble_geomean(powered)) == np.argmax(base)

    def test_zero_entry_floored(self):
        a = padded([1.0])  # all mass on class 0
        b = padded([0.5, 0.5])
        out = ev.ensemble_geomean([a, b])
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out.sum(), 1.0, atol=1e-9)

    def test_needs_two(self):
        with pytest.raises(ValueError):
            ev.ensemble_geomean([padded([1.0])])


def _cand(name, preds, acc, n_classes=15):
    probs = np.zeros((len(preds), n_classes))
    probs[np.arange(len(preds)), preds] = 1.0
    return ev.EnsembleCandidate(name, probs, acc)


class TestSelectEnsemble:
    def test_forced_choice(self):
        preds = np.array([0, 1, 2, 3])
        cands = [
            _cand("a", preds, 0.9), _cand("b", preds, 0.8), _cand("c", preds, 0.7),
            _cand("d", preds, 0.3), _cand("e", preds, 0.2),
        ]
        spec = ev.select_ensemble(cands, baseline_acc=0.5, k=3)
        assert sorted(spec.members) == ["a", "b", "c"]

    def test_diversity_beats_accuracy(self):
        # two clones plus one diverse lower-accuracy candidate, k=2
        same = np.array([0, 1, 2, 3, 4, 5])
        diverse = np.array([0, 1, 2, 3, 5, 4])
        cands = [
            _cand("top", same, 0.90),
            _cand("clone", same, 0.89),
            _cand("other", diverse, 0.80),
        ]
        spec = ev.select_ensemble(cands, baseline_acc=0.5, k=2)
        # oracle: brute force over all 2-subsets, maximizing disagreement then accuracy
        def disagreement(a, b):
            return np.mean(np.argmax(a.probs, 1) != np.argmax(b.probs, 1))
        best = max(
            [(x, y) for i, x in enumerate(cands) for y in cands[i + 1:]],
            key=lambda pair: (disagreement(*pair), pair[0].macro_acc + pair[1].macro_acc),
        )
        assert set(spec.members) == {best[0].name, best[1].name} == {"top", "other"}

    def test_all_below_baseline(self):
        cands = [_cand("a", np.array([0]), 0.4), _cand("b", np.array([1]), 0.3)]
        with pytest.raises(ev.EnsembleSelectionError):
            ev.select_ensemble(cands, baseline_acc=0.5, k=2)

    def test_single_survivor_insufficient(self):
        cands = [_cand("a", np.array([0]), 0.9), _cand("b", np.array([1]), 0.3)]
        with pytest.raises(ev.EnsembleSelectionError):
            ev.select_ensemble(cands, baseline_acc=0.5, k=2)

    def test_fewer_than_k_takes_all(self):
        cands = [_cand("a", np.array([0, 1]), 0.9), _cand("b", np.array([1, 0]), 0.8)]
        spec = ev.select_ensemble(cands, baseline_acc=0.5, k=3)
        assert sorted(spec.members) == ["a", "b"]

    def test_tie_broken_by_name(self):
        same = np.array([0, 1])
        cands = [_cand("zeta", same, 0.9), _cand("alpha", same, 0.9)]
        spec = ev.select_ensemble(cands, baseline_acc=0.1, k=2)
        assert spec.members[0] == "alpha"


class TestConfusionAndAccuracy:
    def test_all_correct_diagonal(self):
        pairs = [(i, padded([0] * i + [1])) for i in range(15)]
        cm = ev.confusion(pairs)
        np.testing.assert_array_equal(cm, np.eye(15, dtype=np.int64))
        assert ev.macro_accuracy(cm) == 1.0
        np.testing.assert_array_equal(ev.class_accuracy(cm), np.ones(15))

    def test_single_off_diagonal(self):
        home, library = ev.CLASS_INDEX["home"], ev.CLASS_INDEX["library"]
        dist = np.zeros(15)
        dist[library] = 1.0
        cm = ev.confusion([(home, dist)])
        assert cm[home, library] == 1
        assert cm.sum() == 1

    def test_row_sums_are_clip_counts(self):
        rng = np.random.default_rng(0)
        pairs = [(int(rng.integers(0, 15)), rng.dirichlet(np.ones(15))) for _ in range(200)]
        cm = ev.confusion(pairs)
        counts = np.bincount([t for t, _ in pairs], minlength=15)
        np.testing.assert_array_equal(cm.sum(axis=1), counts)
        assert cm.sum() == 200

    def test_argmax_tie_lowest_index(self):
        dist = np.full(15, 1.0 / 15.0)
        assert ev.argmax_label(dist) == 0

    def test_absent_class_excluded_with_warning(self):
        pairs = [(0, padded([1.0])), (1, padded([0.0, 1.0]))]
        cm = ev.confusion(pairs)
        with pytest.warns(UserWarning, match="excluded"):
            macro = ev.macro_accuracy(cm)
        assert macro == 1.0

    def test_empty_matrix_rejected(self):
        with pytest.raises(ValueError):
            ev.class_accuracy(np.zeros((15, 15), dtype=np.int64))
        with pytest.raises(ValueError):
            ev.confusion([])

    def test_macro_average_is_plain_mean(self):
        col = np.array([0.5, 0.75, 1.0])
        assert ev.macro_average(col) == np.mean(col)


class TestReport:
    def _column(self, seed):
        rng = np.random.default_rng(seed)
        return rng.uniform(0.3, 1.0, 15)

    def test_single_model_two_columns(self):
        text, csv = ev.render_report(["m1"], [self._column(0)])
        lines = text.splitlines()
        assert lines[0].split()[-1] == "m1"
        assert len(lines) == 1 + 15 + 1  # header, classes, average row
        assert csv.splitlines()[0] == "class,m1"

    def test_one_decimal_formatting(self):
        col = np.full(15, 0.848)
        text, csv = ev.render_report(["m"], [col])
        assert "84.8" in text
        assert csv.splitlines()[1].endswith("84.8")

    def test_average_row_matches_macro(self):
        col = self._column(1)
        text, _ = ev.render_report(["m"], [col])
        avg_line = [ln for ln in text.splitlines() if ln.startswith("Average Accuracy")][0]
        assert avg_line.split()[-1] == f"{100.0 * np.mean(col):.1f}"

    def test_confusion_grid_appended(self):
        cm = np.eye(15, dtype=np.int64) * 3
        text, _ = ev.render_report(["m"], [np.ones(15)], [cm])
        assert "Confusion matrix: m" in text
        grid = text.splitlines()[-15:]
        assert grid[0].split()[0] == "3"


class TestPredictionDump:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        probs = rng.dirichlet(np.ones(15), size=4)
        ids = [f"audio/c{i}.wav" for i in range(4)]
        labels = [ev.CLASSES[i] for i in (0, 3, 7, 14)]
        path = tmp_path / "dump.csv"
        ev.write_prediction_dump(path, ids, labels, probs)
        rid, rlab, rprobs = ev.read_prediction_dump(path)
        assert rid == ids
        np.testing.assert_array_equal(rlab, [0, 3, 7, 14])
        np.testing.assert_allclose(rprobs, probs, atol=1e-9)

    def test_bad_label_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("c1,airport," + ",".join(["0.1"] * 15) + "\n")
        with pytest.raises(ValueError, match="airport"):
            ev.read_prediction_dump(path)

    def test_bad_field_count(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("c1,beach,0.5,0.5\n")
        with pytest.raises(ValueError, match="fields"):
            ev.read_prediction_dump(path)
