import numpy as np
import pytest

from poq.metrics import (CSV_HEADER, average_precision, convergence_epoch, evaluate_predictions,
                         mean_average_precision, parse_csv_row, prf_metrics, speedup_percentage)


def random_sets(rng, n, c):
    return [frozenset(np.nonzero(rng.random(c) < 0.35)[0].tolist()) for _ in range(n)]


def reference_prf(preds, truths, c):
    tp, fp, fn = [0] * c, [0] * c, [0] * c
    for p, t in zip(preds, truths):
        for k in range(c):
            if k in p and k in t:
                tp[k] += 1
            elif k in p:
                fp[k] += 1
            elif k in t:
                fn[k] += 1
    ps, rs = [], []
    for k in range(c):
        if tp[k] + fp[k] + fn[k] == 0:
            continue
        ps.append(tp[k] / (tp[k] + fp[k]) if tp[k] + fp[k] else 0.0)
        rs.append(tp[k] / (tp[k] + fn[k]) if tp[k] + fn[k] else 0.0)
    total = lambda v: sum(v)  # noqa: E731
    cp = total(ps) / len(ps) if ps else 0.0
    cr = total(rs) / len(rs) if rs else 0.0
    TP, FP, FN = total(tp), total(fp), total(fn)
    op = TP / (TP + FP) if TP + FP else 0.0
    or_ = TP / (TP + FN) if TP + FN else 0.0
    f = lambda p, r: 0.0 if p + r == 0 else 2 * p * r / (p + r)  # noqa: E731
    return dict(cp=cp, cr=cr, cf1=f(cp, cr), op=op, or_=or_, of1=f(op, or_), tp=tp, fp=fp, fn=fn)


def reference_ap(scores, positives):
    """Sweep every threshold (one per image, no ties), summing (R_k - R_{k-1}) P_k."""
    n, npos = len(scores), sum(positives)
    ap, prev_r = 0.0, 0.0
    for thr in sorted(scores, reverse=True):
        sel = [i for i in range(n) if scores[i] >= thr]
        hits = sum(positives[i] for i in sel)
        p, r = hits / len(sel), hits / npos
        ap += (r - prev_r) * p
        prev_r = r
    return ap


class TestPRF:
    def test_perfect(self):
        t = [frozenset({0, 2}), frozenset({1})]
        r = prf_metrics(t, t, 3)
        assert (r.cp, r.cr, r.cf1, r.op, r.or_, r.of1) == (1.0,) * 6

    def test_empty_predictions(self):
        r = prf_metrics([frozenset()] * 2, [frozenset({0}), frozenset({1})], 2)
        assert r.cp == r.cr == r.cf1 == r.op == r.or_ == r.of1 == 0.0

    def test_hand_count(self):
        r = prf_metrics([{0}, {0, 1}], [{0, 1}, {1}], 2)
        assert (int(r.tp.sum()), int(r.fp.sum()), int(r.fn.sum())) == (2, 1, 1)
        assert r.op == r.or_ == r.of1 == pytest.approx(2 / 3, abs=1e-15)

    def test_oracle_50(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n, c = int(rng.integers(1, 21)), int(rng.integers(1, 7))
            preds, truths = random_sets(rng, n, c), random_sets(rng, n, c)
            got, ref = prf_metrics(preds, truths, c), reference_prf(preds, truths, c)
            assert got.tp.tolist() == ref["tp"] and got.fp.tolist() == ref["fp"]
            assert got.fn.tolist() == ref["fn"]
            for key in ("cp", "cr", "cf1", "op", "or_", "of1"):
                assert getattr(got, key) == ref[key], key

    def test_invariances(self):
        rng = np.random.default_rng(1)
        preds, truths = random_sets(rng, 15, 5), random_sets(rng, 15, 5)
        base = prf_metrics(preds, truths, 5)
        order = rng.permutation(15)
        shuffled = prf_metrics([preds[i] for i in order], [truths[i] for i in order], 5)
        assert (shuffled.op, shuffled.or_, shuffled.of1) == (base.op, base.or_, base.of1)
        relabel = rng.permutation(5)
        mapped = lambda sets: [frozenset(int(relabel[k]) for k in s) for s in sets]  # noqa: E731
        r = prf_metrics(mapped(preds), mapped(truths), 5)
        assert r.cp == pytest.approx(base.cp, abs=1e-15)
        assert r.cr == pytest.approx(base.cr, abs=1e-15)

    def test_bounds_and_zero_iff(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            r = prf_metrics(random_sets(rng, 5, 3), random_sets(rng, 5, 3), 3)
            for p, rec, f in ((r.cp, r.cr, r.cf1), (r.op, r.or_, r.of1)):
                assert 0 <= f <= 1
                assert (f == 0) == (p * rec == 0)

    def test_geometric_alternate(self):
        r = prf_metrics([{0}, {0, 1}], [{0, 1}, {1}], 2)
        assert r.cf1_geometric == pytest.approx(np.sqrt(r.cp * r.cr))

    def test_bad_class_index(self):
        with pytest.raises(ValueError):
            prf_metrics([{3}], [{0}], 2)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            prf_metrics([{0}], [{0}, {1}], 2)


class TestAP:
    def test_positive_first(self):
        assert average_precision(np.array([0.9, 0.1, 0.2]), np.array([1, 0, 0])) == 1.0

    def test_positive_second_of_two(self):
        assert average_precision(np.array([0.9, 0.4]), np.array([0, 1])) == 0.5

    def test_ties_by_ascending_index(self):
        s = np.full(4, 0.5)
        # order 0,1,2,3: positives at ranks 2 and 4
        assert average_precision(s, np.array([0, 1, 0, 1])) == pytest.approx((1 / 2 + 2 / 4) / 2)
        assert average_precision(s, np.array([1, 0, 0, 0])) == 1.0

    def test_map_oracle_50(self):
        rng = np.random.default_rng(3)
        done = 0
        while done < 50:
            n, c = int(rng.integers(1, 21)), int(rng.integers(1, 7))
            truths = random_sets(rng, n, c)
            if not any(truths):
                continue
            scores = rng.random((n, c))
            ref = [reference_ap(list(scores[:, k]), [int(k in t) for t in truths])
                   for k in range(c) if any(k in t for t in truths)]
            assert abs(mean_average_precision(scores, truths) - np.mean(ref)) <= 1e-9
            done += 1

    def test_no_positives(self):
        with pytest.raises(ValueError):
            mean_average_precision(np.zeros((3, 2)), [frozenset()] * 3)

    def test_non_finite_scores(self):
        with pytest.raises(ValueError):
            mean_average_precision(np.array([[np.nan]]), [frozenset({0})])


def scan_oracle(series, window, delta):
    top = max(series)
    for e in range(len(series) - window + 1):
        seg = series[e:e + window]
        if max(seg) - series[e] <= delta and series[e] >= top * (1 - delta):
            return e
    return None


class TestConvergence:
    def test_first_flat_point(self):
        assert convergence_epoch([0.1, 0.5, 0.9, 0.9, 0.9, 0.9, 0.9], window=3, delta=0.005) == 2

    def test_strictly_increasing(self):
        assert convergence_epoch(np.linspace(0.1, 0.9, 12)) is None

    def test_noisy_plateau_entry(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            start = int(rng.integers(2, 15))
            ramp = list(np.linspace(0.2, 0.7, start))
            plateau = list(0.8 + rng.uniform(0, 0.004, size=12))
            series = ramp + plateau
            assert convergence_epoch(series) == start
            assert scan_oracle(series, 5, 0.005) == start

    def test_random_series_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            n = int(rng.integers(5, 30))
            s = list(np.round(np.cumsum(rng.uniform(0, 0.01, n)) + 0.5, 3))
            w = int(rng.integers(1, 6))
            assert convergence_epoch(s, window=w) == scan_oracle(s, w, 0.005)

    def test_short_series(self):
        with pytest.raises(ValueError):
            convergence_epoch([0.5, 0.6], window=5)

    def test_epoch_within_range(self):
        s = [0.9] * 5
        assert convergence_epoch(s) == 0


class TestSpeedup:
    def test_arithmetic(self):
        assert speedup_percentage(20, 4) == 80.0

    def test_equal(self):
        assert speedup_percentage([7, 9], [7, 9]) == 0.0

    def test_mean_of_setups(self):
        assert speedup_percentage([10, 10], [5, 7]) == pytest.approx(40.0)

    def test_zero_baseline(self):
        with pytest.raises(ValueError):
            speedup_percentage([0], [1])


class TestCsv:
    def test_round_trip(self):
        r = evaluate_predictions([{0}, {1}], np.array([[0.9, 0.1], [0.2, 0.7]]), [{0}, {0, 1}], 2)
        line = r.csv_row(3, "val")
        assert CSV_HEADER.count(",") == line.count(",")
        row = parse_csv_row(line)
        assert row["epoch"] == "3" and row["split"] == "val"
        assert row["cf1"] == pytest.approx(r.cf1, abs=1e-6)
        assert row["map"] == pytest.approx(r.map, abs=1e-6)

    def test_missing_map_is_blank(self):
        r = evaluate_predictions([frozenset()], np.zeros((1, 2)), [frozenset()], 2)
        assert r.map is None and r.csv_row(0, "test").endswith(",")
