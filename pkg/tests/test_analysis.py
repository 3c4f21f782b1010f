import json
import math

import numpy as np
import oracles
import pytest
from conftest import R18_SEED, synthetic_journal
from hypothesis import given, settings
from hypothesis import strategies as st

from twostage_nas.analysis import (
    FACTOR_NAMES,
    AnalysisError,
    correlation_matrix,
    encoding_factors,
    export_front,
    extract_factors,
    factor_table,
    front_rows,
    journal_records,
    pearson,
    read_front,
    render_front,
    write_correlation_csv,
)
from twostage_nas.coordinator import FAILED, OK, EvalRecord
from twostage_nas.pareto import GFLOPS, LATENCY_MS, ObjectivePoint, ParetoArchive
from twostage_nas.space import ModularCandidate, parse_backbone_encoding

E0 = parse_backbone_encoding("basicblock_64_1-21-21-12")


def rec(i, enc=None, cost=1.0, acc=30.0, status=OK):
    enc = enc or f"basicblock_64_{'1' * (i + 1)}-21-21-12"
    return EvalRecord(
        f"two-{i:05d}",
        ModularCandidate(R18_SEED, parse_backbone_encoding(enc), 256),
        stage="two",
        objective=ObjectivePoint(cost, acc, GFLOPS) if status == OK else None,
        status=status,
    )


class TestFactors:
    def test_e0(self):
        f = encoding_factors(E0, 30.0, 1.37)
        assert f.depth == 7 and f.width == 64
        assert f.lens == (1 / 7, 2 / 7, 2 / 7, 2 / 7)
        assert f.dc == (2 / 7, 4 / 7, 1.0, None)
        d = f.to_dict()
        assert list(d) == list(FACTOR_NAMES)
        assert math.isnan(f.values()[5])

    def test_lengths_sum_to_one(self):
        f = encoding_factors(parse_backbone_encoding("basicblock_56_111-2111-2-111112"))
        assert math.isclose(sum(f.lens), 1.0)
        assert f.dc == (4 / 14, 8 / 14, 14 / 14, None)

    def test_extract_rejects_bad_records(self):
        assert extract_factors(rec(0)).accuracy == 30.0
        with pytest.raises(AnalysisError):
            extract_factors(rec(1, status=FAILED))
        structural = EvalRecord("one-00000", R18_SEED, objective=ObjectivePoint(1, 1, LATENCY_MS), status=OK)
        with pytest.raises(AnalysisError):
            extract_factors(structural)
        assert len(factor_table([rec(0), rec(1, status=FAILED), structural])) == 1


class TestPearson:
    def test_matches_direct_formula(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            x = rng.normal(size=40)
            y = 0.3 * x + rng.normal(size=40)
            assert abs(pearson(x, y) - oracles.pearson_direct(list(x), list(y))) < 1e-12

    @given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=3, max_size=50))
    @settings(max_examples=200)
    def test_matches_direct_formula_property(self, pairs):
        x, y = [p[0] for p in pairs], [p[1] for p in pairs]
        r = pearson(x, y)
        mx, my = sum(x) / len(x), sum(y) / len(y)
        if sum((a - mx) ** 2 for a in x) < 1e-6 or sum((b - my) ** 2 for b in y) < 1e-6:
            return
        assert abs(r - oracles.pearson_direct(x, y)) < 1e-9
        assert -1.0 <= r <= 1.0

    def test_linear(self):
        x = np.arange(20.0)
        assert pearson(x, 2 * x + 1) == pytest.approx(1.0, abs=1e-15)
        assert pearson(x, -x) == pytest.approx(-1.0, abs=1e-15)

    def test_noise_is_uncorrelated(self):
        rng = np.random.default_rng(9)
        assert abs(pearson(rng.normal(size=10_000), rng.normal(size=10_000))) < 0.05

    def test_zero_variance_is_nan(self):
        assert math.isnan(pearson([1, 1, 1], [1, 2, 3]))


class TestMatrix:
    def test_planted_depth_signal(self, tmp_path):
        recs = journal_records(synthetic_journal(tmp_path / "j.jsonl"))
        m = correlation_matrix(factor_table(recs))
        assert m.get("depth", "accuracy") > 0.9
        assert m.get("accuracy", "depth") == m.get("depth", "accuracy")
        assert m.get("depth", "depth") == 1.0

    def test_symmetric_and_bounded(self, tmp_path):
        m = correlation_matrix(factor_table(journal_records(synthetic_journal(tmp_path / "j.jsonl", n=120, seed=3))))
        v = m.values
        finite = ~np.isnan(v)
        assert np.array_equal(finite, finite.T)
        assert np.allclose(v[finite], v.T[finite])
        assert np.all(np.abs(v[finite]) <= 1.0)

    def test_constant_column_is_undefined(self):
        recs = [rec(i, f"basicblock_64_{'1' * (i + 1)}-1-1-1", acc=10.0 + i) for i in range(5)]
        m = correlation_matrix(factor_table(recs))
        assert "width" in m.undefined and "DC_1" in m.undefined
        assert math.isnan(m.get("width", "accuracy"))
        assert m.get("depth", "accuracy") == pytest.approx(1.0)

    def test_errors(self):
        with pytest.raises(AnalysisError):
            correlation_matrix(factor_table([rec(0), rec(1)]))
        with pytest.raises(AnalysisError):
            correlation_matrix(factor_table([rec(i, "basicblock_64_1-21-21-12") for i in range(5)]))
        with pytest.raises(AnalysisError):
            correlation_matrix(np.zeros((5, 3)))

    def test_array_input(self):
        x = np.arange(10.0)
        m = correlation_matrix(np.column_stack([x, x**2, -x]), ("a", "b", "c"))
        assert m.get("a", "c") == pytest.approx(-1.0)

    def test_csv(self, tmp_path):
        recs = journal_records(synthetic_journal(tmp_path / "j.jsonl", n=50))
        m = correlation_matrix(factor_table(recs))
        path = tmp_path / "corr.csv"
        write_correlation_csv(m, path)
        lines = path.read_text().split("\n")
        assert lines[0] == "factor," + ",".join(FACTOR_NAMES)
        assert len(lines) == len(FACTOR_NAMES) + 2 and lines[-1] == ""
        row = dict(zip(FACTOR_NAMES, lines[1].split(",")[1:]))
        assert float(row["depth"]) == 1.0


class TestJournalRecords:
    def test_stage_filter_and_order(self, tmp_path):
        path = synthetic_journal(tmp_path / "j.jsonl", n=12)
        recs = journal_records(path)
        assert [r.id for r in recs] == [f"two-{i:05d}" for i in range(12)]
        assert journal_records(path, stage="one") == []


def archive_of(points):
    arc = ParetoArchive(GFLOPS)
    recs = [rec(i, cost=c, acc=a) for i, (c, a) in enumerate(points)]
    for r in recs:
        arc.insert(r)
    return arc, recs


class TestFrontExport:
    POINTS = [(3.0, 30.0), (1.0, 10.0), (2.0, 25.0), (2.5, 20.0), (4.0, 29.0), (0.1 + 0.2, 5.0)]

    def test_rows(self):
        arc, _ = archive_of(self.POINTS)
        rows = front_rows(arc)
        assert [r["id"] for r in rows] == ["two-00005", "two-00001", "two-00002", "two-00000"]
        assert all(r["rank"] == 0 for r in rows)
        full = front_rows(arc, include_dominated=True)
        assert len(full) == 6
        assert {r["id"]: r["rank"] for r in full}["two-00004"] == 1

    def test_records_input_matches_archive(self):
        arc, recs = archive_of(self.POINTS)
        assert front_rows(recs + [rec(9, status=FAILED)]) == front_rows(arc)

    @pytest.mark.parametrize("fmt", ["csv", "json"])
    def test_byte_stable_and_lossless(self, tmp_path, fmt):
        arc, _ = archive_of(self.POINTS)
        a = export_front(arc, tmp_path / f"a.{fmt}", fmt)
        b = export_front(arc, tmp_path / f"b.{fmt}", fmt)
        assert a.read_bytes() == b.read_bytes()
        assert read_front(a) == front_rows(arc)
        assert read_front(a)[0]["cost"] == 0.1 + 0.2

    def test_csv_and_json_agree(self, tmp_path):
        arc, _ = archive_of(self.POINTS)
        c = read_front(export_front(arc, tmp_path / "f.csv", "csv", include_dominated=True))
        j = read_front(export_front(arc, tmp_path / "f.json", "json", include_dominated=True))
        assert c == j
        assert json.loads((tmp_path / "f.json").read_text()) == j

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            render_front([], "xml")
