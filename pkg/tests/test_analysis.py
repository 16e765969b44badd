import csv
import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy import stats

from cxrtrunc.analysis import (
    ModelRecord,
    auc_change_pct,
    emit_report,
    format_times_smaller,
    load_study_table,
    pretraining_boost,
    published_table,
    save_study_table,
    spearman,
    times_smaller,
)
from cxrtrunc.errors import InputError, SchemaError, UndefinedCorrelationError


def rec(name, pretrained, auc, params=1_000_000, top1=None, ci=None):
    return ModelRecord(name, "Toy", name, pretrained, params, auc, ci or (auc - 0.01, auc + 0.01), 0, top1)


def test_perfect_monotone_relations():
    assert spearman([1, 2, 3, 4], [10, 20, 25, 100]).rho == 1.0
    r = spearman([1, 2, 3], [3, 2, 1])
    assert r.rho == -1.0 and r.p_value == 0.0


def test_published_table_size_correlation():
    table = published_table()
    assert len(table) == 16
    r = spearman([m.param_count for m in table], [m.avg_auc for m in table])
    assert abs(r.rho - 0.565) <= 0.05
    assert abs(r.p_value - 0.023) <= 0.015


def test_published_table_top1_correlation_has_no_relationship():
    table = published_table()
    r = spearman([m.imagenet_top1 for m in table], [m.avg_auc for m in table])
    assert abs(r.rho - 0.059) <= 0.05 and r.p_value > 0.5


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8), st.integers(0, 8)), min_size=3, max_size=30))
def test_agrees_with_reference_implementation(pairs):
    x, y = map(np.array, zip(*pairs))
    assume(len(set(x)) > 1 and len(set(y)) > 1)
    r = spearman(x, y)
    ref = stats.spearmanr(x, y)
    assert r.rho == pytest.approx(ref.statistic, abs=1e-12)
    assert r.p_value == pytest.approx(ref.pvalue, abs=1e-9)
    assert -1 <= r.rho <= 1 and 0 <= r.p_value <= 1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-500, 500), st.integers(-500, 500)), min_size=3, max_size=25))
def test_rank_invariance_and_symmetry(pairs):
    # a 0.1 grid keeps distinct values distinct under the monotone maps below
    x, y = (np.array(v) / 10 for v in zip(*pairs))
    assume(len(set(x)) > 1 and len(set(y)) > 1)
    base = spearman(x, y)
    assert spearman(np.exp(x / 10) * 3 + 1, y).rho == base.rho
    assert spearman(x, y ** 3).rho == base.rho
    swapped = spearman(y, x)
    assert swapped.rho == base.rho and swapped.p_value == base.p_value


def test_constant_input_is_undefined():
    with pytest.raises(UndefinedCorrelationError):
        spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(InputError):
        spearman([1, 2], [1, 2])


def test_exact_p_value_enumerates_permutations():
    x, y = [1, 2, 3, 4, 5], [2, 1, 4, 3, 5]
    rho = spearman(x, y).rho
    count = 0
    for perm in itertools.permutations(y):
        count += abs(stats.spearmanr(x, perm).statistic) >= abs(rho) - 1e-12
    assert spearman(x, y, exact=True).p_value == pytest.approx(count / 120)
    with pytest.raises(InputError):
        spearman(range(10), range(10), exact=True)


def test_boost_examples():
    s = pretraining_boost([rec("InceptionV4", True, 0.861), rec("InceptionV4", False, 0.863)])
    assert s.boosts["InceptionV4"] == pytest.approx(-0.002)
    s = pretraining_boost([rec("A", True, 0.85), rec("A", False, 0.85)])
    assert s.boosts["A"] == 0.0


def test_boost_decreasing_in_size_gives_negative_rho():
    rng = np.random.default_rng(0)
    records = []
    for i in range(16):
        params = int(10 ** (6 + i / 8))
        scratch = 0.80 + rng.uniform(0, 0.04)
        records += [rec(f"M{i}", False, scratch, params), rec(f"M{i}", True, scratch + 0.05 - 0.003 * i, params)]
    s = pretraining_boost(records)
    assert s.correlation.rho < 0
    assert s.mean_boost == pytest.approx(np.mean(list(s.boosts.values())))


def test_unpaired_models_are_excluded_with_warning():
    records = [rec("A", True, 0.9), rec("A", False, 0.8), rec("B", True, 0.7)]
    with pytest.warns(UserWarning, match="B"):
        s = pretraining_boost(records)
    assert s.excluded == ["B"] and list(s.boosts) == ["A"] and s.correlation is None


def test_times_smaller_and_auc_change():
    assert times_smaller(5, 5) == 1.0
    assert format_times_smaller(times_smaller(11_689_512, 2_782_000)) == "4.2x"
    with pytest.raises(InputError):
        times_smaller(0, 3)
    assert auc_change_pct(0.859, 0.859) == 0.0
    assert auc_change_pct(0.792, 0.800) == pytest.approx(-1.0)
    assert auc_change_pct(0.859 * (1 - 0.0833), 0.859) == pytest.approx(-8.33)


@given(st.floats(1, 1e9), st.floats(1, 1e9))
def test_times_smaller_reciprocity(a, b):
    assert abs(times_smaller(a, b) * times_smaller(b, a) - 1) <= 1e-9


def test_report_for_published_table(tmp_path):
    paths = emit_report(published_table(), tmp_path)
    pngs = sorted(p.name for p in tmp_path.glob("*.png"))
    assert pngs == ["auc_vs_log10_params.png", "auc_vs_top1.png", "boost_vs_log10_params.png"]
    for key in ("study_table", "boost_table", "auc_vs_top1", "auc_vs_log10_params", "boost_vs_log10_params"):
        assert paths[key].stat().st_size > 0
    assert load_study_table(paths["study_table"]) == published_table()
    summary = json.loads(paths["summary"].read_text())
    assert summary["correlations"]["auc_vs_params_pretrained"]["rho"] == pytest.approx(0.597, abs=1e-3)


def test_report_with_one_model(tmp_path):
    emit_report([rec("Solo", True, 0.9)], tmp_path)
    assert all(p.stat().st_size > 0 for p in tmp_path.glob("*.png"))


def test_log_axis_spacing_in_sidecar(tmp_path):
    records = [rec(f"M{e}", True, 0.8 + e / 100, 10 ** e) for e in (6, 7, 8)]
    paths = emit_report(records, tmp_path)
    with paths["auc_vs_log10_params_points"].open() as fh:
        xs = sorted(float(r["x"]) for r in csv.DictReader(fh))
    assert np.allclose(np.diff(xs), 1.0)


def test_boost_plot_has_error_bars(tmp_path):
    records = [rec("A", True, 0.9, ci=(0.88, 0.92)), rec("A", False, 0.85, ci=(0.82, 0.88))]
    paths = emit_report(records, tmp_path)
    with paths["boost_vs_log10_params_points"].open() as fh:
        row = next(csv.DictReader(fh))
    assert float(row["y"]) == pytest.approx(0.05)
    assert float(row["yerr"]) == pytest.approx(math.hypot(0.02, 0.03))


def test_empty_table_and_unwritable_dir(tmp_path):
    with pytest.raises(InputError):
        emit_report([], tmp_path)
    blocker = tmp_path / "f"
    blocker.write_text("")
    with pytest.raises(OSError):
        emit_report([rec("A", True, 0.9)], blocker / "out")


def test_malformed_tables(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("name,family\nA,Toy\n")
    with pytest.raises(SchemaError, match="variant"):
        load_study_table(bad)
    good = save_study_table([rec("A", True, 0.9)], tmp_path / "good.csv")
    text = good.read_text().replace("0.9,", "oops,", 1)
    broken = tmp_path / "broken.csv"
    broken.write_text(text)
    with pytest.raises(SchemaError, match="line 2"):
        load_study_table(broken)


def test_duplicate_rows_are_rejected(tmp_path):
    path = save_study_table([rec("A", True, 0.9), rec("A", True, 0.8)], tmp_path / "dup.csv")
    with pytest.raises(InputError):
        load_study_table(path)
