from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calibseg.core import InvalidInputError
from calibseg.ranking import (
    MetricTable,
    format_table_csv,
    mean_case_rank,
    parse_table_csv,
    rank_column,
    sum_rank,
)

ORIENT4 = ["higher", "lower", "lower", "lower"]


def bundled_table() -> MetricTable:
    text = resources.files("calibseg").joinpath("data/loss_comparison.csv").read_text()
    return parse_table_csv(text)


def brute_rank(values, orientation):
    sign = -1 if orientation == "higher" else 1
    out = []
    for v in values:
        if v is None or np.isnan(v):
            out.append(np.nan)
            continue
        vals = [x for x in values if x is not None and not np.isnan(x)]
        better = sum(1 for x in vals if sign * x < sign * v)
        equal = sum(1 for x in vals if x == v)
        out.append(better + (equal + 1) / 2)
    return out


def brute_case_rank(data, orientations):
    n_cases, n_methods, n_metrics = data.shape
    per_case = []
    for c in range(n_cases):
        cols = [brute_rank(list(data[c, :, j]), orientations[j]) for j in range(n_metrics)]
        row = []
        for m in range(n_methods):
            defined = [cols[j][m] for j in range(n_metrics) if not np.isnan(cols[j][m])]
            row.append(sum(defined) / len(defined) if defined else np.nan)
        per_case.append(row)
    scores = []
    for m in range(n_methods):
        vals = [per_case[c][m] for c in range(n_cases) if not np.isnan(per_case[c][m])]
        scores.append(sum(vals) / len(vals) if vals else np.nan)
    return np.array(scores)


# -- rank_column ----------------------------------------------------------------------------


def test_tie_average_example():
    np.testing.assert_array_equal(rank_column([0.2, 0.5, 0.5, 0.9], "lower"), [1, 2.5, 2.5, 4])


def test_single_value():
    np.testing.assert_array_equal(rank_column([3.0], "higher"), [1])


def test_orientation_reverses_order():
    vals = [0.3, 0.1, 0.7, 0.2]
    np.testing.assert_array_equal(rank_column(vals, "lower"), 5 - rank_column(vals, "higher"))


def test_undefined_entries_excluded():
    np.testing.assert_array_equal(rank_column([0.4, None, 0.1], "lower"), [2, np.nan, 1])


def test_empty_or_infinite_column_rejected():
    with pytest.raises(InvalidInputError):
        rank_column([], "lower")
    with pytest.raises(InvalidInputError):
        rank_column([1.0, np.inf], "lower")
    with pytest.raises(ValueError):
        rank_column([1.0], "sideways")


@settings(max_examples=100)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=12), st.sampled_from(["higher", "lower"]))
def test_rank_sum_and_brute_force(values, orientation):
    ranks = rank_column(values, orientation)
    n = len(values)
    assert ranks.sum() == n * (n + 1) / 2
    np.testing.assert_array_equal(ranks, brute_rank([float(v) for v in values], orientation))


# -- sum rank -------------------------------------------------------------------------------


def test_bundled_table_ranks_proposed_method_first():
    table = bundled_table()
    assert len(table.methods) == 7 and len(table.metrics) == 12
    result = sum_rank(table)
    assert result.ordering[0] == "Ours"
    best = result.scores[table.methods.index("Ours")]
    assert all(best < s for m, s in zip(table.methods, result.scores) if m != "Ours")


def test_identical_rows_tie():
    table = MetricTable(["a", "b", "c"], ["x", "y"], ["higher", "lower"], [[1, 2]] * 3)
    np.testing.assert_array_equal(sum_rank(table).scores, [4, 4, 4])


def test_sum_rank_permutation_equivariance(rng):
    table = bundled_table()
    perm = rng.permutation(len(table.methods))
    shuffled = MetricTable([table.methods[i] for i in perm], table.metrics,
                           table.orientations, table.values[perm])
    np.testing.assert_array_equal(sum_rank(shuffled).scores, sum_rank(table).scores[perm])
    assert sum_rank(shuffled).ordering[0] == sum_rank(table).ordering[0]


def test_sum_rank_flags_undefined_method():
    table = MetricTable(["a", "b", "c"], ["x"], ["lower"], [[1.0], [np.nan], [0.5]])
    result = sum_rank(table)
    assert result.flagged == ["b"]
    assert result.ordering == ["c", "a"]


def test_monotone_transform_invariance(rng):
    table = bundled_table()
    values = table.values.copy()
    for j in range(values.shape[1]):
        values[:, j] = np.exp(3 * values[:, j]) + 7.0
    transformed = MetricTable(table.methods, table.metrics, table.orientations, values)
    assert sum_rank(transformed).ordering == sum_rank(table).ordering
    np.testing.assert_array_equal(sum_rank(transformed).scores, sum_rank(table).scores)


# -- mean case rank -------------------------------------------------------------------------


def test_single_case_reduces_to_column_ranks(rng):
    data = rng.normal(size=(1, 5, 4))
    result = mean_case_rank(data, ORIENT4)
    expected = np.mean([rank_column(data[0, :, j], ORIENT4[j]) for j in range(4)], axis=0)
    np.testing.assert_allclose(result.scores, expected, atol=1e-15)
    table = MetricTable(list(range(5)), list("abcd"), ORIENT4, data[0])
    np.testing.assert_allclose(sum_rank(table).scores, 4 * result.scores, atol=1e-14)


def test_dominance():
    data = np.array([[[0.9, 1.0, 0.1, 0.1], [0.5, 3.0, 0.2, 0.3]]] * 3)
    result = mean_case_rank(data, ORIENT4, ["good", "bad"])
    np.testing.assert_array_equal(result.scores, [1, 2])
    assert result.ordering == ["good", "bad"]


def test_case_rank_matches_brute_force(rng):
    for _ in range(20):
        data = np.round(rng.uniform(size=(5, 4, 4)), 1)
        data[rng.random(data.shape) < 0.1] = np.nan
        expected = brute_case_rank(data, ORIENT4)
        np.testing.assert_allclose(mean_case_rank(data, ORIENT4).scores, expected, atol=1e-14)


def test_case_rank_undefined_everywhere_is_flagged():
    data = np.array([[[0.9, 1.0, 0.1, 0.1], [None, None, None, None], [0.5, 2.0, 0.3, 0.3]]],
                    dtype=object)
    result = mean_case_rank(data, ORIENT4, ["a", "b", "c"])
    assert result.flagged == ["b"]
    assert result.ordering == ["a", "c"]
    assert result.to_dict()["scores"]["b"] is None


def test_case_rank_excludes_undefined_hd_and_reranks():
    data = np.array([[[0.9, np.nan, 0.1, 0.1], [0.8, 4.0, 0.2, 0.2], [0.7, 3.0, 0.3, 0.3]]])
    result = mean_case_rank(data, ORIENT4)
    # HD column ranks only the two defined methods: 2 and 1
    np.testing.assert_allclose(result.scores, [1.0, (2 + 2 + 2 + 2) / 4, (3 + 1 + 3 + 3) / 4])


def test_case_rank_shape_errors():
    with pytest.raises(InvalidInputError):
        mean_case_rank(np.zeros((0, 2, 4)), ORIENT4)
    with pytest.raises(InvalidInputError):
        mean_case_rank(np.zeros((1, 2, 3)), ORIENT4)
    with pytest.raises(InvalidInputError):
        mean_case_rank(np.zeros((1, 2, 4)), ORIENT4, ["only-one"])


# -- CSV -----------------------------------------------------------------------------------


def test_csv_roundtrip():
    table = bundled_table()
    again = parse_table_csv(format_table_csv(table))
    assert again.methods == table.methods and again.metrics == table.metrics
    assert again.orientations == table.orientations
    np.testing.assert_array_equal(again.values, table.values)


@pytest.mark.parametrize("text", [
    "method,a\norientation,lower\n",
    "method,a,b\norientation,lower\nx,1,2\n",
    "method,a\norientation,up\nx,1\n",
    "method,a\norientation,lower\nx,abc\n",
    "method,a\norientation,lower\nx,1,2\n",
])
def test_csv_errors(text):
    with pytest.raises(InvalidInputError):
        parse_table_csv(text)


def test_csv_comments_and_undefined_cells():
    table = parse_table_csv("# note\nmethod,a\norientation,lower\nx,NA\ny,0.5\n")
    assert np.isnan(table.values[0, 0]) and table.values[1, 0] == 0.5
