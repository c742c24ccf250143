import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from ebmix.core import (DataValidationError, ExpressionMatrix, GeneSummaries, ModelKind,
                        nonnull_density, null_density, paired_summarize, summarize)


def test_summarize_hand_values():
    data = ExpressionMatrix([[1.0, 3.0, 0.0, 2.0]], ("a", "a", "b", "b"), ("x",))
    s = summarize(data)
    # means 2 and 1; squared deviations 1+1+1+1 over f=2
    assert s.d[0] == pytest.approx(1.0)
    assert s.s[0] == pytest.approx(3.0)
    assert s.m[0] == pytest.approx(2.0)
    assert s.f[0] == 2
    assert s.scale[0] == pytest.approx(1.0)


def test_summarize_matches_naive_loop():
    rng = np.random.default_rng(4)
    vals = rng.normal(size=(30, 7))
    labels = ("t",) * 3 + ("c",) * 4
    s = summarize(ExpressionMatrix(vals, labels, ()))
    for g in range(30):
        y1, y2 = vals[g, :3], vals[g, 3:]
        pooled = (np.var(y1, ddof=1) * 2 + np.var(y2, ddof=1) * 3) / 5
        assert s.d[g] == pytest.approx(y1.mean() - y2.mean(), abs=1e-13)
        assert s.m[g] == pytest.approx(pooled, rel=1e-12)
    assert s.gene_ids[:2] == ("g1", "g2")


def test_paired_summaries():
    data = ExpressionMatrix([[1.0, 2.0, 3.0]], ("diff",) * 3, ("x",))
    s = paired_summarize(data)
    assert s.paired and s.d[0] == pytest.approx(2.0)
    assert s.m[0] == pytest.approx(1.0)
    assert s.scale[0] == pytest.approx(1 / 3)


@pytest.mark.parametrize("values, labels, msg", [
    ([[1.0, np.nan, 2.0, 3.0]], ("a", "a", "b", "b"), "non-finite"),
    ([[1.0, 2.0, 3.0]], ("a", "b"), "group labels"),
    ([1.0, 2.0], ("a", "b"), "2-D"),
])
def test_matrix_validation(values, labels, msg):
    with pytest.raises(DataValidationError, match=msg):
        ExpressionMatrix(values, labels, ())


def test_undeclared_group_is_rejected():
    with pytest.raises(DataValidationError, match="undeclared"):
        ExpressionMatrix([[1.0, 2.0, 3.0]], ("a", "b", "z"), (), groups=("a", "b"))


def test_gene_without_degrees_of_freedom_is_rejected():
    data = ExpressionMatrix([[1.0, 2.0], [0.0, 1.0]], ("a", "b"), ("u", "v"))
    with pytest.raises(DataValidationError, match="u, v"):
        summarize(data)


def test_summaries_validation():
    with pytest.raises(DataValidationError):
        GeneSummaries(d=[0.0], m=[-1.0], f=4, n1=3, n2=3)
    with pytest.raises(DataValidationError):
        GeneSummaries(d=[np.inf], m=[1.0], f=4, n1=3, n2=3)
    with pytest.raises(DataValidationError):
        GeneSummaries(d=[0.0], m=[1.0], f=0, n1=3, n2=3)


def test_model_kind_parsing():
    assert ModelKind.parse("rg") is ModelKind.RG
    assert ModelKind.RG.random_mean and not ModelKind.FR.random_mean
    assert ModelKind.RH.variance_law == ModelKind.FH.variance_law
    with pytest.raises(ValueError):
        ModelKind.parse("XX")


def test_component_densities():
    assert null_density(0.0, 0.0, 1.0) == pytest.approx(1 / np.sqrt(2 * np.pi))
    assert nonnull_density(3.5, 0.5, 3.0, 4.0) == pytest.approx(1 / np.sqrt(8 * np.pi))
    with pytest.raises(ValueError):
        null_density(0.0, 0.0, 0.0)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(float, (8, 5), elements=st.floats(-50, 50)), st.floats(-20, 20))
def test_difference_is_shift_invariant(vals, shift):
    labels = ("a", "a", "b", "b", "b")
    s0 = summarize(ExpressionMatrix(vals, labels, ()))
    s1 = summarize(ExpressionMatrix(vals + shift, labels, ()))
    np.testing.assert_allclose(s1.d, s0.d, atol=1e-9)
    np.testing.assert_allclose(s1.m, s0.m, atol=1e-8)
