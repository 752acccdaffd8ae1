import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from splatdiff.aggregation import (
    aggregate,
    combine_scores,
    confidence_weight,
    disambiguation_channels,
    scene_confidence,
)
from splatdiff.errors import ValidationError

unit = st.floats(0.0, 1.0)


def test_weight_is_half_at_reference():
    assert confidence_weight(3.7, 3.7) == 0.5


def test_weight_one_e_above_reference():
    assert abs(confidence_weight(math.e, 1.0) - 0.7310585786300049) <= 1e-12


def test_weight_invariant_to_global_trace_scale(rng):
    tr = rng.uniform(0.1, 50.0, 400)
    w1, _ = scene_confidence(tr, 0.25)
    w7, _ = scene_confidence(7.0 * tr, 0.25)
    assert np.abs(w1 - w7).max() <= 1e-12


def test_weight_rejects_non_positive_trace():
    with pytest.raises(ValidationError):
        confidence_weight(np.array([1.0, 0.0]), 1.0)


def test_combine_examples():
    assert combine_scores(0.7, 0.6, 1.0) == 1.0
    assert abs(combine_scores(0.2, 0.1, 0.5) - 0.15) <= 1e-15


def test_channel_examples():
    assert disambiguation_channels(0.2, 0.9) == (0.2, pytest.approx(0.7, abs=1e-15))
    assert disambiguation_channels(0.9, 0.2) == (0.9, 0.0)


@settings(max_examples=200, deadline=None)
@given(unit, unit, unit)
def test_combined_score_bounds(g, a, w):
    c = combine_scores(g, a, w)
    assert 0.0 <= c <= w + 1e-15
    assert c <= 1.0
    s, f = disambiguation_channels(g, a)
    assert 0.0 <= f <= 1.0 and s == g


@settings(max_examples=100, deadline=None)
@given(unit, unit, unit, st.floats(0.0, 0.5))
def test_combined_score_monotone(g, a, w, bump):
    assert combine_scores(min(g + bump, 1.0), a, w) >= combine_scores(g, a, w)
    assert combine_scores(g, min(a + bump, 1.0), w) >= combine_scores(g, a, w)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(2, 40), elements=st.floats(1e-3, 1e3)))
def test_weight_monotone_in_trace(tr):
    w, _ = scene_confidence(tr)
    order = np.argsort(tr, kind="stable")
    assert np.all(np.diff(w[order]) >= 0)
    assert np.all((w > 0) & (w < 1))


def test_aggregate_shapes_and_reference(rng):
    n = 50
    g, a = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
    tr = rng.uniform(1, 10, n)
    scores, ref = aggregate(g, a, tr, 0.25, primitive_id=np.arange(n) + 100)
    assert len(scores) == n
    assert ref == np.quantile(tr, 0.25)
    np.testing.assert_allclose(scores.delta_combined, scores.omega * np.minimum(g + a, 1.0), atol=0)
    np.testing.assert_array_equal(scores.residual_surf, np.maximum(a - g, 0.0))
    np.testing.assert_array_equal(scores.primitive_id, np.arange(n) + 100)
