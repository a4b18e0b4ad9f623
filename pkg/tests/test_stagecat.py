import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fvattn.backbone import StageFeatures
from fvattn.errors import PlanMismatch, SizeMismatch
from fvattn.stagecat import make_plan, merge, unmerge


@pytest.mark.parametrize("dims,d,c", [
    ([384, 192], 192, (2, 1)),
    ([384], 384, (1,)),
    ([6, 4], 2, (3, 2)),
    ([96, 192, 384], 96, (1, 2, 4)),
])
def test_make_plan(dims, d, c):
    plan = make_plan(dims)
    assert plan.common_dim == d and plan.chunk_counts == c


def test_plan_override():
    assert make_plan([96, 192], common_dim=48).chunk_counts == (2, 4)
    with pytest.raises(ValueError):
        make_plan([96, 192], common_dim=64)


def test_single_stage_identity():
    x = np.random.default_rng(0).random((5, 8))
    assert np.array_equal(merge([x], make_plan([8])), x)


def test_contiguous_chunks():
    out = merge([np.array([[1.0, 2, 3, 4, 5, 6]])], make_plan([6], common_dim=2))
    assert out.tolist() == [[1, 2], [3, 4], [5, 6]]


def test_row_count():
    rng = np.random.default_rng(0)
    feats = [StageFeatures(3, rng.random((49, 96))), StageFeatures(4, rng.random((16, 192)))]
    out = merge(feats, make_plan([96, 192]))
    assert out.shape == (49 * 1 + 16 * 2, 96)
    back = unmerge(out, make_plan([96, 192]), [49, 16], [3, 4])
    assert all(a.tokens.tobytes() == b.tokens.tobytes() for a, b in zip(feats, back))
    assert [f.stage_index for f in back] == [3, 4]


def test_errors():
    plan = make_plan([4, 8])
    with pytest.raises(PlanMismatch):
        merge([np.zeros((2, 4)), np.zeros((2, 6))], plan)
    with pytest.raises(PlanMismatch):
        merge([np.zeros((2, 4))], plan)
    m = merge([np.zeros((2, 4)), np.zeros((3, 8))], plan)
    with pytest.raises(SizeMismatch):
        unmerge(m[:-1], plan, [2, 3])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 6), st.integers(1, 4)), min_size=1, max_size=4),
       st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_round_trip_property(stages, base, seed):
    rng = np.random.default_rng(seed)
    dims = [base * c for _, c in stages]
    plan = make_plan(dims)
    feats = [rng.normal(size=(n, d)) for (n, _), d in zip(stages, dims)]
    m = merge(feats, plan)
    assert m.shape[0] == sum(n * c for n, c in zip((n for n, _ in stages), plan.chunk_counts))
    assert sorted(m.ravel().tolist()) == sorted(np.concatenate([f.ravel() for f in feats]).tolist())
    back = unmerge(m, plan, [n for n, _ in stages])
    assert all(a.tobytes() == b.tokens.tobytes() for a, b in zip(feats, back))
