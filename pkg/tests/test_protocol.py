import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from datacarve.carve import CarveFit, CarveInput, carve_study
from datacarve.core import MomentSummary, SelectionSummary, StudySummary, compute_moment_summary
from datacarve.errors import (
    CapabilityError,
    DataError,
    FormatVersionError,
    IncompatibleStudiesError,
    ParseError,
    ValidationError,
)
from datacarve.protocol import (
    FIELD_ORDER,
    StudySite,
    aggregate,
    deserialize_summary,
    read_summary,
    serialize_summary,
    union_design_request,
    variance_lower_gain,
    write_aggregate,
    write_summary,
)

from conftest import make_study

LAMBDA_100 = 3.034854258770292701725944787099756914787


def _random_summary(rng, p=None, s=None):
    p = int(rng.integers(1, 30)) if p is None else p
    s = int(rng.integers(1, 3)) if s is None else s
    q = int(rng.integers(0, min(p, 5) + 1))
    selected = tuple(sorted(rng.choice(p, q, replace=False).tolist()))
    a = rng.standard_normal((s + q + 2, s + q)) * np.exp(rng.uniform(-20, 20))
    Xi = a.T @ a / (s + q + 2)
    xi = rng.standard_normal(s + q) * np.exp(rng.uniform(-20, 20, s + q))
    return StudySummary(
        SelectionSummary(selected, np.exp(rng.uniform(-5, 5, q)), tuple(rng.choice([-1, 1], q).tolist())),
        MomentSummary(int(rng.integers(2, 10**6)), xi, Xi),
        p=p,
        s=s,
        study_id=f"site-{int(rng.integers(1000))}-ü",
    )


def _assert_bit_equal(a: StudySummary, b: StudySummary):
    assert (a.p, a.s, a.n_k, a.study_id) == (b.p, b.s, b.n_k, b.study_id)
    assert a.selection.selected == b.selection.selected
    assert a.selection.signs == b.selection.signs
    for x, y in [(a.selection.lam, b.selection.lam), (a.moments.xi, b.moments.xi), (a.moments.Xi, b.moments.Xi)]:
        x, y = np.asarray(x), np.asarray(y)
        assert x.shape == y.shape
        assert x.tobytes() == y.tobytes()


def test_round_trip_many_random_summaries():
    rng = np.random.default_rng(77)
    for _ in range(1000):
        summ = _random_summary(rng)
        _assert_bit_equal(deserialize_summary(serialize_summary(summ)), summ)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, min_value=1e-300, max_value=1e300), min_size=1, max_size=4))
def test_round_trip_arbitrary_lambda(lams):
    q = len(lams)
    summ = StudySummary(
        SelectionSummary(tuple(range(q)), lams, (1,) * q),
        MomentSummary(10, np.linspace(-1, 1, q + 1), np.eye(q + 1)),
        p=q + 1,
        s=1,
    )
    _assert_bit_equal(deserialize_summary(serialize_summary(summ)), summ)


def test_minimal_empty_selection_round_trip():
    summ = StudySummary(SelectionSummary((), [], ()), MomentSummary(5, [0.25], [[1.5]]), p=3, s=1)
    _assert_bit_equal(deserialize_summary(serialize_summary(summ)), summ)


def test_default_lambda_value_survives_round_trip():
    summ = StudySummary(SelectionSummary((2,), [LAMBDA_100], (-1,)), MomentSummary(100, [0.0, 0.0], np.eye(2)), 100, 1)
    back = deserialize_summary(serialize_summary(summ))
    assert back.selection.lam[0] == LAMBDA_100


def test_writer_field_order_and_reader_tolerance():
    summ = _random_summary(np.random.default_rng(1))
    raw = serialize_summary(summ)
    obj = json.loads(raw)
    assert tuple(obj) == FIELD_ORDER
    reordered = json.dumps(dict(reversed(list(obj.items()))))
    _assert_bit_equal(deserialize_summary(reordered), summ)


def test_truncated_stream():
    raw = serialize_summary(_random_summary(np.random.default_rng(2)))
    with pytest.raises(ParseError):
        deserialize_summary(raw[: len(raw) // 2])


def test_missing_field():
    obj = json.loads(serialize_summary(_random_summary(np.random.default_rng(3))))
    del obj["Xi"]
    with pytest.raises(ParseError):
        deserialize_summary(json.dumps(obj))


def test_zero_sign_rejected():
    obj = json.loads(serialize_summary(_random_summary(np.random.default_rng(4), p=10)))
    obj["selected"], obj["signs"], obj["lambda"] = [0], [0], [1.0]
    obj["xi"], obj["Xi"] = [0.0] * (obj["s"] + 1), np.eye(obj["s"] + 1).ravel().tolist()
    with pytest.raises(ValidationError) as info:
        deserialize_summary(json.dumps(obj))
    assert "signs" in str(info.value)


def test_asymmetric_xi_rejected():
    summ = StudySummary(SelectionSummary((0,), [1.0], (1,)), MomentSummary(5, [0.0, 0.0], np.eye(2)), 3, 1)
    obj = json.loads(serialize_summary(summ))
    obj["Xi"][1] = 1e-9
    with pytest.raises(ValidationError):
        deserialize_summary(json.dumps(obj))


def test_unknown_version():
    obj = json.loads(serialize_summary(_random_summary(np.random.default_rng(5))))
    obj["format_version"] = 2
    with pytest.raises(FormatVersionError):
        deserialize_summary(json.dumps(obj))


def test_file_round_trip(tmp_path):
    summ = _random_summary(np.random.default_rng(6))
    path = write_summary(summ, tmp_path / "a.carve-summary.json")
    _assert_bit_equal(read_summary(path), summ)
    with pytest.raises(DataError):
        read_summary(tmp_path / "missing.json")


def _sel_summary(selected, p=8, s=1):
    q = len(selected)
    return StudySummary(SelectionSummary(tuple(selected), np.ones(q), (1,) * q),
                        MomentSummary(10, np.zeros(s + q), np.eye(s + q)), p=p, s=s)


def test_union_examples():
    assert union_design_request([_sel_summary((1, 3)), _sel_summary((3, 5))]) == (1, 3, 5)
    assert union_design_request([_sel_summary(()), _sel_summary(())]) == ()
    assert union_design_request([_sel_summary((2, 6))]) == (2, 6)


def test_union_mismatch():
    with pytest.raises(IncompatibleStudiesError):
        union_design_request([_sel_summary((1,)), _sel_summary((1,), p=9)])
    with pytest.raises(IncompatibleStudiesError):
        union_design_request([_sel_summary((1,)), _sel_summary((1,), s=2)])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sets(st.integers(0, 19), max_size=6), min_size=1, max_size=5), st.randoms())
def test_union_order_invariant_and_idempotent(sets, rnd):
    summaries = [_sel_summary(sorted(s), p=20) for s in sets]
    u = union_design_request(summaries)
    shuffled = list(summaries)
    rnd.shuffle(shuffled)
    assert union_design_request(shuffled) == u
    assert union_design_request(summaries + [_sel_summary(u, p=20)]) == u
    assert u == tuple(sorted(set().union(*sets)))


def _fake_fit(alpha, n_total=100, bound=0.2, v=1.0, study_id="study"):
    s = len(alpha)
    return CarveFit(
        gamma_hat=np.asarray(alpha, dtype=float),
        sigma_hat=np.eye(s),
        zeta=np.zeros(s),
        z_hat=np.asarray(alpha, dtype=float),
        alpha_carve=np.asarray(alpha, dtype=float),
        v_carve=v * np.eye(s),
        v_split=2 * v * np.eye(s),
        efficiency_bound=bound,
        r=0.5,
        n_total=n_total,
        newton_iters=0,
        study_id=study_id,
    )


def test_aggregate_examples():
    one = _fake_fit([0.7])
    assert aggregate([one]).alpha_tilde[0] == 0.7
    same = [_fake_fit([1.25], n_total=n) for n in (50, 100, 400)]
    for mode in ("simple", "size"):
        assert aggregate(same, mode).alpha_tilde[0] == pytest.approx(1.25, abs=1e-15)
    res = aggregate([_fake_fit([1.0], 100), _fake_fit([2.0], 300)], mode="size-weighted")
    np.testing.assert_allclose(res.weights, [0.25, 0.75], rtol=1e-15)
    assert res.alpha_tilde[0] == pytest.approx(1.75, abs=1e-15)


def test_aggregate_rejects():
    with pytest.raises(DataError):
        aggregate([])
    with pytest.raises(DataError):
        aggregate([_fake_fit([1.0])], mode="median")
    with pytest.raises(IncompatibleStudiesError):
        aggregate([_fake_fit([1.0]), _fake_fit([1.0, 2.0])])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-10, 10), st.integers(10, 1000)), min_size=1, max_size=8), st.randoms())
def test_aggregate_weighted_sum_and_permutation_invariance(items, rnd):
    fits = [_fake_fit([a], n) for a, n in items]
    for mode in ("simple", "size"):
        res = aggregate(fits, mode)
        assert res.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(res.weights > 0)
        direct = sum(w * f.alpha_carve[0] for w, f in zip(res.weights, fits))
        assert res.alpha_tilde[0] == pytest.approx(direct, abs=1e-12)
        shuffled = list(fits)
        rnd.shuffle(shuffled)
        assert aggregate(shuffled, mode).alpha_tilde[0] == pytest.approx(res.alpha_tilde[0], abs=1e-12)


def test_variance_lower_gain_hand_value():
    fits = [_fake_fit([0.0], bound=0.2, v=1.0), _fake_fit([0.0], bound=0.5, v=4.0)]
    diag = 0.25 * 1.0 + 1.0 * 4.0
    cross = 2 * (1 / math.sqrt(0.8 * 0.5) - 1) * 2.0
    assert variance_lower_gain(fits)[0] == pytest.approx((diag + cross) / 4, rel=1e-14)


def test_variance_lower_gain_single_study():
    # one study: B/(1-B) V, the gap between split and carved variance at the bound
    assert variance_lower_gain([_fake_fit([0.0], bound=0.25, v=3.0)])[0] == pytest.approx(1.0, rel=1e-14)


def test_write_aggregate(tmp_path):
    res = aggregate([_fake_fit([1.0], 100, study_id="a"), _fake_fit([2.0], 300, study_id="b")], "size")
    write_aggregate(res, tmp_path / "agg.json")
    obj = json.loads((tmp_path / "agg.json").read_text())
    assert obj["alpha_tilde"] == [1.75]
    rows = (tmp_path / "agg.csv").read_text().splitlines()
    assert rows[0].startswith("study_id,weight")
    assert [r.split(",")[0] for r in rows[1:]] == ["a", "b", "aggregate"]


def test_site_without_raw_data_cannot_serve_union(rng):
    data = make_study(rng, p=6)
    summ = StudySummary(SelectionSummary((1,), [1.0], (1,)), compute_moment_summary(data, (1,)), 6, 1)
    site = StudySite(summ)
    assert site.moments_for((1,)) is summ.moments
    with pytest.raises(CapabilityError):
        site.moments_for((1, 3))
    full = StudySite(summ, data)
    m = full.moments_for((1, 3))
    np.testing.assert_allclose(m.Xi, compute_moment_summary(data, (1, 3)).Xi)


def test_carve_deterministic_through_serialization(rng):
    beta = np.zeros(6)
    beta[:2] = 1.0
    existing = make_study(rng, n=80, p=6, beta=beta)
    validation = make_study(rng, n=40, p=6, beta=beta)
    summ = StudySummary(SelectionSummary((0, 1), [1.0, 1.0], (1, 1)), compute_moment_summary(existing, (0, 1)), 6, 1)
    direct = carve_study(CarveInput.from_validation(summ, validation))
    via_file = carve_study(CarveInput.from_validation(deserialize_summary(serialize_summary(summ)), validation))
    assert direct.alpha_carve.tobytes() == via_file.alpha_carve.tobytes()
    assert direct.v_carve.tobytes() == via_file.v_carve.tobytes()
