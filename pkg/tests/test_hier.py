import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tafusion.errors import ConfigError, ContractError, DimensionError, VocabularyError
from tafusion.hier import (EcgRecord, EcgTimelineEncoder, SlidingWindowConfig, VitalsGrid,
                           VitalsStats, encode_ecg_features, encode_ecg_signal, encode_ecg_text,
                           encode_ecg_timeline, encode_vitals, fit_vitals_stats, fuse_ecg_record,
                           init_ecg_params, init_vitals_params, normalize_vitals, slice_windows,
                           upsample_vitals, VitalsEncoder)
from tafusion.numerics import ParameterSet, Tensor, grad_check, weighted_sum
from tafusion.numerics.tensor import reshape
from tafusion.sparse import ADMISSION_RELATIVE, build_time_windows


def _randomize(ps, scale=0.5, seed=0, skip=()):
    rng = np.random.default_rng(seed)
    for k, t in ps.items():
        if not any(k.startswith(s) for s in skip):
            t.data = rng.normal(size=t.shape) * scale


def _ecg_params(n_features=3, leads=12, seed=0, **kw):
    ps = ParameterSet(seed)
    init_ecg_params(ps, n_features, leads=leads, **kw)
    return ps


# ------------------------------------------------------------------ signal


def test_zero_signal_zero_bias_gives_zero():
    ps = _ecg_params()
    assert all(not t.data.any() for k, t in ps.items() if k.endswith(".b"))
    assert not encode_ecg_signal(np.zeros((12, 625)), ps).data.any()


def test_time_reversal_changes_signal_embedding():
    ps = _ecg_params()
    x = np.random.default_rng(1).normal(size=(12, 625))
    a = encode_ecg_signal(x, ps).data
    b = encode_ecg_signal(x[:, ::-1].copy(), ps).data
    assert not np.array_equal(a, b)


def test_signal_shape_is_checked():
    ps = _ecg_params()
    with pytest.raises(DimensionError):
        encode_ecg_signal(np.zeros((12, 624)), ps)
    with pytest.raises(DimensionError):
        EcgRecord(np.zeros((11, 625)), np.zeros(3), (), 0.0)


def test_signal_gradcheck_reduced_size():
    ps = _ecg_params(leads=2, c_sig=3)
    _randomize(ps, seed=3)
    x = Tensor(np.random.default_rng(4).normal(size=(2, 32)), name="signal")
    w = np.random.default_rng(5).normal(size=3)
    sig = [t for k, t in ps.items() if k.startswith(("stem", "hf"))]

    def f():
        return weighted_sum(encode_ecg_signal(x, ps, shape=(2, 32)), w)
    assert grad_check(f, sig + [x]) < 1e-4


# -------------------------------------------------------------------- text


def test_text_embedding_rules():
    ps = _ecg_params()
    table = ps["text_emb"]
    assert not encode_ecg_text([], table).data.any()
    assert np.array_equal(encode_ecg_text([7], table).data, table.data[7])
    assert np.array_equal(encode_ecg_text([3, 90], table).data, encode_ecg_text([90, 3], table).data)
    with pytest.raises(VocabularyError):
        encode_ecg_text([143], table)


# ---------------------------------------------------------------- features


def test_features_zero_and_identity():
    ps = _ecg_params(n_features=4, d_feat=4)
    assert not encode_ecg_features(np.zeros(4), ps).data.any()
    one = ParameterSet()
    one.add("feat.0.W", np.eye(4))
    one.add("feat.0.b", np.zeros(4))
    x = np.array([1.5, -2.0, 0.0, 3.25])
    assert np.array_equal(encode_ecg_features(x, one).data, x)
    with pytest.raises(DimensionError):
        encode_ecg_features(np.zeros(5), ps)


def test_features_gradcheck():
    ps = _ecg_params(n_features=4)
    _randomize(ps, seed=6)
    feat = [t for k, t in ps.items() if k.startswith("feat")]
    x = np.random.default_rng(7).normal(size=4)
    w = np.random.default_rng(8).normal(size=8)
    assert grad_check(lambda: weighted_sum(encode_ecg_features(x, ps), w), feat) < 1e-5


# -------------------------------------------------------------------- fuse


def test_fuse_hand_arithmetic():
    ps = ParameterSet()
    ps.add("fuse.W", np.ones((3, 1)))
    ps.add("fuse.b", np.zeros(1))
    out = fuse_ecg_record(Tensor([1.0]), Tensor([2.0]), Tensor([3.0]), ps)
    assert out.data.tolist() == [6.0]
    z = fuse_ecg_record(Tensor([0.0]), Tensor([0.0]), Tensor([0.0]), ps)
    assert z.data.tolist() == [0.0]


def test_fuse_swap_changes_output():
    ps = ParameterSet(2)
    ps.add("fuse.W", ps.rng.normal(size=(6, 4)))
    ps.add("fuse.b", np.ones(4))
    a, b, c = (Tensor(np.random.default_rng(i).normal(size=2)) for i in range(3))
    assert not np.array_equal(fuse_ecg_record(a, b, c, ps).data, fuse_ecg_record(a, c, b, ps).data)


# ---------------------------------------------------------------- timeline


def _record(rng, t, feats=3):
    return EcgRecord(rng.normal(size=(12, 625)), rng.normal(size=feats),
                     tuple(int(v) for v in rng.integers(0, 143, 3)), t)


def _scheme():
    return build_time_windows(np.linspace(0, 1000, 101), (0, 20, 40, 60, 80, 100),
                              ADMISSION_RELATIVE)


def _forward_lf(micro, ps):
    from tafusion.hier import _lf
    K, d = micro.shape
    return _lf(reshape(Tensor(micro), (1, K, d)), ps)


def test_timeline_single_record():
    ps = _ecg_params()
    _randomize(ps, seed=9, skip=("stem", "hf"))
    rng = np.random.default_rng(10)
    emb = encode_ecg_timeline([_record(rng, 500.0)], _scheme(), 0.0, ps)
    nz = [k for k in range(5) if emb.micro.data[k].any()]
    assert nz == [2]
    tokens, macro = _forward_lf(emb.micro.data, ps)
    assert np.array_equal(emb.macro.data, macro.data[0])


def test_timeline_within_window_swap():
    ps = _ecg_params()
    rng = np.random.default_rng(11)
    a, b, c = _record(rng, 410.0), _record(rng, 450.0), _record(rng, 900.0)
    e1 = encode_ecg_timeline([a, b, c], _scheme(), 0.0, ps)
    e2 = encode_ecg_timeline([c, b, a], _scheme(), 0.0, ps)
    assert np.array_equal(e1.macro.data, e2.macro.data)
    assert np.array_equal(e1.micro.data, e2.micro.data)


def test_timeline_zero_records_is_constant():
    ps = _ecg_params()
    _randomize(ps, seed=12)
    emb = encode_ecg_timeline([], _scheme(), 0.0, ps)
    assert not emb.micro.data.any()
    _, macro = _forward_lf(np.zeros((5, 16)), ps)
    assert np.array_equal(emb.macro.data, macro.data[0])


def test_batched_ecg_matches_reference_path():
    rng = np.random.default_rng(13)
    enc = EcgTimelineEncoder(_scheme(), n_features=3, seed=4)
    _randomize(enc.params, scale=0.3, seed=14)
    subjects = [[_record(rng, t) for t in ts] for ts in ([100.0, 120.0, 700.0], [], [999.0])]
    batch = enc.collate([enc.prepare(r, 0.0) for r in subjects])
    tokens, macro = enc.forward(batch, with_summary=True)
    assert tokens.shape == (3, 5, enc.width)
    for b, recs in enumerate(subjects):
        ref = encode_ecg_timeline(recs, enc.scheme, 0.0, enc.params)
        np.testing.assert_allclose(tokens.data[b], ref.tokens.data, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(macro.data[b], ref.macro.data, rtol=1e-12, atol=1e-12)


# --------------------------------------------------------------- upsampling


def _grid(values, mask=None):
    values = np.atleast_2d(np.asarray(values, dtype=float))
    n = values.shape[1]
    mask = np.isfinite(values) if mask is None else np.asarray(mask)
    return VitalsGrid(tuple(f"v{i}" for i in range(len(values))), 60.0 * np.arange(n),
                      np.where(mask, values, 0.0), mask)


def test_upsample_linear_between_observations():
    g = upsample_vitals(_grid([[0.0, 4.0, np.nan]]))
    assert g.times[:5].tolist() == [0, 15, 30, 45, 60]
    assert g.values[0, :5].tolist() == [0.0, 1.0, 2.0, 3.0, 4.0]
    # after the last observation the nearest value is carried
    assert g.values[0, 5:].tolist() == [4.0] * 7
    assert g.mask.all()


def test_upsample_single_observation_and_unobserved():
    g = upsample_vitals(_grid([[np.nan, np.nan, 7.0, np.nan], [np.nan] * 4]))
    assert g.values[0].tolist() == [7.0] * 16
    assert g.values[1].tolist() == [0.0] * 16


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_upsample_reproduces_and_stays_in_range(seed):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=(3, 24)) * 10
    mask = rng.uniform(size=(3, 24)) < 0.4
    mask[0, int(rng.integers(24))] = True
    g = _grid(vals, mask)
    up = upsample_vitals(g)
    assert up.values.shape == (3, 96)
    for i in range(3):
        obs = g.values[i, mask[i]]
        np.testing.assert_array_equal(up.values[i, ::4][mask[i]], obs)
        if obs.size:
            assert obs.min() <= up.values[i].min() and up.values[i].max() <= obs.max()


# ------------------------------------------------------------ normalization


def test_normalize_hand_values():
    g = _grid([[2.0, 4.0], [5.0, 5.0]])
    st_ = VitalsStats(("v0", "v1"), (2.0, 5.0), (2.0, 0.0))
    out = normalize_vitals(g, st_)
    assert out.values.tolist() == [[0.0, 1.0], [0.0, 0.0]]
    with pytest.raises(ConfigError):
        normalize_vitals(g, VitalsStats(("v0",), (0.0,), (1.0,)))


def test_stats_use_observed_values_only():
    g = _grid([[1.0, np.nan, 3.0]])
    s = fit_vitals_stats([g])
    assert s.mean == (2.0,) and s.std == (1.0,)


# ------------------------------------------------------------------ slicing


def _fine_grid(T, items=1):
    n = T // 15
    vals = np.arange(items * n, dtype=float).reshape(items, n)
    return VitalsGrid(tuple(f"v{i}" for i in range(items)), 15.0 * np.arange(n), vals,
                      np.ones_like(vals, dtype=bool))


def test_slice_default_day():
    w = slice_windows(_fine_grid(1440, 2), SlidingWindowConfig(240, 120))
    assert len(w) == 11
    assert all(x.shape == (2, 16) for x in w)
    assert w[1][0, 0] == 8.0  # second window starts at 120 min


def test_slice_tiling_and_full():
    g = _fine_grid(1440)
    tiles = slice_windows(g, SlidingWindowConfig(360, 360))
    assert len(tiles) == 4
    np.testing.assert_array_equal(np.concatenate(tiles, axis=1), g.values)
    full = slice_windows(g, SlidingWindowConfig(1440, 60))
    assert len(full) == 1 and np.array_equal(full[0], g.values)


def test_slice_horizon_too_short():
    with pytest.raises(ConfigError):
        slice_windows(_fine_grid(120), SlidingWindowConfig(240, 120))
    with pytest.raises(ConfigError):
        SlidingWindowConfig(250, 120)


def _brute_count(T, W, S):
    n, k = 0, 0
    while k * S + W <= T:
        n, k = n + 1, k + 1
    return n


@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 200), st.integers(1, 200), st.integers(1, 100))
def test_slice_count_matches_enumeration(t, w, s):
    T, W, S = 15 * max(t, w), 15 * w, 15 * s
    got = slice_windows(_fine_grid(T), SlidingWindowConfig(W, S))
    assert len(got) == _brute_count(T, W, S) == (T - W) // S + 1


# ------------------------------------------------------------ vitals encoder


def _vitals_params(n_items, seed=0, **kw):
    ps = ParameterSet(seed)
    init_vitals_params(ps, n_items, **kw)
    return ps


def test_single_item_attention_is_passthrough():
    ps = _vitals_params(1)
    windows = list(np.random.default_rng(0).normal(size=(3, 1, 16)))
    emb, w = encode_vitals(windows, ps, return_weights=True)
    assert np.array_equal(w, np.ones_like(w))
    assert emb.micro.shape == (3, 16) and emb.macro.shape == (16,)


def test_twin_items_get_equal_attention():
    ps = _vitals_params(3, seed=1)
    ps["lift.A"].data[2] = ps["lift.A"].data[0]
    ps["lift.c"].data[2] = ps["lift.c"].data[0] = 0.3
    x = np.random.default_rng(2).normal(size=(3, 3, 16))
    x[:, 2] = x[:, 0]
    _, w = encode_vitals(list(x), ps, return_weights=True)
    np.testing.assert_array_equal(w[..., 0], w[..., 2])
    np.testing.assert_array_equal(w[..., 0, :], w[..., 2, :])
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, rtol=0, atol=1e-9)


def test_vitals_gradcheck_small():
    ps = _vitals_params(2, d_a=2, c_hf=3, c_lf=3, k_lf=1)
    _randomize(ps, seed=3)
    x = np.random.default_rng(4).normal(size=(2, 2, 8))
    wt = np.random.default_rng(5).normal(size=(2, 3))

    def f():
        return weighted_sum(encode_vitals(list(x), ps).tokens, wt)
    assert grad_check(f, ps) < 1e-4


def test_encode_vitals_needs_a_window():
    with pytest.raises(ContractError):
        encode_vitals([], _vitals_params(2))


def test_batched_vitals_matches_per_window_path():
    rng = np.random.default_rng(5)
    items = ("a", "b", "c")
    grids = []
    for _ in range(3):
        mask = rng.random((3, 24)) < 0.6
        grids.append(VitalsGrid(items, 60.0 * np.arange(24), rng.normal(80, 10, (3, 24)) * mask,
                                mask))
    stats = fit_vitals_stats(grids)
    enc = VitalsEncoder(stats, SlidingWindowConfig(240, 120), seed=2, d_a=2, c_hf=4, c_lf=4)
    batch = enc.collate([enc.prepare(g) for g in grids])
    tokens, macro = enc.forward(batch, with_summary=True)
    assert tokens.shape == (3, 11, 4)
    for b, g in enumerate(grids):
        win = slice_windows(normalize_vitals(upsample_vitals(g), stats), enc.cfg)
        ref = encode_vitals(win, enc.params)
        assert np.allclose(ref.tokens.data, tokens.data[b], atol=1e-12)
        assert np.allclose(ref.macro.data, macro.data[b], atol=1e-12)
