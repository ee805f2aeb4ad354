import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tafusion.errors import ConfigError, ContractError, DimensionError, PretrainError
from tafusion.evaluation.training import EarlyStopper, TrainConfig, train_with_early_stopping
from tafusion.fusion import (CLASSIFICATION, REGRESSION, FusionFlags, FusionModel, Modality,
                             ModalityEmbedding, MultimodalNet, StaticEncoder, bimodal_attention,
                             cross_modal_fuse, decode_task, fusion_width, load_bundle,
                             predict_unimodal, pretrain_encoder, project_shared, save_bundle,
                             task_loss)
from tafusion.numerics import ParameterSet, Tensor, grad_check
from tafusion.sparse import (ItemSpec, QuantileBinner, SparseSeriesEncoder, SparseTokenizer,
                             TimedObservation, build_time_windows)


def _emb(tokens, mid="m"):
    t = Tensor(np.asarray(tokens, dtype=float))
    return ModalityEmbedding(mid, t, t.mean(axis=-2), np.ones(t.shape[0], dtype=bool))


def _identity_ps(d, mid="m"):
    ps = ParameterSet()
    ps.add(f"proj.{mid}.W", np.eye(d))
    ps.add(f"proj.{mid}.b", np.zeros(d))
    ps.add(f"missing.{mid}", np.full((2, d), 9.0))
    ps.add("shared.W", np.eye(d))
    ps.add("shared.b", np.zeros(d))
    return ps


# ------------------------------------------------------------ projection


def test_project_identity_passthrough():
    x = np.random.default_rng(0).normal(size=(3, 2, 4))
    e = project_shared(Tensor(x), _identity_ps(4), "m")
    np.testing.assert_array_equal(e.tokens.data, x)
    np.testing.assert_array_equal(e.pooled.data, x.mean(axis=1))


def test_project_hand_arithmetic():
    ps = ParameterSet()
    ps.add("proj.m.W", [[2.0]])
    ps.add("proj.m.b", [0.0])
    ps.add("missing.m", [[0.0]])
    ps.add("shared.W", [[3.0]])
    ps.add("shared.b", [0.0])
    assert project_shared(Tensor([[[1.0]]]), ps, "m").tokens.data.item() == 6.0


def test_project_absent_ignores_raw_data():
    ps = _identity_ps(3)
    rng = np.random.default_rng(1)
    a = project_shared(Tensor(rng.normal(size=(2, 2, 3))), ps, "m", present=[False, True])
    b = project_shared(Tensor(rng.normal(size=(2, 2, 3))), ps, "m", present=[False, True])
    np.testing.assert_array_equal(a.tokens.data[0], b.tokens.data[0])
    np.testing.assert_array_equal(a.tokens.data[0], np.full((2, 3), 9.0))


def test_project_errors():
    with pytest.raises(ConfigError):
        project_shared(Tensor(np.zeros((1, 2, 3))), _identity_ps(3), "other")
    with pytest.raises(DimensionError):
        project_shared(Tensor(np.zeros((1, 2, 5))), _identity_ps(3), "m")


# ----------------------------------------------------------- bimodal attn


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 5), st.integers(1, 5), st.integers(1, 6))
def test_biattention_commutes_exactly(seed, gi, gj, d):
    rng = np.random.default_rng(seed)
    a, b = _emb(rng.normal(size=(2, gi, d))), _emb(rng.normal(size=(2, gj, d)))
    assert np.array_equal(bimodal_attention(a, b).data, bimodal_attention(b, a).data)


def test_biattention_single_tokens():
    a, b = _emb([[[1.5, -2.0]]]), _emb([[[0.25, 4.0]]])
    assert bimodal_attention(a, b).data.tolist() == [[1.75, 2.0]]


def test_biattention_scalar_oracle():
    a, b = _emb([[[2.0]]]), _emb([[[1.0], [-1.0]]])
    w = math.exp(2) / (math.exp(2) + math.exp(-2))
    expected = (w * 1.0 + (1 - w) * -1.0) + 2.0
    assert abs(bimodal_attention(a, b).data.item() - expected) < 1e-15


# ------------------------------------------------------------------ fuse


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_fusion_width(n):
    rng = np.random.default_rng(n)
    embs = [_emb(rng.normal(size=(2, 3, 4)), f"m{i}") for i in range(n)]
    assert cross_modal_fuse(embs, n).shape == (2, fusion_width(n, 4))
    assert fusion_width(n, 4) == n * 4 + n * (n - 1) // 2 * 4


def test_fusion_width_examples():
    assert fusion_width(2, 2) == 6
    assert fusion_width(4, 16) == 10 * 16
    with pytest.raises(ContractError):
        cross_modal_fuse([_emb(np.zeros((1, 1, 2)))], 2)


def _random_model(mods, seed=0, flags=None, head=CLASSIFICATION, n_classes=3):
    m = FusionModel(mods, head, n_classes, d_s=4, hidden=5, flags=flags, seed=seed)
    rng = np.random.default_rng(seed + 50)
    for _, t in m.params.items():
        t.data = rng.normal(size=t.shape) * 0.5
    return m


_MODS = [Modality("a", "static", 3, 2), Modality("b", "sparse", 5, 3), Modality("c", "ecg", 2, 4)]


def _tokens(seed=0, B=4):
    rng = np.random.default_rng(seed)
    return {m.id: Tensor(rng.normal(size=(B, m.g, m.d))) for m in _MODS}


def test_block_permutation_with_permuted_decoder():
    full = _random_model(_MODS, seed=1)
    perm = [2, 0, 1]
    mods_p = [_MODS[i] for i in perm]
    other = FusionModel(mods_p, CLASSIFICATION, 3, d_s=4, hidden=5, seed=9)
    for k, t in full.params.items():
        if not k.startswith("decoder.0.W"):
            other.params[k].data = t.data.copy()
    d = 4
    pairs = list(combinations(range(3), 2))
    blocks = [slice(i * d, (i + 1) * d) for i in range(3)]
    blocks += [slice((3 + p) * d, (4 + p) * d) for p in range(3)]
    order_p = list(perm)
    for i, j in combinations(range(3), 2):
        a, b = sorted((perm[i], perm[j]))
        order_p.append(3 + pairs.index((a, b)))
    W = full.params["decoder.0.W"].data
    other.params["decoder.0.W"].data = np.concatenate([W[blocks[k]] for k in order_p])
    toks, present = _tokens(3), {}
    y = np.array([0, 2, 1, 1])
    la = task_loss(full.forward(toks, present), y, CLASSIFICATION).data
    lb = task_loss(other.forward(toks, present), y, CLASSIFICATION).data
    assert abs(la - lb) < 1e-12


def test_no_biattention_is_prefix_of_full():
    full = _random_model(_MODS, seed=2)
    nob = FusionModel(_MODS, CLASSIFICATION, 3, d_s=4, hidden=5,
                      flags=FusionFlags(no_biattention=True))
    for k, t in full.params.items():
        if not k.startswith("decoder"):
            nob.params[k].data = t.data.copy()
    toks = _tokens(4)
    a, b = full.fuse(toks, {}).data, nob.fuse(toks, {}).data
    assert b.shape[1] == 3 * 4
    np.testing.assert_array_equal(a[:, :12], b)


def test_no_shared_matches_identity_shared_map():
    full = _random_model(_MODS, seed=3)
    full.params["shared.W"].data = np.eye(4)
    full.params["shared.b"].data = np.zeros(4)
    nos = FusionModel(_MODS, CLASSIFICATION, 3, d_s=4, hidden=5, flags=FusionFlags(no_shared=True))
    assert "shared.W" not in nos.params
    for k, t in nos.params.items():
        t.data = full.params[k].data.copy()
    toks = _tokens(5)
    np.testing.assert_array_equal(full.forward(toks, {}).data, nos.forward(toks, {}).data)


# ---------------------------------------------------------------- decode


def test_decode_zero_weights_uniform():
    ps = ParameterSet()
    ps.add("decoder.0.W", np.zeros((6, 4)))
    ps.add("decoder.0.b", np.zeros(4))
    out = decode_task(Tensor(np.random.default_rng(0).normal(size=(3, 6))), ps, CLASSIFICATION)
    np.testing.assert_allclose(out.data, -math.log(4), rtol=0, atol=1e-15)


def test_decode_equal_logits_and_regression_passthrough():
    ps = ParameterSet()
    ps.add("decoder.0.W", np.zeros((2, 2)))
    ps.add("decoder.0.b", [3.5, 3.5])
    out = decode_task(Tensor(np.ones((1, 2))), ps, CLASSIFICATION).data
    np.testing.assert_allclose(out, -math.log(2), rtol=0, atol=1e-15)
    reg = ParameterSet()
    reg.add("decoder.0.W", [[0.0], [1.0], [0.0]])
    reg.add("decoder.0.b", [0.0])
    assert decode_task(Tensor([[5.0, -7.25, 2.0]]), reg, REGRESSION).data.tolist() == [-7.25]
    with pytest.raises(DimensionError):
        decode_task(Tensor([[1.0, 2.0]]), reg, REGRESSION)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_classifier_output_normalized(seed):
    m = _random_model(_MODS, seed=seed % 1000)
    out = m.forward(_tokens(seed, B=3), {"c": np.array([True, False, True])}).data
    np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, rtol=0, atol=1e-9)


# ----------------------------------------------------------- full model


def test_single_modality_matches_direct_wiring():
    mods = [Modality("a", "static", 3, 2)]
    m = _random_model(mods, seed=4)
    toks = {"a": Tensor(np.random.default_rng(6).normal(size=(5, 2, 3)))}
    fused = m.fuse(toks, {}).data
    ps = m.params
    h = toks["a"].data @ ps["proj.a.W"].data + ps["proj.a.b"].data
    h = h @ ps["shared.W"].data + ps["shared.b"].data
    np.testing.assert_allclose(fused, h.mean(axis=1), rtol=1e-14, atol=1e-14)
    z = np.maximum(h.mean(axis=1) @ ps["decoder.0.W"].data + ps["decoder.0.b"].data, 0)
    z = z @ ps["decoder.1.W"].data + ps["decoder.1.b"].data
    z = z - z.max(axis=1, keepdims=True)
    ref = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    np.testing.assert_allclose(m.forward(toks, {}).data, ref, rtol=1e-12, atol=1e-12)


def test_all_absent_is_constant():
    m = _random_model(_MODS, seed=5)
    absent = {k: np.zeros(4, dtype=bool) for k in "abc"}
    out = m.forward(_tokens(7), absent).data
    np.testing.assert_array_equal(out, np.broadcast_to(out[0], out.shape))
    np.testing.assert_array_equal(out, m.forward(_tokens(8), absent).data)


def _toy_sparse(seed):
    items = [ItemSpec("x"), ItemSpec("y")]
    tok = SparseTokenizer(items, {"x": QuantileBinner("x", 4, (-1.0, 0.0, 1.0)),
                                  "y": QuantileBinner("y", 4, (-1.0, 0.0, 1.0))})
    scheme = build_time_windows(np.linspace(0, 100, 21), (0, 25, 50, 75, 100))
    enc = SparseSeriesEncoder(tok, scheme, d=3, hidden=2, seed=seed)
    return enc


def _randomize(ps, seed):
    rng = np.random.default_rng(seed)
    for _, t in ps.items():
        t.data = rng.normal(size=t.shape) * 0.5


def test_end_to_end_gradcheck_two_modalities():
    static = StaticEncoder(3, g=2, d=2, hidden=3, seed=1)
    sparse = _toy_sparse(2)
    mods = [Modality("static", "static", 2, 2), Modality("labs", "sparse", 4, 4)]
    fusion = FusionModel(mods, CLASSIFICATION, 2, d_s=3, hidden=3, seed=3)
    net = MultimodalNet({"static": static, "labs": sparse}, fusion, frozen=False)
    params = net.trainable
    _randomize(params, 4)
    rng = np.random.default_rng(5)
    obs = [TimedObservation("s", str(rng.choice(["x", "y"])), float(t), float(rng.normal()))
           for t in (5.0, 30.0, 55.0, 90.0)]
    prepared = {"static": [static.prepare(rng.normal(size=3))], "labs": [sparse.prepare(obs, 0.0)]}

    def f():
        return task_loss(net.forward(prepared, {}, [0]), [1], CLASSIFICATION)
    assert grad_check(f, params) < 1e-4


# ------------------------------------------------------------ train loop


def test_early_stopper_rule():
    s = EarlyStopper(2)
    stops = [s.update(v) for v in [3, 1, 2, 2, 2]]
    assert stops == [False, False, False, True, True] and s.best_epoch == 2
    s = EarlyStopper(3)
    [s.update(v) for v in (0.9, 0.5, 0.7)]
    assert s.best_epoch == 2
    with pytest.raises(ConfigError):
        EarlyStopper(0)


def _scripted_training(vals, patience):
    ps = ParameterSet()
    w = ps.add("w", [0.0])
    seen = iter(vals)

    def batch_loss(idx):
        return (w - 1.0).sum() * 1.0

    snaps = []

    def val_loss():
        snaps.append(w.data.copy())
        return next(seen)
    res = train_with_early_stopping(ps, [0, 1], batch_loss, val_loss,
                                    TrainConfig(max_epochs=len(vals), batch_size=2,
                                                patience=patience))
    return res, snaps, w


def test_training_returns_best_checkpoint():
    res, snaps, w = _scripted_training([3, 1, 2, 2, 2], 2)
    assert res.epochs_run == 4 and res.best_epoch == 2
    np.testing.assert_array_equal(w.data, snaps[1])
    res, snaps, w = _scripted_training([5, 4, 3, 2], 2)
    assert res.best_epoch == 4
    np.testing.assert_array_equal(w.data, snaps[3])
    with pytest.raises(ContractError):
        train_with_early_stopping(ParameterSet(), [], None, None, TrainConfig())


def _pretrain_setup(seed=0, n=40):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    y = (x[:, 0] > 0).astype(int)
    enc = StaticEncoder(3, g=2, d=2, hidden=4, seed=seed)
    prepared = [enc.prepare(v) for v in x]
    return enc, prepared, y


def test_pretrain_single_epoch_and_determinism():
    cfg = TrainConfig(max_epochs=1, batch_size=8)
    enc, prep, y = _pretrain_setup()
    r = pretrain_encoder("static", enc, prep, y, np.arange(30), np.arange(30, 40),
                         CLASSIFICATION, cfg)
    assert r.result.best_epoch == 1
    enc2, prep2, _ = _pretrain_setup()
    pretrain_encoder("static", enc2, prep2, y, np.arange(30), np.arange(30, 40),
                     CLASSIFICATION, cfg)
    assert enc.params.to_bytes() == enc2.params.to_bytes()
    out = predict_unimodal(enc, r.decoder, prep, np.arange(40), CLASSIFICATION)
    assert out.shape == (40, 2)


def test_pretrain_without_samples_names_modality():
    enc, prep, y = _pretrain_setup()
    with pytest.raises(PretrainError, match="ecg"):
        pretrain_encoder("ecg", enc, prep, y, np.arange(30), np.arange(30, 40),
                         CLASSIFICATION, TrainConfig(max_epochs=1),
                         present=np.zeros(40, dtype=bool))


def test_bundle_round_trip(tmp_path):
    m = _random_model(_MODS, seed=6, flags=FusionFlags(no_biattention=True))
    encs = {mid: StaticEncoder(3, seed=k) for k, mid in enumerate("abc")}
    save_bundle(tmp_path / "b", m, encs, {"artifacts.txt": "hello\n"})
    m2, encs2 = load_bundle(tmp_path / "b")
    assert m2.flags == m.flags and m2.modalities == m.modalities
    assert m2.params.to_bytes() == m.params.to_bytes()
    assert all(encs2[k].to_bytes() == encs[k].params.to_bytes() for k in "abc")
    toks = _tokens(9)
    np.testing.assert_array_equal(m.forward(toks, {}).data, m2.forward(toks, {}).data)
    with pytest.raises(ConfigError):
        load_bundle(tmp_path / "missing")
