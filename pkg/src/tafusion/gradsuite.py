"""Gradient verification over every layer primitive and a few end-to-end compositions.

Each case builds a small random problem and returns a closure plus the tensors
to perturb; ``run_suite`` compares traced gradients against central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .fusion import CLASSIFICATION, FusionModel, Modality, MultimodalNet, StaticEncoder, task_loss
from .hier import _vitals_forward, _vitals_forward_grid, encode_ecg_signal, init_ecg_params, init_vitals_params
from .numerics import (ParameterSet, Tensor, bilstm_forward, concat, conv1d, embedding_lookup,
                       global_avg_pool, grad_check, gru_forward, linear, log_softmax,
                       lstm_forward, mean_pool, mlp, relu, residual_conv1d_block,
                       scaled_dot_attention, sigmoid, softmax, stack, tanh, weighted_sum)
from .numerics.tensor import exp
from .numerics.params import init_bilstm, init_gru, init_lstm, init_mlp, init_residual_block
from .sparse import (ItemSpec, QuantileBinner, SparseSeriesEncoder, SparseTokenizer,
                     TimedObservation, build_time_windows, encode_sparse_series)

TOLERANCE = 1e-4


@dataclass
class CaseResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _leaf(rng, shape, name, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True, name=name)


def _randomize(ps: ParameterSet, rng, scale=0.5):
    for _, t in ps.items():
        t.data = rng.normal(size=t.shape) * scale


def _elementwise(rng):
    x = _leaf(rng, (3, 4), "x")
    w = rng.normal(size=(3, 4))
    return (lambda: weighted_sum(tanh(x) * sigmoid(x) + relu(x) * x + exp(x * x) / 4.0, w)), x


def _linear(rng):
    x, W, b = _leaf(rng, (3, 4), "x"), _leaf(rng, (4, 2), "W"), _leaf(rng, (2,), "b")
    w = rng.normal(size=(3, 2))
    return (lambda: weighted_sum(linear(x, W, b), w)), [x, W, b]


def _embedding(rng):
    table = _leaf(rng, (5, 3), "table")
    ids = np.array([[0, 3, 3], [4, 1, 0]])
    w = rng.normal(size=(2, 3, 3))
    return (lambda: weighted_sum(embedding_lookup(table, ids), w)), table


def _softmax(rng):
    x = _leaf(rng, (3, 5), "x", 2.0)
    w1, w2 = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    return (lambda: weighted_sum(softmax(x), w1) + weighted_sum(log_softmax(x), w2)), x


def _attention(rng):
    Q, K, V = _leaf(rng, (2, 3, 4), "Q", 0.7), _leaf(rng, (2, 5, 4), "K", 0.7), _leaf(rng, (2, 5, 3), "V")
    w = rng.normal(size=(2, 3, 3))
    return (lambda: weighted_sum(scaled_dot_attention(Q, K, V), w)), [Q, K, V]


def _pools(rng):
    x = _leaf(rng, (2, 4, 3), "x")
    w1, w2 = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
    return (lambda: weighted_sum(mean_pool(x), w1) + weighted_sum(global_avg_pool(x), w2)), x


def _concat_stack(rng):
    a, b = _leaf(rng, (2, 3), "a"), _leaf(rng, (2, 2), "b")
    w1, w2 = rng.normal(size=(2, 5)), rng.normal(size=(2, 2, 3))
    return (lambda: weighted_sum(concat([a, b], axis=-1), w1)
            + weighted_sum(stack([a, a * 2.0], axis=0), w2)), [a, b]


def _mlp(rng):
    ps = ParameterSet(1)
    init_mlp(ps, "m", [4, 5, 3])
    _randomize(ps, rng)
    x = Tensor(rng.normal(size=(6, 4)))
    w = rng.normal(size=(6, 3))
    return (lambda: weighted_sum(mlp(x, ps, "m", 2), w)), ps


def _conv(rng):
    x, W, b = _leaf(rng, (2, 3, 20), "x"), _leaf(rng, (2, 3, 5), "W"), _leaf(rng, (2,), "b")
    w1, w2 = rng.normal(size=(2, 2, 4)), rng.normal(size=(2, 2, 18))
    return (lambda: weighted_sum(conv1d(x, W, b, stride=5), w1)
            + weighted_sum(conv1d(x, W, b, stride=1, padding=1), w2)), [x, W, b]


def _residual(rng):
    ps = ParameterSet(2)
    init_residual_block(ps, "blk", 2, 3, 3)
    _randomize(ps, rng, 0.4)
    x = _leaf(rng, (1, 2, 8), "x")
    w = rng.normal(size=(1, 3, 8))
    return (lambda: weighted_sum(residual_conv1d_block(x, ps, "blk"), w)), [ps, x]


def _recurrent(rng):
    ps = ParameterSet(3)
    init_lstm(ps, "l", 2, 3)
    init_gru(ps, "g", 2, 3)
    init_bilstm(ps, "b", 2, 2)
    _randomize(ps, rng, 0.4)
    x = Tensor(rng.normal(size=(2, 4, 2)))
    w1, w2, w3 = rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), rng.normal(size=(2, 4, 4))

    def f():
        return (weighted_sum(lstm_forward(x, ps, "l")[1], w1)
                + weighted_sum(gru_forward(x, ps, "g")[1], w2)
                + weighted_sum(bilstm_forward(x, ps, "b")[0], w3))
    return f, ps


def _toy_sparse(seed):
    items = [ItemSpec("x"), ItemSpec("y")]
    tok = SparseTokenizer(items, {"x": QuantileBinner("x", 4, (-1.0, 0.0, 1.0)),
                                  "y": QuantileBinner("y", 4, (-1.0, 0.0, 1.0))})
    scheme = build_time_windows(np.linspace(0, 100, 21), (0, 25, 50, 75, 100))
    return SparseSeriesEncoder(tok, scheme, d=3, hidden=2, seed=seed)


def _sparse_encoder(rng):
    enc = _toy_sparse(4)
    _randomize(enc.params, rng)
    obs = [TimedObservation("s", it, t, v) for it, t, v in
           (("x", 10.0, 0.2), ("y", 55.0, 2.6), ("x", 80.0, -0.9))]
    w = rng.normal(size=(4, 4))

    def f():
        return weighted_sum(encode_sparse_series(obs, enc.scheme, enc.tokenizer, enc.params,
                                                 0.0).steps, w)
    return f, enc.params


def _vitals_path(rng):
    ps = ParameterSet(5)
    init_vitals_params(ps, 2, d_a=2, c_hf=3, c_lf=3, k_lf=1)
    _randomize(ps, rng)
    x = rng.normal(size=(1, 2, 2, 8))
    grid = rng.normal(size=(2, 2, 12))
    w1, w2 = rng.normal(size=(1, 2, 3)), rng.normal(size=(1, 3))
    w3 = rng.normal(size=(2, 3, 3))

    def f():
        _, tokens, macro = _vitals_forward(x, ps)
        windowed = _vitals_forward_grid(grid, [slice(0, 4), slice(4, 8), slice(8, 12)], ps)[1]
        return weighted_sum(tokens, w1) + weighted_sum(macro, w2) + weighted_sum(windowed, w3)
    return f, ps


def _ecg_signal(rng):
    ps = ParameterSet(6)
    init_ecg_params(ps, 3, leads=2, c_sig=3)
    _randomize(ps, rng)
    x = Tensor(rng.normal(size=(2, 32)), name="signal")
    w = rng.normal(size=3)
    sig = [t for k, t in ps.items() if k.startswith(("stem", "hf"))]
    return (lambda: weighted_sum(encode_ecg_signal(x, ps, shape=(2, 32)), w)), sig + [x]


def _two_modality(rng):
    static = StaticEncoder(3, g=2, d=2, hidden=3, seed=1)
    sparse = _toy_sparse(2)
    mods = [Modality("static", "static", 2, 2), Modality("labs", "sparse", 4, 4)]
    fusion = FusionModel(mods, CLASSIFICATION, 2, d_s=3, hidden=3, seed=3)
    net = MultimodalNet({"static": static, "labs": sparse}, fusion, frozen=False)
    params = net.trainable
    _randomize(params, rng)
    obs = [TimedObservation("s", str(rng.choice(["x", "y"])), t, float(rng.normal()))
           for t in (5.0, 30.0, 55.0, 90.0)]
    prepared = {"static": [static.prepare(rng.normal(size=3))], "labs": [sparse.prepare(obs, 0.0)]}
    return (lambda: task_loss(net.forward(prepared, {}, [0]), [1], CLASSIFICATION)), params


CASES = {
    "elementwise": _elementwise,
    "linear": _linear,
    "embedding": _embedding,
    "softmax": _softmax,
    "attention": _attention,
    "pools": _pools,
    "concat_stack": _concat_stack,
    "mlp": _mlp,
    "conv1d": _conv,
    "residual_block": _residual,
    "recurrent": _recurrent,
    "ecg_signal": _ecg_signal,
    "sparse_encoder": _sparse_encoder,
    "vitals_path": _vitals_path,
    "two_modality_forward": _two_modality,
}


def run_suite(seed: int = 0, eps: float = 1e-5) -> list[CaseResult]:
    out = []
    for i, (name, build) in enumerate(CASES.items()):
        t0 = time.perf_counter()
        f, params = build(np.random.default_rng(seed * 1000 + i))
        err = grad_check(f, params, eps=eps)
        out.append(CaseResult(name, float(err), time.perf_counter() - t0))
    return out
