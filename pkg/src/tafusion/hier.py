"""Two-scale encoders for ECG timelines and hourly vitals.

ECG: each record's signal (conv stem + residual stack + time average), text
terms (mean embedding) and scalar features (MLP) are fused into one vector;
records are mean pooled inside percentile time windows and a second residual
stack runs across the window sequence.

Vitals: hourly grids are upsampled to 15 minutes, z-scored, cut into
overlapping windows; at each timepoint the items attend to one another, a
residual stack summarizes each window and another runs across windows.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, LeakageError
from .numerics import (ParameterSet, Tensor, concat, embedding_lookup, global_avg_pool, mean_pool,
                       mlp, relu, residual_stack, scaled_dot_attention, stack)
from .numerics.layers import channels_last, conv, dense
from .numerics.params import init_conv, init_embedding, init_linear, init_mlp, init_residual_block
from .numerics.tensor import getitem, matmul, reshape, transpose
from .sparse import TimeWindowScheme, TrainingScope

SIGNAL_SHAPE = (12, 625)
TEXT_VOCAB = 143
RESOLUTION = 15  # minutes


# ------------------------------------------------------------------ records


@dataclass(eq=False)
class EcgRecord:
    signal: np.ndarray
    features: np.ndarray
    text_tokens: tuple[int, ...]
    timestamp: float

    def __post_init__(self):
        self.signal = np.asarray(self.signal)
        if self.signal.dtype not in (np.float32, np.float64):
            self.signal = self.signal.astype(np.float64)
        self.features = np.asarray(self.features, dtype=float)
        self.text_tokens = tuple(int(t) for t in self.text_tokens)
        self.timestamp = float(self.timestamp)
        if self.signal.shape != SIGNAL_SHAPE:
            raise DimensionError(f"ECG signal must be {SIGNAL_SHAPE}, got {self.signal.shape}")

    def __eq__(self, other):
        if not isinstance(other, EcgRecord):
            return NotImplemented
        return (self.timestamp == other.timestamp and self.text_tokens == other.text_tokens
                and np.array_equal(self.signal, other.signal)
                and np.array_equal(self.features, other.features))

    def content_key(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.signal, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        h.update(repr(self.text_tokens).encode())
        return h.hexdigest()


@dataclass(eq=False)
class VitalsGrid:
    items: tuple[str, ...]
    times: np.ndarray  # minutes from the grid origin
    values: np.ndarray  # items x times
    mask: np.ndarray

    def __post_init__(self):
        self.items = tuple(self.items)
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        shape = (len(self.items), len(self.times))
        if self.values.shape != shape or self.mask.shape != shape:
            raise DimensionError(f"vitals grid values/mask must be {shape}, got "
                                 f"{self.values.shape} and {self.mask.shape}")
        if not np.isfinite(self.values[self.mask]).all():
            raise ContractError("vitals grid has non-finite observed values")

    def __eq__(self, other):
        if not isinstance(other, VitalsGrid):
            return NotImplemented
        return (self.items == other.items and np.array_equal(self.times, other.times)
                and np.array_equal(self.values, other.values)
                and np.array_equal(self.mask, other.mask))

    @property
    def horizon(self) -> float:
        """Covered span assuming each grid point stands for one step."""
        if len(self.times) < 2:
            return float(RESOLUTION * len(self.times))
        step = self.times[1] - self.times[0]
        return float(self.times[-1] - self.times[0] + step)


@dataclass(frozen=True)
class SlidingWindowConfig:
    W: float = 240.0
    S: float = 120.0
    t_0: float = 0.0

    def __post_init__(self):
        if not (self.W > 0 and self.S > 0):
            raise ConfigError(f"window length and step must be positive, got W={self.W} S={self.S}")
        if self.W % RESOLUTION or self.S % RESOLUTION:
            raise ConfigError(f"W and S must be multiples of {RESOLUTION} minutes")

    def count(self, T: float) -> int:
        if T < self.W:
            raise ConfigError(f"horizon {T} min shorter than window {self.W} min")
        return int((T - self.W) // self.S) + 1


@dataclass
class HierEmbedding:
    micro: Tensor  # per-window embeddings
    macro: Tensor  # mean of the low-frequency sequence
    tokens: Tensor  # low-frequency output sequence


# --------------------------------------------------------------------- ECG


def init_ecg_params(ps: ParameterSet, n_features: int, leads: int = 12, vocab: int = TEXT_VOCAB,
                    c_sig: int = 8, d_text: int = 8, d_feat: int = 8, d_rec: int = 16,
                    c_lf: int = 16, stem_k: int = 5, k: int = 3, n_blocks: int = 2):
    init_conv(ps, "stem", leads, c_sig, stem_k)
    for i in range(n_blocks):
        init_residual_block(ps, f"hf.{i}", c_sig, c_sig, k)
    init_embedding(ps, "text_emb", vocab, d_text, std=0.5)
    init_mlp(ps, "feat", [n_features, d_feat, d_feat])
    init_linear(ps, "fuse", c_sig + d_text + d_feat, d_rec)
    for i in range(n_blocks):
        init_residual_block(ps, f"lf.{i}", d_rec if i == 0 else c_lf, c_lf, k)


def _signal_batch(x: Tensor, ps: ParameterSet) -> Tensor:
    """(R, leads, L) -> (R, c_sig)."""
    stride = ps["stem.W"].shape[2]
    h = conv(x, ps, "stem", stride=stride, padding=0)
    n = sum(1 for k in ps.names() if k.startswith("hf.") and k.endswith(".conv1.W"))
    return global_avg_pool(residual_stack(h, ps, "hf", n))


def encode_ecg_signal(signal, ps: ParameterSet, shape: tuple[int, int] = SIGNAL_SHAPE) -> Tensor:
    x = signal if isinstance(signal, Tensor) else Tensor(np.asarray(signal, dtype=float))
    if x.shape != tuple(shape):
        raise DimensionError(f"signal must be {tuple(shape)}, got {x.shape}")
    return reshape(_signal_batch(reshape(x, (1,) + x.shape), ps), (-1,))


def encode_ecg_text(text_tokens: Sequence[int], table: Tensor) -> Tensor:
    if len(text_tokens) == 0:
        return Tensor(np.zeros(table.shape[1]))
    return mean_pool(embedding_lookup(table, sorted(int(t) for t in text_tokens)))


def encode_ecg_features(features, ps: ParameterSet, name: str = "feat") -> Tensor:
    x = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=float))
    n = sum(1 for k in ps.names() if k.startswith(f"{name}.") and k.endswith(".W"))
    width = ps[f"{name}.0.W"].shape[0]
    if x.shape[-1] != width:
        raise DimensionError(f"feature width {x.shape[-1]} != configured {width}")
    single = x.ndim == 1
    y = mlp(reshape(x, (1, width)) if single else x, ps, name, n)
    return reshape(y, (-1,)) if single else y


def fuse_ecg_record(signal_emb: Tensor, text_emb: Tensor, feature_emb: Tensor,
                    ps: ParameterSet, name: str = "fuse") -> Tensor:
    x = concat([signal_emb, text_emb, feature_emb], axis=-1)
    single = x.ndim == 1
    y = relu(dense(reshape(x, (1, -1)) if single else x, ps, name))
    return reshape(y, (-1,)) if single else y


def _lf(seq: Tensor, ps: ParameterSet) -> tuple[Tensor, Tensor]:
    """(B, K, d) -> tokens (B, K, c_lf), macro (B, c_lf)."""
    n = sum(1 for k in ps.names() if k.startswith("lf.") and k.endswith(".conv1.W"))
    out = residual_stack(transpose(seq, (0, 2, 1)), ps, "lf", n)
    return channels_last(out), global_avg_pool(out)


def record_order(records: Sequence[EcgRecord], windows) -> list[int]:
    keys = [(int(w), r.timestamp, r.content_key()) for r, w in zip(records, windows)]
    return sorted(range(len(records)), key=lambda i: keys[i])


def encode_ecg_timeline(records: Sequence[EcgRecord], scheme: TimeWindowScheme, t_anchor: float,
                        ps: ParameterSet) -> HierEmbedding:
    """Per-subject reference path; :class:`EcgTimelineEncoder` is the batched one."""
    K = scheme.window_count
    d_rec = ps["fuse.W"].shape[1]
    win = [scheme.assign(scheme.delta(r.timestamp, t_anchor)) for r in records]
    order = record_order(records, win)
    fused = {}
    for i in order:
        r = records[i]
        fused[i] = fuse_ecg_record(encode_ecg_signal(r.signal, ps), encode_ecg_text(r.text_tokens,
                                   ps["text_emb"]), encode_ecg_features(r.features, ps), ps)
    rows = []
    for k in range(K):
        members = [i for i in order if win[i] == k]
        if members:
            rows.append(mean_pool(stack([fused[i] for i in members], axis=0)))
        else:
            rows.append(Tensor(np.zeros(d_rec)))
    micro = stack(rows, axis=0)
    tokens, macro = _lf(reshape(micro, (1, K, d_rec)), ps)
    return HierEmbedding(micro, reshape(macro, (-1,)), reshape(tokens, tokens.shape[1:]))


@dataclass
class PreparedEcg:
    signals: np.ndarray  # (R, leads, L), canonical order
    features: np.ndarray
    text: list[tuple[int, ...]]
    windows: np.ndarray


class EcgTimelineEncoder:
    """Batched ECG timeline encoder; tokens are the low-frequency sequence."""

    kind = "ecg"

    def __init__(self, scheme: TimeWindowScheme, n_features: int, seed: int = 0,
                 vocab: int = TEXT_VOCAB, **sizes):
        self.scheme = scheme
        self.n_features = n_features
        self.vocab = vocab
        self.params = ParameterSet(seed)
        init_ecg_params(self.params, n_features, vocab=vocab, **sizes)

    @property
    def n_tokens(self) -> int:
        return self.scheme.window_count

    @property
    def width(self) -> int:
        return self.params["lf.0.conv1.W"].shape[0]

    def prepare(self, records: Sequence[EcgRecord], t_anchor: float) -> PreparedEcg:
        win = [self.scheme.assign(self.scheme.delta(r.timestamp, t_anchor)) for r in records]
        order = record_order(records, win)
        leads = self.params["stem.W"].shape[1]
        if not order:
            return PreparedEcg(np.zeros((0, leads, SIGNAL_SHAPE[1])),
                               np.zeros((0, self.n_features)), [], np.zeros(0, dtype=np.int64))
        return PreparedEcg(np.stack([records[i].signal for i in order]),
                           np.stack([records[i].features for i in order]),
                           [tuple(sorted(records[i].text_tokens)) for i in order],
                           np.array([win[i] for i in order], dtype=np.int64))

    def collate(self, items: Sequence[PreparedEcg]) -> dict:
        B, K = len(items), self.n_tokens
        counts = [len(p.windows) for p in items]
        R = max(1, max(counts))
        total = sum(counts)
        pool = np.zeros((B, K, R))
        flat_index = np.zeros((B, R), dtype=np.int64)
        pos = 0
        for b, p in enumerate(items):
            n = len(p.windows)
            for k in range(K):
                m = p.windows == k
                if m.any():
                    pool[b, k, :n][m] = 1.0 / m.sum()
            flat_index[b, :n] = np.arange(pos, pos + n)
            pos += n
        # padding slots point at a zero row appended after the real records
        for b, n in enumerate(counts):
            flat_index[b, n:] = total
        text = [t for p in items for t in p.text]
        L = max([1] + [len(t) for t in text])
        tid = np.zeros((total, L), dtype=np.int64)
        tw = np.zeros((total, 1, L))
        for r, t in enumerate(text):
            tid[r, :len(t)] = t
            if t:
                tw[r, 0, :len(t)] = 1.0 / len(t)
        sig = [p.signals for p in items if len(p.windows)]
        feat = [p.features for p in items if len(p.windows)]
        return {
            "signals": np.concatenate(sig) if sig else None,
            "features": np.concatenate(feat) if feat else None,
            "text_ids": tid, "text_weights": tw,
            "flat_index": flat_index, "pool": pool,
        }

    def record_embeddings(self, batch: dict) -> Tensor | None:
        if batch["signals"] is None:
            return None
        ps = self.params
        s = _signal_batch(Tensor(batch["signals"]), ps)
        t = reshape(matmul(Tensor(batch["text_weights"]),
                           embedding_lookup(ps["text_emb"], batch["text_ids"])), (len(s), -1))
        f = encode_ecg_features(Tensor(batch["features"]), ps)
        return fuse_ecg_record(s, t, f, ps)

    def window_embeddings(self, batch: dict) -> Tensor:
        rec = self.record_embeddings(batch)
        B, K, R = batch["pool"].shape
        d_rec = self.params["fuse.W"].shape[1]
        if rec is None:
            return Tensor(np.zeros((B, K, d_rec)))
        padded = concat([rec, Tensor(np.zeros((1, d_rec)))], axis=0)
        per = getitem(padded, batch["flat_index"])  # (B, R, d_rec)
        return matmul(Tensor(batch["pool"]), per)

    def forward(self, batch: dict, with_summary: bool = False):
        tokens, macro = _lf(self.window_embeddings(batch), self.params)
        return (tokens, macro) if with_summary else tokens


# ------------------------------------------------------------------ vitals


def upsample_vitals(grid: VitalsGrid, resolution: float = RESOLUTION) -> VitalsGrid:
    """Hourly grid -> ``resolution``-minute grid over the same horizon.

    Between two observed points: linear; beyond the first/last observed point:
    nearest observed value; never observed: zero.
    """
    t0 = grid.times[0] if len(grid.times) else 0.0
    n = int(round(grid.horizon / resolution))
    fine = t0 + resolution * np.arange(n)
    out = np.zeros((len(grid.items), n))
    for i in range(len(grid.items)):
        m = grid.mask[i]
        if m.any():
            out[i] = np.interp(fine, grid.times[m], grid.values[i, m])
    return VitalsGrid(grid.items, fine, out, np.ones_like(out, dtype=bool))


@dataclass(frozen=True)
class VitalsStats:
    items: tuple[str, ...]
    mean: tuple[float, ...]
    std: tuple[float, ...]
    fitted_on: str = ""


def fit_vitals_stats(grids: Sequence[VitalsGrid], scope: TrainingScope | None = None,
                     subject_ids: Sequence[str] | None = None) -> VitalsStats:
    """Per-item mean/std over the observed (pre-upsampling) training values."""
    if not grids:
        raise ConfigError("no grids to fit vitals statistics on")
    fitted_on = ""
    if scope is not None:
        if subject_ids is None:
            raise LeakageError("scoped stats fit needs subject ids")
        scope.admit(subject_ids)
        fitted_on = scope.fingerprint
    items = grids[0].items
    mu, sd = [], []
    for i in range(len(items)):
        vals = np.concatenate([g.values[i, g.mask[i]] for g in grids])
        mu.append(float(vals.mean()) if vals.size else 0.0)
        sd.append(float(vals.std()) if vals.size else 1.0)
    return VitalsStats(items, tuple(mu), tuple(sd), fitted_on)


def normalize_vitals(grid: VitalsGrid, stats: VitalsStats) -> VitalsGrid:
    lookup = dict(zip(stats.items, zip(stats.mean, stats.std)))
    missing = [it for it in grid.items if it not in lookup]
    if missing:
        raise ConfigError(f"no training statistics for vital item(s) {missing}")
    mu = np.array([lookup[it][0] for it in grid.items])[:, None]
    sd = np.maximum(np.array([lookup[it][1] for it in grid.items]), 1e-6)[:, None]
    return VitalsGrid(grid.items, grid.times, (grid.values - mu) / sd, grid.mask.copy())


def _window_slices(grid: VitalsGrid, cfg: SlidingWindowConfig) -> list[slice]:
    n = cfg.count(grid.horizon)
    step = grid.times[1] - grid.times[0] if len(grid.times) > 1 else RESOLUTION
    width = int(round(cfg.W / step))
    starts = [int(round((cfg.t_0 + k * cfg.S - grid.times[0]) / step)) for k in range(n)]
    return [slice(a, a + width) for a in starts]


def slice_windows(grid: VitalsGrid, cfg: SlidingWindowConfig) -> list[np.ndarray]:
    """Window k holds grid points with t in [t_0 + kS, t_0 + kS + W)."""
    return [grid.values[:, s].copy() for s in _window_slices(grid, cfg)]


def init_vitals_params(ps: ParameterSet, n_items: int, d_a: int = 4, c_hf: int = 16,
                       c_lf: int = 16, k: int = 3, k_lf: int = 3, n_blocks: int = 2):
    ps.add("lift.A", ps.rng.standard_normal((n_items, d_a)))
    ps.add("lift.c", np.zeros((n_items, d_a)))
    for w in ("Wq", "Wk", "Wv"):
        init_linear(ps, f"attn.{w}", d_a, d_a, bias=False)
    for i in range(n_blocks):
        init_residual_block(ps, f"hf.{i}", n_items * d_a if i == 0 else c_hf, c_hf, k)
    for i in range(n_blocks):
        init_residual_block(ps, f"lf.{i}", c_hf if i == 0 else c_lf, c_lf, k_lf)


def _item_attention(x: Tensor, ps: ParameterSet, return_weights: bool = False):
    """x: (..., items) -> attention over items at every time point, (..., items, d_a)."""
    A = ps["lift.A"]
    I = x.shape[-1]
    if A.shape[0] != I:
        raise DimensionError(f"vitals encoder configured for {A.shape[0]} items, got {I}")
    h = reshape(x, x.shape + (1,)) * A + ps["lift.c"]
    q, kk, v = (matmul(h, ps[f"attn.{w}.W"]) for w in ("Wq", "Wk", "Wv"))
    return scaled_dot_attention(q, kk, v, return_weights=return_weights)


def _vitals_tail(att: Tensor, ps: ParameterSet):
    """(B, n, P, items, d_a) attended windows -> (micro, tokens, macro)."""
    B, n, P, I, d_a = att.shape
    ch = reshape(transpose(att, (0, 1, 3, 4, 2)), (B * n, I * d_a, P))
    nb = sum(1 for k in ps.names() if k.startswith("hf.") and k.endswith(".conv1.W"))
    micro = reshape(global_avg_pool(residual_stack(ch, ps, "hf", nb)), (B, n, -1))
    tokens, macro = _lf(micro, ps)
    return micro, tokens, macro


def _vitals_forward(x: np.ndarray | Tensor, ps: ParameterSet, return_weights: bool = False):
    """x: (B, n_win, items, P) -> (micro (B, n, c_hf), tokens, macro[, attention weights])."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))
    att, w = _item_attention(transpose(x, (0, 1, 3, 2)), ps, return_weights=True)
    micro, tokens, macro = _vitals_tail(att, ps)
    if return_weights:
        return micro, tokens, macro, w
    return micro, tokens, macro


def _vitals_forward_grid(x: np.ndarray, windows: Sequence[slice], ps: ParameterSet):
    """x: (B, items, T) full grids.  Attention is per time point, so it runs once on
    the grid and overlapping windows are cut from its output afterwards."""
    att = _item_attention(transpose(Tensor(np.asarray(x, dtype=float)), (0, 2, 1)), ps)
    return _vitals_tail(stack([att[:, s] for s in windows], axis=1), ps)


def encode_vitals(windows: Sequence[np.ndarray], ps: ParameterSet,
                  return_weights: bool = False):
    if len(windows) == 0:
        raise ContractError("encode_vitals needs at least one window")
    x = np.stack([np.asarray(w, dtype=float) for w in windows])[None]
    micro, tokens, macro, w = _vitals_forward(x, ps, return_weights=True)
    emb = HierEmbedding(reshape(micro, micro.shape[1:]), reshape(macro, (-1,)),
                        reshape(tokens, tokens.shape[1:]))
    return (emb, w.data[0]) if return_weights else emb


class VitalsEncoder:
    """Batched vitals encoder; tokens are the low-frequency window sequence."""

    kind = "vitals"

    def __init__(self, stats: VitalsStats, cfg: SlidingWindowConfig = SlidingWindowConfig(),
                 horizon: float = 1440.0, seed: int = 0, **sizes):
        self.stats = stats
        self.cfg = cfg
        self.horizon = horizon
        self.params = ParameterSet(seed)
        fine = cfg.t_0 + RESOLUTION * np.arange(int(round(horizon / RESOLUTION)))
        self._slices = _window_slices(VitalsGrid((), fine, np.zeros((0, fine.size)),
                                                 np.zeros((0, fine.size), dtype=bool)), cfg)
        init_vitals_params(self.params, len(stats.items), **sizes)

    @property
    def n_tokens(self) -> int:
        return self.cfg.count(self.horizon)

    @property
    def width(self) -> int:
        return self.params["lf.0.conv1.W"].shape[0]

    def prepare(self, grid: VitalsGrid) -> np.ndarray:
        """Normalised fine grid (items, T); windows are cut inside ``forward``."""
        g = normalize_vitals(upsample_vitals(grid), self.stats)
        if _window_slices(g, self.cfg) != self._slices:
            raise DimensionError(f"vitals grid does not span the encoder's {self.horizon}-minute "
                                 f"horizon from t_0={self.cfg.t_0}")
        return g.values

    def collate(self, items: Sequence[np.ndarray]) -> dict:
        return {"x": np.stack(items)}

    def forward(self, batch: dict, with_summary: bool = False):
        _, tokens, macro = _vitals_forward_grid(batch["x"], self._slices, self.params)
        return (tokens, macro) if with_summary else tokens
