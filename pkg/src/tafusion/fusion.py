"""Shared-space projection, pairwise bi-directional attention and task decoding.

Every modality encoder exposes a token sequence (B, g_i, d_i).  Tokens go
through a per-modality linear map into width d_s and then a shared linear
map; each modality is summarized by its token mean, each modality pair by
the sum of the two directed cross-attentions (each averaged over its query
rows).  The concatenation of all summaries feeds an MLP decoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, ParseError
from .numerics import ParameterSet, Tensor, concat, dense, log_softmax, mlp, scaled_dot_attention
from .numerics.params import init_linear, init_mlp
from .numerics.tensor import reshape

CLASSIFICATION = "classification"
REGRESSION = "regression"


@dataclass(frozen=True)
class Modality:
    id: str
    kind: str  # static | sparse | ecg | vitals
    d: int
    g: int

    def __post_init__(self):
        if self.g < 1 or self.d < 1:
            raise ConfigError(f"modality {self.id}: token count and width must be >= 1")


@dataclass
class ModalityEmbedding:
    modality: str
    tokens: Tensor  # (B, g, d_s)
    pooled: Tensor  # (B, d_s)
    present: np.ndarray


def fusion_width(n: int, d_s: int) -> int:
    return n * d_s + n * (n - 1) // 2 * d_s


# -------------------------------------------------------------- static MLP


class StaticEncoder:
    """MLP over a fixed-width vector, reshaped into ``g`` tokens."""

    kind = "static"

    def __init__(self, n_in: int, g: int = 4, d: int = 8, hidden: int = 32, seed: int = 0):
        self.n_in, self.g, self.d = n_in, g, d
        self.params = ParameterSet(seed)
        init_mlp(self.params, "mlp", [n_in, hidden, g * d])

    @property
    def n_tokens(self) -> int:
        return self.g

    @property
    def width(self) -> int:
        return self.d

    def prepare(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_in,):
            raise DimensionError(f"static input must have width {self.n_in}, got {x.shape}")
        return x

    def collate(self, items: Sequence[np.ndarray]) -> dict:
        return {"x": np.stack(items)}

    def forward(self, batch: dict) -> Tensor:
        y = mlp(Tensor(batch["x"]), self.params, "mlp", 2, final_relu=True)
        return reshape(y, (len(batch["x"]), self.g, self.d))


# ---------------------------------------------------------- building blocks


def project_shared(tokens: Tensor, ps: ParameterSet, modality: str, present=None,
                   use_shared: bool = True) -> ModalityEmbedding:
    """Per-modality projection, then the shared projection; absent rows use the missing token."""
    if f"proj.{modality}.W" not in ps:
        raise ConfigError(f"modality {modality!r} is not registered")
    W = ps[f"proj.{modality}.W"]
    if tokens.shape[-1] != W.shape[0]:
        raise DimensionError(f"modality {modality}: token width {tokens.shape[-1]} != {W.shape[0]}")
    B = tokens.shape[0]
    present = np.ones(B, dtype=bool) if present is None else np.asarray(present, dtype=bool)
    # always routed through the substitution so the missing token is part of every graph
    keep = present.astype(float)[:, None, None]
    tokens = tokens * keep + ps[f"missing.{modality}"] * (1.0 - keep)
    h = dense(tokens, ps, f"proj.{modality}")
    if use_shared:
        h = dense(h, ps, "shared")
    return ModalityEmbedding(modality, h, h.mean(axis=-2), present)


def cross_attention(q_tokens: Tensor, kv_tokens: Tensor) -> Tensor:
    return scaled_dot_attention(q_tokens, kv_tokens, kv_tokens).mean(axis=-2)


def bimodal_attention(e_i: ModalityEmbedding | Tensor, e_j: ModalityEmbedding | Tensor) -> Tensor:
    ti = e_i.tokens if isinstance(e_i, ModalityEmbedding) else e_i
    tj = e_j.tokens if isinstance(e_j, ModalityEmbedding) else e_j
    return cross_attention(ti, tj) + cross_attention(tj, ti)


def cross_modal_fuse(embeddings: Sequence[ModalityEmbedding], n_expected: int | None = None,
                     biattention: bool = True) -> Tensor:
    if n_expected is not None and len(embeddings) != n_expected:
        raise ContractError(f"expected {n_expected} modality embeddings, got {len(embeddings)}")
    parts = [e.pooled for e in embeddings]
    if biattention:
        parts += [bimodal_attention(a, b) for a, b in combinations(embeddings, 2)]
    return concat(parts, axis=-1)


def init_decoder(ps: ParameterSet, d_in: int, head: str, n_classes: int = 2, hidden: int = 32,
                 name: str = "decoder"):
    out = n_classes if head == CLASSIFICATION else 1
    init_mlp(ps, name, [d_in, hidden, out])


def decode_task(fused: Tensor, ps: ParameterSet, head: str, name: str = "decoder") -> Tensor:
    n = sum(1 for k in ps.names() if k.startswith(f"{name}.") and k.endswith(".W"))
    d_in = ps[f"{name}.0.W"].shape[0]
    if fused.shape[-1] != d_in:
        raise DimensionError(f"decoder expects width {d_in}, got {fused.shape[-1]}")
    y = mlp(fused, ps, name, n)
    if head == CLASSIFICATION:
        return log_softmax(y, axis=-1)
    return reshape(y, y.shape[:-1])


def nll_loss(logp: Tensor, y) -> Tensor:
    y = np.asarray(y, dtype=np.int64)
    pick = np.zeros(logp.shape)
    pick[np.arange(len(y)), y] = -1.0 / len(y)
    return (logp * pick).sum()


def mse_loss(pred: Tensor, y) -> Tensor:
    d = pred - np.asarray(y, dtype=float)
    return (d * d).mean()


def task_loss(out: Tensor, y, head: str) -> Tensor:
    return nll_loss(out, y) if head == CLASSIFICATION else mse_loss(out, y)


# ------------------------------------------------------------------- model


@dataclass
class FusionFlags:
    no_pretrain: bool = False
    no_biattention: bool = False
    no_shared: bool = False


class FusionModel:
    """Fusion head over precomputed or live encoder tokens.

    ``params`` holds only the fusion parameters (projections, missing tokens,
    shared map, decoder).  Encoders are kept separately so they can be frozen.
    """

    def __init__(self, modalities: Sequence[Modality], head: str, n_classes: int = 2,
                 d_s: int = 16, hidden: int = 32, flags: FusionFlags | None = None, seed: int = 0):
        ids = [m.id for m in modalities]
        if len(set(ids)) != len(ids) or not ids:
            raise ConfigError(f"modality ids must be unique and nonempty, got {ids}")
        if head not in (CLASSIFICATION, REGRESSION):
            raise ConfigError(f"unknown head {head!r}")
        self.modalities = list(modalities)
        self.head = head
        self.n_classes = n_classes
        self.d_s = d_s
        self.flags = flags or FusionFlags()
        self.params = ParameterSet(seed)
        for m in self.modalities:
            init_linear(self.params, f"proj.{m.id}", m.d, d_s)
            self.params.add(f"missing.{m.id}", 0.1 * self.params.rng.standard_normal((m.g, m.d)))
        if not self.flags.no_shared:
            init_linear(self.params, "shared", d_s, d_s)
        init_decoder(self.params, self.width, head, n_classes, hidden)

    @property
    def width(self) -> int:
        n = len(self.modalities)
        return n * self.d_s if self.flags.no_biattention else fusion_width(n, self.d_s)

    def embed(self, tokens: dict[str, Tensor], present: dict[str, np.ndarray]):
        out = []
        for m in self.modalities:
            if m.id not in tokens:
                raise ContractError(f"no tokens supplied for modality {m.id!r}")
            t = tokens[m.id]
            if t.shape[1:] != (m.g, m.d):
                raise DimensionError(f"modality {m.id}: tokens {t.shape[1:]} != {(m.g, m.d)}")
            out.append(project_shared(t, self.params, m.id, present.get(m.id),
                                      use_shared=not self.flags.no_shared))
        return out

    def fuse(self, tokens: dict[str, Tensor], present: dict[str, np.ndarray]) -> Tensor:
        return cross_modal_fuse(self.embed(tokens, present), len(self.modalities),
                                biattention=not self.flags.no_biattention)

    def forward(self, tokens: dict[str, Tensor], present: dict[str, np.ndarray]) -> Tensor:
        return decode_task(self.fuse(tokens, present), self.params, self.head)

    def manifest(self) -> str:
        lines = ["tafusion-bundle 1", f"head {self.head} {self.n_classes}", f"d_s {self.d_s}",
                 "flags " + " ".join(f"{k}={int(v)}" for k, v in vars(self.flags).items())]
        lines += [f"modality {m.id} {m.kind} {m.d} {m.g}" for m in self.modalities]
        return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> dict:
    lines = text.splitlines()
    if not lines or lines[0] != "tafusion-bundle 1":
        raise ParseError("line 1: not a model bundle manifest")
    out: dict = {"modalities": []}
    for no, line in enumerate(lines[1:], start=2):
        parts = line.split()
        try:
            if parts[0] == "head":
                out["head"], out["n_classes"] = parts[1], int(parts[2])
            elif parts[0] == "d_s":
                out["d_s"] = int(parts[1])
            elif parts[0] == "flags":
                out["flags"] = FusionFlags(**{k: bool(int(v)) for k, v in
                                              (p.split("=") for p in parts[1:])})
            elif parts[0] == "modality":
                out["modalities"].append(Modality(parts[1], parts[2], int(parts[3]), int(parts[4])))
            else:
                raise ParseError(f"line {no}: unknown entry {parts[0]!r}")
        except (IndexError, ValueError, TypeError) as e:
            raise ParseError(f"line {no}: {e}") from None
    return out


def save_bundle(path, model: FusionModel, encoders: dict, extra: dict[str, str] | None = None):
    """Write the fusion parameters, one file per encoder and a text manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "manifest.txt").write_text(model.manifest())
    proj = ParameterSet(model.params.seed)
    dec = ParameterSet(model.params.seed)
    for k, t in model.params.items():
        (dec if k.startswith("decoder.") else proj).add(k, t.data)
    proj.save(path / "shared.pset")
    dec.save(path / "decoder.pset")
    for mid, enc in encoders.items():
        enc.params.save(path / f"encoder.{mid}.pset")
    for name, text in (extra or {}).items():
        (path / name).write_text(text)


def load_bundle(path) -> tuple[FusionModel, dict[str, ParameterSet]]:
    path = Path(path)
    try:
        meta = parse_manifest((path / "manifest.txt").read_text())
    except FileNotFoundError:
        raise ConfigError(f"no model bundle at {path}") from None
    model = FusionModel(meta["modalities"], meta["head"], meta["n_classes"], meta["d_s"],
                        flags=meta["flags"])
    merged = None
    for name in ("shared.pset", "decoder.pset"):
        part = ParameterSet.load(path / name)
        merged = merged or ParameterSet(part.seed)
        for k, t in part.items():
            merged.add(k, t.data)
    # layer widths are read from parameter shapes, so the stored set is authoritative
    model.params = merged
    encs = {m.id: ParameterSet.load(path / f"encoder.{m.id}.pset") for m in meta["modalities"]}
    return model, encs


# ------------------------------------------------------------- pretraining


def _chunks(idx: np.ndarray, size: int = 256):
    for i in range(0, len(idx), size):
        yield idx[i:i + size]


def encoder_tokens(encoder, prepared: Sequence, idx) -> Tensor:
    return encoder.forward(encoder.collate([prepared[i] for i in idx]))


@dataclass
class PretrainResult:
    modality: str
    decoder: ParameterSet
    result: object  # TrainResult
    train_size: int


def unimodal_output(encoder, decoder: ParameterSet, prepared: Sequence, idx, head: str) -> Tensor:
    tok = encoder_tokens(encoder, prepared, idx)
    return decode_task(tok.mean(axis=1), decoder, head)


def predict_unimodal(encoder, decoder: ParameterSet, prepared: Sequence, idx, head: str) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    return np.concatenate([unimodal_output(encoder, decoder, prepared, c, head).data
                           for c in _chunks(idx)]) if len(idx) else np.zeros(0)


def pretrain_encoder(modality: str, encoder, prepared: Sequence, y, train_idx, val_idx,
                     head: str, cfg, n_classes: int = 2, hidden: int = 32, present=None):
    """Train encoder + a pooled MLP decoder on one modality; keeps the best-validation encoder.

    Only samples where the modality is present take part.  The returned
    decoder turns the pretrained encoder into a unimodal model.
    """
    from .errors import PretrainError
    from .evaluation.training import train_with_early_stopping

    y = np.asarray(y)
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx, dtype=np.int64)
    if present is not None:
        present = np.asarray(present, dtype=bool)
        train_idx, val_idx = train_idx[present[train_idx]], val_idx[present[val_idx]]
    if len(train_idx) == 0:
        raise PretrainError(f"modality {modality!r} has no training samples")
    if len(val_idx) == 0:
        raise PretrainError(f"modality {modality!r} has no validation samples")
    dec = ParameterSet(cfg.seed + 1)
    init_decoder(dec, encoder.width, head, n_classes, hidden)
    joint = ParameterSet.join({"enc.": encoder.params, "dec.": dec})

    def batch_loss(idx):
        return task_loss(unimodal_output(encoder, dec, prepared, idx, head), y[idx], head)

    def val_loss():
        out = predict_unimodal(encoder, dec, prepared, val_idx, head)
        return float(task_loss(Tensor(out), y[val_idx], head).data)

    res = train_with_early_stopping(joint, train_idx, batch_loss, val_loss, cfg, label=modality)
    return PretrainResult(modality, dec, res, len(train_idx))


def pretrain_encoders(encoders: dict, prepared: dict, y, train_idx, val_idx, head: str, cfg,
                      n_classes: int = 2, present: dict | None = None) -> dict[str, PretrainResult]:
    present = present or {}
    return {mid: pretrain_encoder(mid, enc, prepared[mid], y, train_idx, val_idx, head, cfg,
                                  n_classes, present=present.get(mid))
            for mid, enc in encoders.items()}


# ------------------------------------------------------------- full model


class MultimodalNet:
    """Encoders plus fusion head.

    With ``frozen`` encoders their tokens may be precomputed once and only
    the fusion parameters train; otherwise everything trains end to end.
    """

    def __init__(self, encoders: dict, fusion: FusionModel, frozen: bool = True):
        ids = [m.id for m in fusion.modalities]
        if list(encoders) != ids:
            raise ConfigError(f"encoders {list(encoders)} do not match modalities {ids}")
        self.encoders = encoders
        self.fusion = fusion
        self.frozen = frozen

    @property
    def trainable(self) -> ParameterSet:
        if self.frozen:
            return self.fusion.params
        parts = {"fusion.": self.fusion.params}
        parts.update({f"enc.{mid}.": e.params for mid, e in self.encoders.items()})
        return ParameterSet.join(parts)

    def tokens(self, prepared: dict, idx) -> dict[str, Tensor]:
        return {mid: encoder_tokens(enc, prepared[mid], idx) for mid, enc in self.encoders.items()}

    def precompute(self, prepared: dict, n: int) -> dict[str, np.ndarray]:
        idx = np.arange(n)
        return {mid: np.concatenate([encoder_tokens(enc, prepared[mid], c).data
                                     for c in _chunks(idx)])
                for mid, enc in self.encoders.items()}

    def forward(self, prepared: dict, present: dict, idx, cache: dict | None = None) -> Tensor:
        idx = np.asarray(idx, dtype=np.int64)
        if cache is not None:
            toks = {mid: Tensor(cache[mid][idx]) for mid in self.encoders}
        else:
            toks = self.tokens(prepared, idx)
        pres = {mid: np.asarray(p, dtype=bool)[idx] for mid, p in present.items()}
        return self.fusion.forward(toks, pres)

    def predict(self, prepared: dict, present: dict, idx, cache: dict | None = None) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        return np.concatenate([self.forward(prepared, present, c, cache).data
                               for c in _chunks(idx)])


def forward_full(net: MultimodalNet, prepared: dict, present: dict, idx) -> Tensor:
    return net.forward(prepared, present, idx)
