"""Single-layer LSTM with a sigmoid readout, trained by BPTT and Adam.

Gate pre-activations use split weights: for gate ``g`` in ``GATES``,
``z_g = Wx[g] @ x_t + Wh[g] @ h_{t-1} + b[g]``, which is the concatenated
``W_g [h_{t-1}, x_t] + b_g`` form written with its two blocks separated.

Every contraction is accumulated term by term in a fixed order, so the score
of a window never depends on which other windows share its batch.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any

import numpy as np

from .errors import DataError, NumericError
from .rng import make_rng

GATES = ("f", "i", "o", "c")
FORMAT_VERSION = 1
PROB_EPS = 1e-7


def sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-free stable form; tanh keeps large |x| finite
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class LstmParams:
    """Trainable weights.

    ``Wx``: (4, U, n) input weights, ``Wh``: (4, U, U) recurrent weights,
    ``b``: (4, U) gate biases, indexed by ``GATES``. ``v`` (U,) and ``v0``
    (scalar, stored as shape (1,)) map the last hidden state to a logit.
    """

    Wx: np.ndarray
    Wh: np.ndarray
    b: np.ndarray
    v: np.ndarray
    v0: np.ndarray

    NAMES = ("Wx", "Wh", "b", "v", "v0")

    @property
    def n_features(self) -> int:
        return self.Wx.shape[2]

    @property
    def units(self) -> int:
        return self.Wx.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, k) for k in self.NAMES]

    def copy(self) -> LstmParams:
        return LstmParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> LstmParams:
        return LstmParams(*(np.zeros_like(a) for a in self.arrays()))

    def validate(self) -> None:
        U, n = self.units, self.n_features
        shapes = {"Wx": (4, U, n), "Wh": (4, U, U), "b": (4, U), "v": (U,), "v0": (1,)}
        for name, shape in shapes.items():
            a = getattr(self, name)
            if a.shape != shape:
                raise DataError(f"parameter {name} has shape {a.shape}, expected {shape}")
            if not np.all(np.isfinite(a)):
                raise NumericError(f"parameter {name} contains non-finite values")

    def equals(self, other: LstmParams) -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


Gradients = LstmParams


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, units: int, batch: tuple[int, ...] = ()) -> LstmState:
        return cls(np.zeros(batch + (units,)), np.zeros(batch + (units,)))


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


def init_params(n_features: int, units: int, seed: int) -> LstmParams:
    """Glorot-uniform input and readout weights, orthogonal recurrent blocks.

    Biases start at zero except the forget gate, which starts at one. The
    Glorot limit treats the four gates' input weights as one (n, 4U) kernel.
    """
    if n_features < 1 or units < 1:
        raise DataError("n_features and units must be >= 1")
    rng = make_rng(seed, "tinylstm/init")
    limit = math.sqrt(6.0 / (n_features + 4 * units))
    Wx = rng.uniform(-limit, limit, size=(4, units, n_features))
    Wh = np.stack([_orthogonal(rng, units) for _ in GATES])
    b = np.zeros((4, units))
    b[GATES.index("f")] = 1.0
    out_limit = math.sqrt(6.0 / (units + 1))
    v = rng.uniform(-out_limit, out_limit, size=units)
    return LstmParams(Wx, Wh, b, v, np.zeros(1))


def _affine(x: np.ndarray, W: np.ndarray, acc: np.ndarray) -> np.ndarray:
    """acc + x @ W.T accumulated over the contracted axis in a fixed order.

    x: (B, k), W: (m, k), acc: (B, m).
    """
    out = acc.copy()
    for j in range(W.shape[1]):
        out += x[:, j : j + 1] * W[:, j]
    return out


def _gate_preact(params: LstmParams, x: np.ndarray, h: np.ndarray) -> np.ndarray:
    U = params.units
    z = np.broadcast_to(params.b.reshape(4 * U), (x.shape[0], 4 * U))
    z = _affine(x, params.Wx.reshape(4 * U, -1), z)
    return _affine(h, params.Wh.reshape(4 * U, U), z)


def cell_step(params: LstmParams, x: np.ndarray, state: LstmState) -> LstmState:
    """One LSTM update for a single vector ``x`` (n,) or a batch (B, n)."""
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any() or np.isnan(state.h).any() or np.isnan(state.c).any():
        raise NumericError("NaN in cell_step input")
    single = x.ndim == 1
    xb = x[None] if single else x
    hb = state.h[None] if single else state.h
    cb = state.c[None] if single else state.c
    if xb.shape[1] != params.n_features:
        raise DataError(f"input has {xb.shape[1]} features, model expects {params.n_features}")
    U = params.units
    z = _gate_preact(params, xb, hb)
    f = sigmoid(z[:, :U])
    i = sigmoid(z[:, U : 2 * U])
    o = sigmoid(z[:, 2 * U : 3 * U])
    g = np.tanh(z[:, 3 * U :])
    c = f * cb + i * g
    h = o * np.tanh(c)
    return LstmState(h[0], c[0]) if single else LstmState(h, c)


@dataclass
class ForwardCache:
    windows: np.ndarray
    hs: list = field(default_factory=list)
    cs: list = field(default_factory=list)
    gates: list = field(default_factory=list)
    probs: np.ndarray | None = None


def forward_batch(params: LstmParams, windows: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Score windows of shape (B, w, n); returns probabilities (B,) and cache."""
    X = np.asarray(windows, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != params.n_features:
        raise DataError(
            f"windows of shape {X.shape} do not match model with {params.n_features} features"
        )
    B, w, _ = X.shape
    U = params.units
    h = np.zeros((B, U))
    c = np.zeros((B, U))
    cache = ForwardCache(X, [h], [c])
    for t in range(w):
        z = _gate_preact(params, X[:, t], h)
        f = sigmoid(z[:, :U])
        i = sigmoid(z[:, U : 2 * U])
        o = sigmoid(z[:, 2 * U : 3 * U])
        g = np.tanh(z[:, 3 * U :])
        c = f * c + i * g
        h = o * np.tanh(c)
        cache.hs.append(h)
        cache.cs.append(c)
        cache.gates.append((f, i, o, g))
    logit = _affine(h, params.v[None], np.broadcast_to(params.v0, (B, 1)))[:, 0]
    p = sigmoid(logit)
    cache.probs = p
    return p, cache


def forward(params: LstmParams, window: np.ndarray) -> tuple[float, ForwardCache]:
    """Score a single (w, n) window."""
    W = np.asarray(window, dtype=np.float64)
    if W.ndim != 2:
        raise DataError(f"window must be 2-D (w, n), got shape {W.shape}")
    p, cache = forward_batch(params, W[None])
    return float(p[0]), cache


def predict_proba(params: LstmParams, windows: np.ndarray, batch_size: int = 4096) -> np.ndarray:
    out = np.empty(len(windows))
    for s in range(0, len(windows), batch_size):
        out[s : s + batch_size] = forward_batch(params, windows[s : s + batch_size])[0]
    return out


def bce_loss(p, y):
    """Binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    loss = -(y * np.log(pc) + (1 - y) * np.log(1.0 - pc))
    return float(loss) if np.ndim(loss) == 0 else loss


def backward(
    params: LstmParams, targets: np.ndarray, cache: ForwardCache
) -> tuple[float, Gradients]:
    """Mean BCE over the cached batch and its exact gradients (full BPTT)."""
    y = np.asarray(targets, dtype=np.float64)
    if cache.probs is None or len(y) != len(cache.probs):
        raise DataError("forward cache does not match this batch")
    B = len(y)
    if B == 0:
        raise DataError("backward on an empty batch")
    U = params.units
    p = cache.probs
    loss = float(np.mean(bce_loss(p, y)))
    inside = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    dlogit = np.where(inside, p - y, 0.0) / B

    grads = params.zeros_like()
    h_last = cache.hs[-1]
    grads.v[:] = (h_last * dlogit[:, None]).sum(axis=0)
    grads.v0[0] = dlogit.sum()
    dh = dlogit[:, None] * params.v[None]
    dc = np.zeros((B, U))
    Wx = params.Wx.reshape(4 * U, -1)
    Wh = params.Wh.reshape(4 * U, U)
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros(4 * U)
    for t in range(len(cache.gates) - 1, -1, -1):
        f, i, o, g = cache.gates[t]
        c, c_prev, h_prev = cache.cs[t + 1], cache.cs[t], cache.hs[t]
        tc = np.tanh(c)
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                dc * c_prev * f * (1.0 - f),
                dc * g * i * (1.0 - i),
                do * o * (1.0 - o),
                dc * i * (1.0 - g * g),
            ],
            axis=1,
        )
        dc = dc * f
        dWx += dz.T @ cache.windows[:, t]
        dWh += dz.T @ h_prev
        db += dz.sum(axis=0)
        dh = dz @ Wh
    grads.Wx[:] = dWx.reshape(4, U, -1)
    grads.Wh[:] = dWh.reshape(4, U, U)
    grads.b[:] = db.reshape(4, U)
    return loss, grads


@dataclass
class OptimizerState:
    m: LstmParams
    v: LstmParams
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7

    @classmethod
    def fresh(cls, params: LstmParams, lr: float = 1e-3, **kw: float) -> OptimizerState:
        return cls(params.zeros_like(), params.zeros_like(), 0, lr, **kw)


def adam_step(
    params: LstmParams, grads: Gradients, opt: OptimizerState
) -> tuple[LstmParams, OptimizerState]:
    """One bias-corrected Adam update; returns new params and state."""
    for g in grads.arrays():
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
    t = opt.step + 1
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), opt.m.arrays(), opt.v.arrays()):
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * g * g
        new_p.append(p - opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps))
        new_m.append(m)
        new_v.append(v)
    state = OptimizerState(
        LstmParams(*new_m), LstmParams(*new_v), t, opt.lr, opt.beta1, opt.beta2, opt.eps
    )
    return LstmParams(*new_p), state


def classify(p, tau: float):
    """1 where p > tau (strict)."""
    if not 0.0 <= tau <= 1.0:
        raise DataError(f"threshold must be in [0, 1], got {tau}")
    out = (np.asarray(p) > tau).astype(np.int8)
    return int(out) if out.ndim == 0 else out


# --- serialization -----------------------------------------------------


def _dump_array(a: np.ndarray) -> list:
    # json writes floats with repr(), the shortest round-trip form
    return a.tolist()


def save_model(
    params: LstmParams,
    scaler: Any,
    features: Any,
    cfg: dict,
    *,
    optimizer: OptimizerState | None = None,
    extra: dict | None = None,
) -> bytes:
    """Serialize everything inference needs to a JSON document.

    ``scaler`` must provide ``to_dict()``; ``features`` may be a
    FeatureReport-like object with ``to_dict()`` and ``selected`` or a plain
    list of canonical names.
    """
    params.validate()
    feat_names = list(getattr(features, "selected", features))
    if len(feat_names) != params.n_features:
        raise DataError(
            f"{len(feat_names)} feature names for a model with {params.n_features} inputs"
        )
    doc = {
        "format_version": FORMAT_VERSION,
        "created": (extra or {}).get("created")
        or datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
        "dims": {"n_features": params.n_features, "units": params.units},
        "gate_order": list(GATES),
        "weights": {k: _dump_array(getattr(params, k)) for k in LstmParams.NAMES},
        "optimizer_defaults": {
            "name": "adam",
            "lr": (cfg.get("train_config") or {}).get("lr", 1e-3),
            "beta1": 0.9,
            "beta2": 0.999,
            "eps": 1e-7,
        },
        "scaler": scaler.to_dict(),
        "features": features.to_dict() if hasattr(features, "to_dict") else {"selected": feat_names},
        "feature_names": feat_names,
        "rule_config": cfg.get("rule_config"),
        "train_config": cfg.get("train_config"),
        "seeds": cfg.get("seeds", {}),
        "provenance": cfg.get("provenance", {}),
    }
    if optimizer is not None:
        doc["optimizer_state"] = {
            "step": optimizer.step,
            "lr": optimizer.lr,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "m": {k: _dump_array(getattr(optimizer.m, k)) for k in LstmParams.NAMES},
            "v": {k: _dump_array(getattr(optimizer.v, k)) for k in LstmParams.NAMES},
        }
    for k, val in (extra or {}).items():
        doc.setdefault(k, val)
    return json.dumps(doc, allow_nan=False).encode("utf-8")


@dataclass
class ModelArtifact:
    params: LstmParams
    scaler: Any
    feature_names: list[str]
    doc: dict
    optimizer: OptimizerState | None = None

    @property
    def window(self) -> int:
        return int(self.doc["train_config"]["w"])

    @property
    def tau(self) -> float:
        return float(self.doc["train_config"]["tau"])


def _params_from(weights: dict, n: int, U: int) -> LstmParams:
    try:
        p = LstmParams(*(np.array(weights[k], dtype=np.float64) for k in LstmParams.NAMES))
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"malformed weights: {exc}") from exc
    if p.n_features != n or p.units != U:
        raise DataError(
            f"weights have dims (n={p.n_features}, U={p.units}) but header says (n={n}, U={U})"
        )
    try:
        p.validate()
    except NumericError as exc:
        raise DataError(f"model file holds invalid weights: {exc}") from exc
    return p


def load_model(blob: bytes | str) -> ModelArtifact:
    from .prep import ScalerParams

    try:
        doc = json.loads(blob)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"model file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataError("model document must be a JSON object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise DataError(
            f"unsupported model format_version {doc.get('format_version')!r}; expected {FORMAT_VERSION}"
        )
    try:
        n, U = int(doc["dims"]["n_features"]), int(doc["dims"]["units"])
        params = _params_from(doc["weights"], n, U)
        scaler = ScalerParams.from_dict(doc["scaler"])
        names = list(doc["feature_names"])
    except KeyError as exc:
        raise DataError(f"model document missing field {exc}") from exc
    if len(names) != n or scaler.mean.shape != (n,):
        raise DataError(f"model dims n={n} inconsistent with features/scaler")
    opt = None
    if "optimizer_state" in doc:
        o = doc["optimizer_state"]
        opt = OptimizerState(
            _params_from(o["m"], n, U), _params_from(o["v"], n, U),
            int(o["step"]), float(o["lr"]), float(o["beta1"]), float(o["beta2"]), float(o["eps"]),
        )
    return ModelArtifact(params, scaler, names, doc, opt)
