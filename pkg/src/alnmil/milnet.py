"""Attention-MIL network with an explicit backward pass.

Per bag of N instances::

    h_k    = featurize(x_k)                       (N, D)
    e_k    = w . tanh(V^T h_k)                    attention score
    a      = softmax(e)                           (N,)
    z      = sum_k a_k h_k                        (D,)
    logits = concat(z, clinical) @ W + b          (K,)

The featurizer is conv3x3(3->8) -> ReLU -> maxpool2 -> conv3x3(8->D) -> ReLU
-> global max-pool. With ``featurizer=False`` the instances are precomputed
feature vectors and no gradient flows into them.

Training runs in float64; functions keep the dtype of the model parameters so
the gradient check can re-evaluate the loss in extended precision. Max-pool
gradients go to the first maximum in row-major order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, MissingCacheError

CONV1_CHANNELS = 8
CHECKPOINT_SCHEMA = "alnmil.checkpoint/1"
FEATURES_SCHEMA = "alnmil.features/1"


@dataclass
class ModelConfig:
    feat_dim: int = 32
    attn_dim: int = 16
    clin_dim: int = 0
    n_classes: int = 2
    gated: bool = False
    featurizer: bool = True

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class MilModel:
    """Learnable parameters and their gradient buffers, keyed by name in a fixed order."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray], dtype=np.float64):
        self.config = config
        expected = param_shapes(config)
        if list(params) != list(expected):
            raise DimensionError(f"parameter names {list(params)} do not match {list(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.params = {k: np.ascontiguousarray(v, dtype=dtype) for k, v in params.items()}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    @property
    def dtype(self):
        return self.params["clf_W"].dtype

    def copy(self, dtype=None) -> "MilModel":
        return MilModel(self.config, {k: v.copy() for k, v in self.params.items()}, dtype or self.dtype)

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, l = cfg.feat_dim, cfg.attn_dim
    shapes = {}
    if cfg.featurizer:
        shapes["conv1_w"] = (CONV1_CHANNELS, 3, 3, 3)
        shapes["conv1_b"] = (CONV1_CHANNELS,)
        shapes["conv2_w"] = (d, CONV1_CHANNELS, 3, 3)
        shapes["conv2_b"] = (d,)
    shapes["attn_V"] = (d, l)
    if cfg.gated:
        shapes["attn_U"] = (d, l)
    shapes["attn_w"] = (l,)
    shapes["clf_W"] = (d + cfg.clin_dim, cfg.n_classes)
    shapes["clf_b"] = (cfg.n_classes,)
    return shapes


def init_model(config: ModelConfig | None = None, seed: int | np.random.Generator = 0, **kwargs) -> MilModel:
    """He-normal convolutions, Glorot-uniform dense layers, zero biases."""
    cfg = config or ModelConfig(**kwargs)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
        elif name.startswith("conv"):
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        else:
            fan_in = shape[0]
            fan_out = shape[1] if len(shape) > 1 else 1
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return MilModel(cfg, params)


# -- layers ------------------------------------------------------------------------

def conv3x3_forward(x, w, b):
    n, c, h, wd = x.shape
    f = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * 9)
    out = cols @ w.reshape(f, -1).T + b
    return out.reshape(n, h, wd, f).transpose(0, 3, 1, 2), (cols, x.shape)


def conv3x3_backward(dout, w, cache, need_dx=True):
    cols, (n, c, h, wd) = cache
    f = w.shape[0]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(f, -1)).reshape(n, h, wd, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, wd + 2), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + h, j:j + wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1], dw, db


def maxpool2_forward(x):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    win = (x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
           .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4))
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_backward(dout, cache):
    idx, (n, c, h, w) = cache
    h2, w2 = h // 2, w // 2
    dwin = np.zeros((n, c, h2, w2, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros((n, c, h, w), dtype=dout.dtype)
    dx[:, :, :2 * h2, :2 * w2] = (dwin.reshape(n, c, h2, w2, 2, 2)
                                  .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2))
    return dx


def global_maxpool_forward(x):
    n, d = x.shape[:2]
    flat = x.reshape(n, d, -1)
    idx = flat.argmax(axis=-1)
    return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0], (idx, x.shape)


def global_maxpool_backward(dout, cache):
    idx, shape = cache
    n, d = shape[:2]
    dflat = np.zeros((n, d, int(np.prod(shape[2:]))), dtype=dout.dtype)
    np.put_along_axis(dflat, idx[..., None], dout[..., None], axis=-1)
    return dflat.reshape(shape)


def softmax(e):
    e = np.asarray(e)
    ex = np.exp(e - e.max(axis=-1, keepdims=True))
    return ex / ex.sum(axis=-1, keepdims=True)


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


# -- featurizer --------------------------------------------------------------------

def featurize(model: MilModel, x: np.ndarray):
    """Map a (N, 3, S, S) instance stack to (N, D) features; returns (h, cache)."""
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] < 2 or x.shape[3] < 2:
        raise DimensionError(f"featurizer expects (N, 3, S, S) input, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("featurizer input contains non-finite values")
    p = model.params
    pre1, c1 = conv3x3_forward(x, p["conv1_w"], p["conv1_b"])
    act1 = np.maximum(pre1, 0.0)
    pool1, cp = maxpool2_forward(act1)
    pre2, c2 = conv3x3_forward(pool1, p["conv2_w"], p["conv2_b"])
    act2 = np.maximum(pre2, 0.0)
    h, cg = global_maxpool_forward(act2)
    return h, (c1, pre1, cp, c2, pre2, cg)


def featurize_backward(model: MilModel, dh: np.ndarray, cache, need_dx: bool = False):
    c1, pre1, cp, c2, pre2, cg = cache
    p, g = model.params, model.grads
    dact2 = global_maxpool_backward(dh, cg)
    dpre2 = dact2 * (pre2 > 0)
    dpool1, dw2, db2 = conv3x3_backward(dpre2, p["conv2_w"], c2)
    g["conv2_w"] += dw2
    g["conv2_b"] += db2
    dact1 = maxpool2_backward(dpool1, cp)
    dpre1 = dact1 * (pre1 > 0)
    dx, dw1, db1 = conv3x3_backward(dpre1, p["conv1_w"], c1, need_dx=need_dx)
    g["conv1_w"] += dw1
    g["conv1_b"] += db1
    return dx


def featurize_precomputed(record, dim: int) -> np.ndarray:
    vec = np.asarray(record, dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] != dim:
        raise DimensionError(f"stored feature length {vec.shape} does not match model dimension {dim}")
    return vec


# -- attention / bag forward -------------------------------------------------------

def attention(model: MilModel, h: np.ndarray):
    """Attention weights over the N rows of ``h``; returns (a, cache)."""
    h = np.asarray(h, dtype=model.dtype)
    if h.ndim != 2 or h.shape[0] < 1:
        raise DimensionError(f"attention expects (N, D) with N >= 1, got {h.shape}")
    if not np.all(np.isfinite(h)):
        raise ValueError("instance features contain non-finite values")
    p = model.params
    t = np.tanh(h @ p["attn_V"])
    if model.config.gated:
        s = _sigmoid(h @ p["attn_U"])
        gate = t * s
    else:
        s = None
        gate = t
    e = gate @ p["attn_w"]
    a = softmax(e)
    return a, (t, s, gate, e)


@dataclass
class BagForward:
    h: np.ndarray
    a: np.ndarray
    z: np.ndarray
    fused: np.ndarray
    logits: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)


def forward(model: MilModel, instances: np.ndarray, clinical: np.ndarray | None = None) -> BagForward:
    cfg = model.config
    if cfg.featurizer:
        h, fcache = featurize(model, instances)
    else:
        h = np.asarray(instances, dtype=model.dtype)
        if h.ndim != 2 or h.shape[1] != cfg.feat_dim:
            raise DimensionError(f"precomputed instances must be (N, {cfg.feat_dim}), got {h.shape}")
        fcache = None
    if clinical is None or cfg.clin_dim == 0:
        clinical = np.zeros(0, dtype=model.dtype)
    else:
        clinical = np.asarray(clinical, dtype=model.dtype)
    if clinical.shape != (cfg.clin_dim,):
        raise DimensionError(f"clinical vector length {clinical.shape[0]} does not match model ({cfg.clin_dim})")
    if h.shape[1] != cfg.feat_dim:
        raise DimensionError(f"feature dimension {h.shape[1]} does not match model ({cfg.feat_dim})")
    a, acache = attention(model, h)
    z = a @ h
    fused = np.concatenate([z, clinical])
    logits = fused @ model.params["clf_W"] + model.params["clf_b"]
    return BagForward(h, a, z, fused, logits, {"featurizer": fcache, "attention": acache})


def backward(model: MilModel, fwd: BagForward, dlogits: np.ndarray, need_dx: bool = False):
    """Accumulate dLoss/dparam into ``model.grads`` given dLoss/dlogits.

    Returns the gradient w.r.t. the instance inputs when ``need_dx`` is set
    (w.r.t. the feature rows for precomputed-feature models), else None.
    """
    if not fwd.cache or "attention" not in fwd.cache:
        raise MissingCacheError("backward called without a forward cache")
    p, g = model.params, model.grads
    cfg = model.config
    dlogits = np.asarray(dlogits, dtype=model.dtype)
    d = cfg.feat_dim

    g["clf_W"] += np.outer(fwd.fused, dlogits)
    g["clf_b"] += dlogits
    dz = p["clf_W"][:d] @ dlogits

    h, a = fwd.h, fwd.a
    t, s, gate, _ = fwd.cache["attention"]
    da = h @ dz
    dh = np.outer(a, dz)
    de = a * (da - a @ da)
    g["attn_w"] += gate.T @ de
    dgate = np.outer(de, p["attn_w"])
    if cfg.gated:
        dt = dgate * s
        dpre_u = dgate * t * s * (1.0 - s)
        g["attn_U"] += h.T @ dpre_u
        dh += dpre_u @ p["attn_U"].T
    else:
        dt = dgate
    dpre_v = dt * (1.0 - t * t)
    g["attn_V"] += h.T @ dpre_v
    dh += dpre_v @ p["attn_V"].T

    if cfg.featurizer:
        return featurize_backward(model, dh, fwd.cache["featurizer"], need_dx=need_dx)
    return dh if need_dx else None


def predict_proba(model: MilModel, instances, clinical=None) -> np.ndarray:
    return softmax(forward(model, instances, clinical).logits)


# -- gradient check ----------------------------------------------------------------

def softmax_xent(logits, label: int):
    """Softmax cross-entropy computed in the dtype of ``logits``."""
    shifted = logits - logits.max()
    return np.log(np.exp(shifted).sum()) - shifted[label]


def _activation_pattern(fwd: BagForward):
    """Discrete state of the piecewise-linear featurizer (ReLU masks and pooling winners)."""
    cache = fwd.cache["featurizer"]
    if cache is None:
        return ()
    _, pre1, (idx1, _), _, pre2, (idxg, _) = cache
    return (pre1 > 0, idx1, pre2 > 0, idxg)


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check_detail(model: MilModel, instances, clinical, label, eps: float = 1e-5, params=None,
                      precision: str = "extended", skip_kinks: bool = False) -> dict:
    """Compare backward() with central differences of the bag loss, entry by entry.

    Relative error per entry is |g_a - g_n| / (|g_a| + |g_n| + 1e-12).
    Difference quotients are evaluated in ``np.longdouble`` by default: in
    float64 the loss round-off (~1e-15) divided by 2*eps swamps gradients
    below ~1e-4. With ``skip_kinks`` an entry whose +/-eps evaluations change
    a ReLU sign or a max-pool winner is left out of ``max_rel_err`` and
    counted in ``kinks`` instead.
    """
    from .train import cross_entropy

    if eps <= 0:
        raise ValueError("eps must be positive")
    model.zero_grad()
    fwd = forward(model, instances, clinical)
    _, dlogits = cross_entropy(fwd.logits, label)
    backward(model, fwd, dlogits)

    probe = model.copy(np.longdouble if precision == "extended" else np.float64)
    base = _activation_pattern(forward(probe, instances, clinical))
    step = probe.dtype.type(eps)
    worst, worst_at, kinks, checked = 0.0, None, 0, 0
    for name in params or list(model.params):
        flat = probe.params[name].reshape(-1)
        ga = model.grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fup = forward(probe, instances, clinical)
            flat[i] = orig - step
            fdown = forward(probe, instances, clinical)
            flat[i] = orig
            if skip_kinks and not (_same_pattern(base, _activation_pattern(fup))
                                   and _same_pattern(base, _activation_pattern(fdown))):
                kinks += 1
                continue
            gn = float((softmax_xent(fup.logits, label) - softmax_xent(fdown.logits, label)) / (2 * step))
            err = abs(ga[i] - gn) / (abs(ga[i]) + abs(gn) + 1e-12)
            checked += 1
            if err > worst:
                worst, worst_at = err, (name, i, float(ga[i]), gn)
    return {"max_rel_err": worst, "worst": worst_at, "kinks": kinks, "checked": checked}


def grad_check(model: MilModel, instances, clinical, label, eps: float = 1e-5, params=None,
               precision: str = "extended", skip_kinks: bool = False) -> float:
    """Max relative error between backward() and central differences; see grad_check_detail."""
    return grad_check_detail(model, instances, clinical, label, eps, params, precision, skip_kinks)["max_rel_err"]


# -- file formats ------------------------------------------------------------------

def _write_framed(path, header: dict, blob: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        fh.write(blob)


def _read_framed(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}: malformed header") from exc
        return header, fh.read()


def save_checkpoint(path, model: MilModel, config_hash: str = "", meta: dict | None = None) -> None:
    """One-line JSON header, then every parameter as little-endian float64 in declared order."""
    header = {
        "schema": CHECKPOINT_SCHEMA,
        "dims": model.config.to_dict(),
        "config_hash": config_hash,
        "params": [[k, list(v.shape)] for k, v in model.params.items()],
    }
    if meta:
        header["meta"] = meta
    blob = b"".join(v.astype("<f8").tobytes() for v in model.params.values())
    _write_framed(path, header, blob)


def load_checkpoint(path) -> tuple[MilModel, dict]:
    header, blob = _read_framed(path)
    if header.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"{path}: not a model checkpoint")
    cfg = ModelConfig(**header["dims"])
    expected = param_shapes(cfg)
    declared = {k: tuple(s) for k, s in header["params"]}
    if declared != expected:
        raise DimensionError(f"{path}: parameter shapes {declared} inconsistent with dims {expected}")
    values = np.frombuffer(blob, dtype="<f8")
    total = sum(int(np.prod(s)) for s in expected.values())
    if values.size != total:
        raise DimensionError(f"{path}: blob holds {values.size} values, expected {total}")
    params, offset = {}, 0
    for name, shape in expected.items():
        size = int(np.prod(shape))
        params[name] = values[offset:offset + size].reshape(shape).astype(np.float64)
        offset += size
    return MilModel(cfg, params), header


def write_features(path, features: np.ndarray) -> None:
    """Precomputed instance features: JSON header {count, dim}, then float32 rows."""
    features = np.asarray(features)
    if features.ndim != 2:
        raise DimensionError("features must be a (count, dim) matrix")
    header = {"schema": FEATURES_SCHEMA, "count": features.shape[0], "dim": features.shape[1]}
    _write_framed(path, header, features.astype("<f4").tobytes())


def read_features(path, dim: int | None = None) -> np.ndarray:
    header, blob = _read_framed(path)
    count, fdim = int(header["count"]), int(header["dim"])
    values = np.frombuffer(blob, dtype="<f4")
    if values.size != count * fdim:
        raise DimensionError(f"{path}: blob holds {values.size} values, header says {count}x{fdim}")
    if dim is not None and fdim != dim:
        raise DimensionError(f"{path}: feature dimension {fdim} does not match model dimension {dim}")
    return values.reshape(count, fdim).astype(np.float64)
