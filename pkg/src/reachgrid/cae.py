"""Contractive fully-convolutional autoencoder, numpy only, hand-written backprop.

Encoder: 3x3 stride-2 convolutions -> global average pool -> linear to d_R.
Decoder: linear -> reshape to the last encoder grid -> (nearest upsample to the
mirrored encoder size -> 3x3 conv) per layer -> sigmoid.

The contractive term is ``||J_f(x)||_F^2`` of the encoder, estimated per
example with one random unit direction ``u`` as ``D * ||J u||^2`` (``D`` is
the input size); for ``u`` uniform on the sphere its expectation is exactly
``||J||_F^2``. ``J u`` comes from a forward-mode pass: each encoder layer also
pushes a tangent through the linear part of itself, with activations frozen at
the primal point. Backprop through that tangent pass gives the penalty's
parameter gradient.
"""
from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .archive import ArchiveFormatError, read_manifest, write_manifest

log = logging.getLogger(__name__)

MAGIC = "CAE1"


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class CaeConfig:
    d_r: int = 16
    r: int = 12
    in_channels: int = 6
    conv_channels: tuple[int, ...] = (16, 32, 64)
    activation: str = "leaky"  # or "identity"
    output: str = "sigmoid"  # or "identity"
    slope: float = 0.1
    lambda_c: float = 0.1
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        if self.d_r < 1:
            raise ValueError("d_r must be >= 1")
        if self.lambda_c < 0:
            raise ValueError("lambda_c must be >= 0")
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if self.activation not in ("leaky", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output not in ("sigmoid", "identity"):
            raise ValueError(f"unknown output {self.output!r}")
        if not self.conv_channels:
            raise ValueError("need at least one conv layer")

    @property
    def side(self) -> int:
        return 2 * self.r + 1

    def grid_sizes(self) -> list[int]:
        """Spatial size before each conv and after the last one."""
        sizes = [self.side]
        for _ in self.conv_channels:
            sizes.append((sizes[-1] - 1) // 2 + 1)
        return sizes


# ---------------------------------------------------------------------------
# layers; every layer caches what backward needs from the last forward

class Layer:
    params: dict[str, np.ndarray] = {}
    grads: dict[str, np.ndarray] = {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    # tangent (Jacobian-vector) pass at the point of the last forward call
    def jvp(self, t):
        raise NotImplementedError

    def jvp_backward(self, g):
        raise NotImplementedError


def _im2col(x, s):
    n, c, h, w = x.shape
    ho, wo = (h - 1) // s + 1, (w - 1) // s + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * 9), ho, wo


def _col2im(dcols, shape, s, ho, wo):
    n, c, h, w = shape
    dcols = dcols.reshape(n, ho, wo, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, w + 2), dtype=dcols.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, :, ki:ki + s * (ho - 1) + 1:s, kj:kj + s * (wo - 1) + 1:s] += \
                dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:h + 1, 1:w + 1]


class Conv3x3(Layer):
    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator, dtype):
        bound = math.sqrt(6.0 / (cin * 9))
        self.params = {"w": rng.uniform(-bound, bound, (cout, cin, 3, 3)).astype(dtype),
                       "b": np.zeros(cout, dtype=dtype)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.stride = stride

    def _apply(self, x, bias: bool):
        cols, ho, wo = _im2col(x, self.stride)
        wm = self.params["w"].reshape(len(self.params["b"]), -1)
        out = cols @ wm.T
        if bias:
            out += self.params["b"]
        return out.reshape(x.shape[0], ho, wo, -1).transpose(0, 3, 1, 2), (x.shape, cols, ho, wo)

    def _back(self, g, cache, bias: bool):
        shape, cols, ho, wo = cache
        cout = g.shape[1]
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        self.grads["w"] += (gm.T @ cols).reshape(self.params["w"].shape)
        if bias:
            self.grads["b"] += gm.sum(axis=0)
        dcols = gm @ self.params["w"].reshape(cout, -1)
        return _col2im(dcols, shape, self.stride, ho, wo)

    def forward(self, x):
        out, self._cache = self._apply(x, True)
        return out

    def backward(self, g):
        return self._back(g, self._cache, True)

    def jvp(self, t):
        out, self._tcache = self._apply(t, False)
        return out

    def jvp_backward(self, g):
        return self._back(g, self._tcache, False)


class Linear(Layer):
    def __init__(self, nin: int, nout: int, rng: np.random.Generator, dtype):
        bound = math.sqrt(6.0 / nin)
        self.params = {"w": rng.uniform(-bound, bound, (nout, nin)).astype(dtype),
                       "b": np.zeros(nout, dtype=dtype)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, x):
        self._x = x
        return x @ self.params["w"].T + self.params["b"]

    def backward(self, g):
        self.grads["w"] += g.T @ self._x
        self.grads["b"] += g.sum(axis=0)
        return g @ self.params["w"]

    def jvp(self, t):
        self._t = t
        return t @ self.params["w"].T

    def jvp_backward(self, g):
        self.grads["w"] += g.T @ self._t
        return g @ self.params["w"]


class Leaky(Layer):
    def __init__(self, slope: float):
        self.slope = slope

    def forward(self, x):
        self._neg = x < 0
        return np.where(self._neg, x * self.slope, x)

    def backward(self, g):
        return np.where(self._neg, g * self.slope, g)

    jvp = backward
    jvp_backward = backward


class Identity(Layer):
    def forward(self, x):
        return x

    def backward(self, g):
        return g

    jvp = backward
    jvp_backward = backward


class Sigmoid(Layer):
    def forward(self, x):
        self._y = 0.5 * (1.0 + np.tanh(0.5 * x))
        return self._y

    def backward(self, g):
        return g * self._y * (1.0 - self._y)


class GlobalAvgPool(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, g):
        n, c, h, w = self._shape
        return np.broadcast_to((g / (h * w))[:, :, None, None], self._shape).copy()

    def jvp(self, t):
        return t.mean(axis=(2, 3))

    jvp_backward = backward


class Reshape(Layer):
    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, x):
        self._in = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, g):
        return g.reshape(self._in)


class Upsample(Layer):
    """Nearest-neighbour resize to a fixed square size."""

    def __init__(self, size_in: int, size_out: int):
        self.idx = (np.arange(size_out) * size_in) // size_out
        self.starts = np.flatnonzero(np.concatenate(([True], self.idx[1:] != self.idx[:-1])))

    def forward(self, x):
        return x[:, :, self.idx][:, :, :, self.idx]

    def backward(self, g):
        g = np.add.reduceat(g, self.starts, axis=2)
        return np.add.reduceat(g, self.starts, axis=3)


def _act(cfg: CaeConfig) -> Layer:
    return Leaky(cfg.slope) if cfg.activation == "leaky" else Identity()


class Sequential:
    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def jvp(self, t):
        for layer in self.layers:
            t = layer.jvp(t)
        return t

    def jvp_backward(self, g):
        for layer in reversed(self.layers):
            g = layer.jvp_backward(g)
        return g

    def param_layers(self):
        return [layer for layer in self.layers if layer.params]


@dataclass
class EpochLog:
    epoch: int
    recon_mse: float
    contractive: float
    total: float


@dataclass
class CaeModel:
    cfg: CaeConfig
    encoder: Sequential = field(repr=False)
    decoder: Sequential = field(repr=False)
    log: list[EpochLog] = field(default_factory=list)

    @classmethod
    def init(cls, cfg: CaeConfig, rng: np.random.Generator | None = None) -> "CaeModel":
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        dt = np.dtype(cfg.dtype)
        sizes = cfg.grid_sizes()
        chans = [cfg.in_channels, *cfg.conv_channels]
        enc: list[Layer] = []
        for cin, cout in zip(chans, chans[1:]):
            enc += [Conv3x3(cin, cout, 2, rng, dt), _act(cfg)]
        enc += [GlobalAvgPool(), Linear(chans[-1], cfg.d_r, rng, dt)]
        last = sizes[-1]
        dec: list[Layer] = [Linear(cfg.d_r, chans[-1] * last * last, rng, dt),
                            Reshape((chans[-1], last, last)), _act(cfg)]
        rev = list(reversed(chans))
        rsizes = list(reversed(sizes))
        for k, (cin, cout) in enumerate(zip(rev, rev[1:])):
            dec += [Upsample(rsizes[k], rsizes[k + 1]), Conv3x3(cin, cout, 1, rng, dt)]
            dec.append(_act(cfg) if k < len(rev) - 2 else
                       (Sigmoid() if cfg.output == "sigmoid" else Identity()))
        return cls(cfg, Sequential(enc), Sequential(dec))

    # -- parameters ---------------------------------------------------------
    def param_list(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        out = []
        for part, net in (("enc", self.encoder), ("dec", self.decoder)):
            for i, layer in enumerate(net.param_layers()):
                for k in ("w", "b"):
                    out.append((f"{part}{i}.{k}", layer.params[k], layer.grads[k]))
        return out

    def zero_grad(self) -> None:
        for _, _, g in self.param_list():
            g[...] = 0

    @property
    def n_params(self) -> int:
        return sum(p.size for _, p, _ in self.param_list())

    # -- forward ------------------------------------------------------------
    def _to_nchw(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.cfg.dtype)
        if x.ndim == 3:
            x = x[None]
        side = self.cfg.side
        if x.shape[1:] != (side, side, self.cfg.in_channels):
            raise ValueError(f"r: expected tensors of shape {(side, side, self.cfg.in_channels)}, got {x.shape[1:]}")
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2))

    def encode(self, x: np.ndarray, batch: int = 256) -> np.ndarray:
        """Embeddings for (n, side, side, channels) tensors."""
        xs = self._to_nchw(x)
        out = [self.encoder.forward(xs[i:i + batch]) for i in range(0, len(xs), batch)]
        return np.concatenate(out) if out else np.zeros((0, self.cfg.d_r), self.cfg.dtype)

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        z = self.encoder.forward(self._to_nchw(x))
        return self.decoder.forward(z).transpose(0, 2, 3, 1)

    # -- objective ----------------------------------------------------------
    def loss_and_grad(self, x_nchw: np.ndarray, probes: np.ndarray | None,
                      lambda_c: float | None = None) -> tuple[float, float]:
        """Accumulate gradients of ``mse + lambda_c * penalty`` into ``grads``.

        ``probes`` are unit directions shaped like ``x_nchw``. Returns
        (recon_mse, penalty) for the batch.
        """
        lam = self.cfg.lambda_c if lambda_c is None else lambda_c
        n = len(x_nchw)
        z = self.encoder.forward(x_nchw)
        y = self.decoder.forward(z)
        resid = y - x_nchw
        mse = float(np.mean(resid * resid))
        dz = self.decoder.backward(2.0 * resid / resid.size)
        pen = 0.0
        if probes is not None:
            d_in = x_nchw[0].size
            jv = self.encoder.jvp(probes)
            pen = float(d_in * np.mean(np.sum(jv * jv, axis=1)))
        self.encoder.backward(dz)
        if probes is not None and lam > 0:
            self.encoder.jvp_backward(lam * d_in * 2.0 * jv / n)
        return mse, pen

    def objective(self, x_nchw: np.ndarray, probes: np.ndarray | None, lambda_c: float | None = None) -> float:
        lam = self.cfg.lambda_c if lambda_c is None else lambda_c
        z = self.encoder.forward(x_nchw)
        total = float(np.mean((self.decoder.forward(z) - x_nchw) ** 2))
        if lam > 0 and probes is not None:
            jv = self.encoder.jvp(probes)
            total += lam * x_nchw[0].size * float(np.mean(np.sum(jv * jv, axis=1)))
        return total


def unit_probes(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    v = rng.standard_normal(shape)
    norms = np.sqrt((v.reshape(len(v), -1) ** 2).sum(axis=1))
    return (v / norms.reshape((-1,) + (1,) * (v.ndim - 1))).astype(dtype)


def is_validation(quadkey: str) -> bool:
    """Fixed 90/10 split by quadkey hash."""
    return hashlib.sha256(quadkey.encode()).digest()[0] % 10 == 0


def split_indices(quadkeys: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    val = np.array([is_validation(q) for q in quadkeys], dtype=bool)
    return np.flatnonzero(~val), np.flatnonzero(val)


def train(data: np.ndarray, cfg: CaeConfig, quadkeys: Sequence[str] | None = None,
          epoch_callback=None) -> CaeModel:
    """Momentum-SGD training on normalised (n, side, side, channels) tensors.

    With ``quadkeys`` the hash-based validation tenth is held out.
    """
    data = np.asarray(data)
    if len(data) == 0:
        raise ValueError("empty training corpus")
    if quadkeys is not None:
        tr_idx, _ = split_indices(quadkeys)
        if len(tr_idx):
            data = data[tr_idx]
    rng = np.random.default_rng(cfg.seed)
    model = CaeModel.init(cfg, rng)
    x_all = model._to_nchw(data)
    params = model.param_list()
    vel = [np.zeros_like(p) for _, p, _ in params]
    n = len(x_all)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        sum_mse = sum_pen = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            xb = x_all[idx]
            probes = unit_probes(rng, xb.shape, xb.dtype) if cfg.lambda_c > 0 else None
            model.zero_grad()
            mse, pen = model.loss_and_grad(xb, probes)
            if not (math.isfinite(mse) and math.isfinite(pen)):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}: mse={mse} penalty={pen}")
            sum_mse += mse * len(idx)
            sum_pen += pen * len(idx)
            for v, (_, p, g) in zip(vel, params):
                v *= cfg.momentum
                v -= cfg.lr * g
                p += v
        mse, pen = sum_mse / n, sum_pen / n
        entry = EpochLog(epoch, mse, pen, mse + cfg.lambda_c * pen)
        model.log.append(entry)
        log.debug("epoch %d mse=%.6g contractive=%.6g", epoch, mse, pen)
        if epoch_callback is not None:
            epoch_callback(entry)
    return model


# ---------------------------------------------------------------------------
# diagnostics

def gradient_check(cfg: CaeConfig, x: np.ndarray, eps: float = 1e-5, seed: int = 0,
                   floor: float = 1e-8) -> float:
    """Max relative error of analytic vs central-difference gradients over every parameter.

    ``x`` is (n, side, side, channels); the model is built in float64.
    Relative error is ``|a - f| / max(|a|, |f|, floor)``.
    """
    cfg = CaeConfig(**{**asdict(cfg), "dtype": "float64"})
    rng = np.random.default_rng(seed)
    model = CaeModel.init(cfg, rng)
    # nudge biases off zero so every path carries signal
    for _, p, _ in model.param_list():
        p += rng.uniform(-0.1, 0.1, p.shape)
    xs = model._to_nchw(x)
    probes = unit_probes(rng, xs.shape, xs.dtype) if cfg.lambda_c > 0 else None
    model.zero_grad()
    model.loss_and_grad(xs, probes)
    worst = 0.0
    for _, p, g in model.param_list():
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = model.objective(xs, probes)
            flat[i] = old - eps
            fm = model.objective(xs, probes)
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            a = gflat[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst


def jacobian_norms(model: CaeModel, x: np.ndarray, probes: int = 8, seed: int = 0,
                   batch: int = 256) -> np.ndarray:
    """Per-example estimate of ``||J_f(x)||_F`` from ``probes`` random unit directions."""
    rng = np.random.default_rng(seed)
    xs = model._to_nchw(x)
    d_in = xs[0].size
    acc = np.zeros(len(xs))
    for _ in range(probes):
        u = unit_probes(rng, xs.shape, xs.dtype)
        for lo in range(0, len(xs), batch):
            model.encoder.forward(xs[lo:lo + batch])
            jv = model.encoder.jvp(u[lo:lo + batch]).astype(np.float64)
            acc[lo:lo + batch] += np.sum(jv * jv, axis=1)
    return np.sqrt(d_in * acc / probes)


def perturbation_sensitivity(model: CaeModel, x: np.ndarray, scale: float = 1e-2, seed: int = 0) -> float:
    """Mean ``||f(x + e) - f(x)|| / ||e||`` for random perturbations of norm ``scale``."""
    rng = np.random.default_rng(seed)
    xs = np.asarray(x, dtype=np.float64)
    e = unit_probes(rng, xs.shape, np.float64) * scale
    z0 = model.encode(xs).astype(np.float64)
    z1 = model.encode(xs + e).astype(np.float64)
    return float(np.mean(np.linalg.norm(z1 - z0, axis=1) / scale))


# ---------------------------------------------------------------------------
# CAE1 model files

_HEADER_FIELDS = ("d_r", "r", "in_channels", "conv_channels", "activation", "output", "slope",
                  "lambda_c", "lr", "momentum", "batch_size", "epochs", "seed")


def save_model(model: CaeModel, path: str | os.PathLike) -> None:
    """CAE1: text header, then every parameter as little-endian float32 in declaration order."""
    cfg = asdict(model.cfg)
    header = {k: cfg[k] for k in _HEADER_FIELDS}
    params = model.param_list()
    header["params"] = ";".join(f"{name}:{'x'.join(map(str, p.shape))}" for name, p, _ in params)
    header["n_params"] = model.n_params
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "wb") as fh:
        write_manifest(fh, MAGIC, header)
        for _, p, _ in params:
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    os.replace(tmp, path)


def _parse(v: str, like):
    if isinstance(like, bool):
        return v == "True"
    if isinstance(like, int):
        return int(v)
    if isinstance(like, float):
        return float(v)
    if isinstance(like, tuple):
        return tuple(int(a) for a in v.split(",") if a)
    return v


def load_model(path: str | os.PathLike) -> CaeModel:
    with open(path, "rb") as fh:
        header = read_manifest(fh, MAGIC)
        body = fh.read()
    defaults = asdict(CaeConfig())
    try:
        kw = {k: _parse(header[k], defaults[k]) for k in _HEADER_FIELDS}
    except KeyError as exc:
        raise ArchiveFormatError(f"model header: missing field {exc}") from exc
    cfg = CaeConfig(**kw, dtype="float32")
    model = CaeModel.init(cfg, np.random.default_rng(0))
    expected = int(header.get("n_params", -1))
    if expected != model.n_params or len(body) != 4 * model.n_params:
        raise ArchiveFormatError(
            f"n_params: header says {expected}, architecture needs {model.n_params}, body holds {len(body) // 4}")
    flat = np.frombuffer(body, dtype="<f4")
    pos = 0
    for _, p, _ in model.param_list():
        p[...] = flat[pos:pos + p.size].reshape(p.shape)
        pos += p.size
    return model


def write_log_csv(model: CaeModel, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,recon_mse,contractive,total\n")
        for e in model.log:
            fh.write(f"{e.epoch},{e.recon_mse!r},{e.contractive!r},{e.total!r}\n")


# ---------------------------------------------------------------------------
# embeddings

class ArtifactMismatchError(ValueError):
    """Two artifacts disagree on a shape parameter; ``field`` names it."""

    def __init__(self, field: str, expected, found):
        super().__init__(f"{field}: expected {expected}, found {found}")
        self.field = field


@dataclass(frozen=True)
class EmbeddingVector:
    quadkey: str
    values: np.ndarray

    @property
    def tile(self):
        from .tilegrid import quadkey_to_tile
        return quadkey_to_tile(self.quadkey)


def embed(model: CaeModel, archive, d_r: int | None = None) -> list[EmbeddingVector]:
    """Encode every summary of ``archive`` (an :class:`~reachgrid.archive.Archive`), in quadkey order."""
    if archive.r != model.cfg.r:
        raise ArtifactMismatchError("r", model.cfg.r, archive.r)
    if d_r is not None and d_r != model.cfg.d_r:
        raise ArtifactMismatchError("d_r", d_r, model.cfg.d_r)
    # one tile per forward pass: batched BLAS calls may round a row differently
    # depending on its position, and an embedding must depend on its summary only
    z = model.encode(archive.tensors, batch=1).astype(np.float32)
    if not np.isfinite(z).all():
        raise NonFiniteLossError("encoder produced non-finite embeddings")
    return [EmbeddingVector(q, z[i]) for i, q in enumerate(archive.quadkeys)]


def model_sha256(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
