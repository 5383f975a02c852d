"""Deep Koopman model of the planar vehicle dynamics.

The lifted state is ``z = [x; phi(minmax(x))]``: the raw state sits verbatim in
the top block so projection back to ``x`` is exact. Internally the linear
operators act on ``[g * x; phi]`` and ``e * u`` where ``g`` and ``e`` are the
slopes of the Min-Max scalers; :attr:`KoopmanModel.A_theta` and
:attr:`KoopmanModel.B_theta` expose the same maps in raw units.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import nn
from .nn import Layer, MinMaxScaler, Mlp

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class KoopmanDims:
    n: int = 3
    m: int = 2
    phi: int = 5

    def __post_init__(self):
        if self.phi < 1 or self.n < 1 or self.m < 1:
            raise ValueError("all Koopman dimensions must be >= 1")

    @property
    def q(self) -> int:
        return self.n + self.phi

    @property
    def d(self) -> int:
        return self.q + self.m


@dataclass
class KoopmanModel:
    dims: KoopmanDims
    encoder: Mlp
    decoder: Mlp
    A: Layer
    B: Layer
    scaler_x: MinMaxScaler
    scaler_u: MinMaxScaler
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        n, m, q, p = self.dims.n, self.dims.m, self.dims.q, self.dims.phi
        if (self.encoder.n_in, self.encoder.n_out) != (n, p):
            raise ValueError("encoder must map n -> phi")
        if (self.decoder.n_in, self.decoder.n_out) != (p, n):
            raise ValueError("decoder must map phi -> n")
        if self.A.W.shape != (q, q) or self.B.W.shape != (q, m):
            raise ValueError("A must be q x q and B q x m")
        if not (self.A.linear_no_bias and self.B.linear_no_bias):
            raise ValueError("A and B must be linear layers without bias")

    @classmethod
    def initial(cls, dims: KoopmanDims, scaler_x, scaler_u, rng, hidden=(128, 128, 128),
                identity_init=True):
        """Fresh network; with ``identity_init`` the lifted map starts as persistence (A = I, B = 0)."""
        enc = Mlp.build([dims.n, *hidden, dims.phi], rng)
        dec = Mlp.build([dims.phi, *hidden, dims.n], rng)
        A = Mlp.build([dims.q, dims.q], rng, bias=False).layers[0]
        B = Mlp.build([dims.m, dims.q], rng, bias=False).layers[0]
        if identity_init:
            A.W[...] = np.eye(dims.q)
            B.W[...] = 0.0
        return cls(dims, enc, dec, A, B, scaler_x, scaler_u)

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + self.decoder.params() + [self.A.W, self.B.W]

    def copy(self) -> "KoopmanModel":
        return KoopmanModel(self.dims, self.encoder.copy(), self.decoder.copy(),
                            nn.linear_no_bias(self.A.W.copy()), nn.linear_no_bias(self.B.W.copy()),
                            MinMaxScaler(self.scaler_x.min.copy(), self.scaler_x.max.copy()),
                            MinMaxScaler(self.scaler_u.min.copy(), self.scaler_u.max.copy()),
                            dict(self.config))

    @property
    def lifted_gain(self) -> np.ndarray:
        return np.concatenate([self.scaler_x.gain, np.ones(self.dims.phi)])

    @cached_property
    def A_theta(self) -> np.ndarray:
        s = self.lifted_gain
        return self.A.W * (1.0 / s)[:, None] * s[None, :]

    @cached_property
    def B_theta(self) -> np.ndarray:
        s = self.lifted_gain
        return self.B.W * (1.0 / s)[:, None] * self.scaler_u.gain[None, :]


def _as_state_array(x) -> np.ndarray:
    return x.as_array() if hasattr(x, "as_array") else np.asarray(x, dtype=float)


def lift(model: KoopmanModel, x) -> np.ndarray:
    x = _as_state_array(x)
    phi, _ = nn.forward(model.encoder, model.scaler_x.apply(x))
    return np.concatenate([x, phi], axis=-1)


def project(z, n: int = 3) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] <= n:
        raise ValueError(f"lifted state of length {z.shape[-1]} has no basis block beyond n={n}")
    return z[..., :n].copy()


def predict_one(model: KoopmanModel, z, u, w=None) -> np.ndarray:
    """``A_theta z + B_theta u + w`` with ``u`` in raw units."""
    z = np.asarray(z, dtype=float)
    u = _as_state_array(u)
    if z.shape[-1] != model.dims.q or u.shape[-1] != model.dims.m:
        raise ValueError("lifted state or input has the wrong length")
    out = z @ model.A_theta.T + u @ model.B_theta.T
    if w is not None:
        out = out + w
    return out


def rollout(model: KoopmanModel, x0, U, w=None) -> np.ndarray:
    """Lift once, iterate the lifted map with ``w`` held constant, project every step."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if len(U) < 1:
        raise ValueError("rollout needs at least one input")
    z = lift(model, x0)
    out = np.empty((len(U), model.dims.n))
    for i, u in enumerate(U):
        z = predict_one(model, z, u, w)
        out[i] = z[: model.dims.n]
    return out


def loss_and_grads(model: KoopmanModel, X, U, need_grads=True):
    """Batch-mean composite loss and its gradient (ordered like ``model.params()``).

    ``X`` is ``(batch, p+1, n)`` raw states and ``U`` is ``(batch, p, m)`` raw inputs.
    The multi-step prediction error and the reconstruction error are both measured
    in Min-Max scaled units.
    """
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    if X.ndim == 2:
        X, U = X[None], U[None]
    nb, p1, n = X.shape
    p = p1 - 1
    q = model.dims.q
    gx = model.scaler_x.gain
    xs = model.scaler_x.apply(X).reshape(nb * p1, n)
    xd = X * gx
    v = U * model.scaler_u.gain
    A, B = model.A.W, model.B.W

    phi, enc_cache = nn.forward(model.encoder, xs)
    rec, dec_cache = nn.forward(model.decoder, phi)
    r = xs - rec
    L2 = float(np.sum(r * r))

    z = np.empty((p1, nb, q))
    z[0, :, :n] = xd[:, 0]
    z[0, :, n:] = phi.reshape(nb, p1, -1)[:, 0]
    for i in range(1, p1):
        z[i] = z[i - 1] @ A.T + v[:, i - 1] @ B.T
    err = xd.transpose(1, 0, 2)[1:] - z[1:, :, :n]
    L1 = float(np.sum(err * err))

    L1 /= nb
    L2 /= nb
    if not need_grads:
        return L1 + L2, L1, L2, None

    dA = np.zeros_like(A)
    dB = np.zeros_like(B)
    lam = np.zeros((nb, q))
    for i in range(p, 0, -1):
        lam = lam.copy()
        lam[:, :n] += -2.0 * err[i - 1] / nb
        dA += lam.T @ z[i - 1]
        dB += lam.T @ v[:, i - 1]
        lam = lam @ A
    dphi_pred = lam[:, n:]

    dec_grads, dphi = nn.backward(model.decoder, dec_cache, -2.0 * r / nb)
    dphi = dphi.reshape(nb, p1, -1)
    dphi[:, 0] += dphi_pred
    enc_grads, _ = nn.backward(model.encoder, enc_cache, dphi.reshape(nb * p1, -1))
    return L1 + L2, L1, L2, enc_grads + dec_grads + [dA, dB]


def loss(model: KoopmanModel, X, U):
    """Summed loss of one sequence: ``(L, L1, L2)``."""
    L, L1, L2, _ = loss_and_grads(model, X, U, need_grads=False)
    return L, L1, L2


@dataclass
class TrajectoryDataset:
    X: np.ndarray          # (N, p+1, n)
    U: np.ndarray          # (N, p, m)
    is_val: np.ndarray     # (N,) bool
    Ts: float = 0.025

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.U = np.asarray(self.U, dtype=float)
        self.is_val = np.asarray(self.is_val, dtype=bool)
        if self.X.ndim != 3 or self.U.ndim != 3 or len(self.X) != len(self.U):
            raise ValueError("dataset arrays have inconsistent shapes")
        if self.X.shape[1] != self.U.shape[1] + 1:
            raise ValueError("each sequence needs p+1 states and p inputs")
        if len(self.X) == 0:
            raise ValueError("empty dataset")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.U))):
            raise ValueError("dataset contains non-finite values")

    @property
    def p(self) -> int:
        return self.U.shape[1]

    def __len__(self):
        return len(self.X)

    def train(self):
        return self.X[~self.is_val], self.U[~self.is_val]

    def val(self):
        return self.X[self.is_val], self.U[self.is_val]

    def save(self, path) -> None:
        np.savez(path, X=self.X, U=self.U, is_val=self.is_val, Ts=self.Ts)

    @classmethod
    def load(cls, path) -> "TrajectoryDataset":
        with np.load(path) as f:
            return cls(f["X"], f["U"], f["is_val"], float(f["Ts"]))

    def resequence(self, p: int) -> "TrajectoryDataset":
        """Cut every stored sequence into shorter windows of length ``p``."""
        if p > self.p:
            raise ValueError(f"cannot lengthen sequences from {self.p} to {p}")
        k = self.p // p
        X = np.concatenate([self.X[:, j * p: j * p + p + 1] for j in range(k)])
        U = np.concatenate([self.U[:, j * p: (j + 1) * p] for j in range(k)])
        return TrajectoryDataset(X, U, np.tile(self.is_val, k), self.Ts)


@dataclass
class TrainingConfig:
    phi: int = 5
    p: int = 10
    epochs: int = 60
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.2
    momentum: float = 0.0
    patience: int = 10
    hidden: tuple = (128, 128, 128)
    identity_init: bool = True
    clip_norm: float = 10.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.p < 2:
            raise ValueError("sequence length p must be >= 2")
        if not 0 < self.val_fraction <= 0.5:
            raise ValueError("val_fraction must lie in (0, 0.5]")
        if self.phi < 1 or self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("invalid training configuration")


@dataclass
class TrainResult:
    model: KoopmanModel
    train_loss: list
    val_loss: list


def train(dataset: TrajectoryDataset, cfg: TrainingConfig) -> TrainResult:
    if dataset.p != cfg.p:
        dataset = dataset.resequence(cfg.p)
    Xtr, Utr = dataset.train()
    Xva, Uva = dataset.val()
    if len(Xtr) == 0:
        raise ValueError("no training sequences")
    if len(Xva) == 0:
        Xva, Uva = Xtr, Utr
    rng = np.random.default_rng(cfg.seed)
    sx = MinMaxScaler.fit(Xtr.reshape(-1, Xtr.shape[-1]))
    su = MinMaxScaler.fit(Utr.reshape(-1, Utr.shape[-1]))
    dims = KoopmanDims(Xtr.shape[-1], Utr.shape[-1], cfg.phi)
    model = KoopmanModel.initial(dims, sx, su, rng, cfg.hidden, cfg.identity_init)
    model.config = asdict(cfg)
    params = model.params()
    velocity = [np.zeros_like(p) for p in params]
    lr = cfg.lr
    best_val, best_params, since_best = math.inf, [p.copy() for p in params], 0
    train_hist, val_hist = [], []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(Xtr))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            L, _, _, grads = loss_and_grads(model, Xtr[idx], Utr[idx])
            if not math.isfinite(L):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}")
            if cfg.clip_norm > 0:
                norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
                if norm > cfg.clip_norm:
                    grads = [g * (cfg.clip_norm / norm) for g in grads]
            nn.sgd_step(params, grads, lr, velocity, cfg.momentum)
            total += L * len(idx)
        val = loss_and_grads(model, Xva, Uva, need_grads=False)[0]
        if not math.isfinite(val):
            raise TrainingDivergence(f"non-finite validation loss at epoch {epoch}")
        train_hist.append(total / len(Xtr))
        val_hist.append(val)
        log.info("epoch %d train %.5g val %.5g lr %.3g", epoch, train_hist[-1], val, lr)
        if val < best_val:
            best_val, since_best = val, 0
            best_params = [p.copy() for p in params]
        else:
            since_best += 1
            if since_best >= cfg.patience:
                lr *= 0.5
                since_best = 0
                for v in velocity:
                    v[...] = 0.0
    for p, b in zip(params, best_params):
        p[...] = b
    return TrainResult(model.copy(), train_hist, val_hist)


def one_step_errors(model: KoopmanModel, X, U) -> np.ndarray:
    """Signed one-step errors ``x_{k+1} - C_P(A lift(x_k) + B u_k)`` for all transitions."""
    x0 = X[:, :-1].reshape(-1, X.shape[-1])
    x1 = X[:, 1:].reshape(-1, X.shape[-1])
    u0 = U.reshape(-1, U.shape[-1])
    pred = predict_one(model, lift(model, x0), u0)[:, : model.dims.n]
    return x1 - pred


def error_stats(err) -> np.ndarray:
    """Per-channel (Max, Avg, RMSE) of the absolute errors; shape ``(channels, 3)``."""
    a = np.abs(np.asarray(err, dtype=float))
    return np.stack([a.max(axis=0), a.mean(axis=0), np.sqrt(np.mean(a * a, axis=0))], axis=1)


@dataclass
class DimStudyRow:
    phi: int
    stats: np.ndarray      # (3 channels, Max/Avg/RMSE)
    errors: np.ndarray     # per-sample signed errors on held-out data
    model: KoopmanModel = field(repr=False)


def one_step_error_study(dataset: TrajectoryDataset, dims_list, cfg: TrainingConfig) -> list[DimStudyRow]:
    dims_list = list(dims_list)
    if not dims_list:
        raise ValueError("dims list is empty")
    rows = []
    for phi in dims_list:
        c = TrainingConfig(**{**asdict(cfg), "phi": int(phi)})
        model = train(dataset, c).model
        Xva, Uva = dataset.val()
        err = one_step_errors(model, Xva, Uva)
        rows.append(DimStudyRow(int(phi), error_stats(err), err, model))
    return rows


def _layer_dict(layer: Layer) -> dict:
    return {"W": layer.W.tolist(), "b": None if layer.b is None else layer.b.tolist(),
            "activation": layer.activation}


def _layer_from(d) -> Layer:
    return Layer(np.array(d["W"], dtype=float), None if d["b"] is None else np.array(d["b"], dtype=float),
                 d["activation"])


def save_checkpoint(model: KoopmanModel, path) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "dims": {"n": model.dims.n, "m": model.dims.m, "phi": model.dims.phi},
        "scaler_x": {"min": model.scaler_x.min.tolist(), "max": model.scaler_x.max.tolist()},
        "scaler_u": {"min": model.scaler_u.min.tolist(), "max": model.scaler_u.max.tolist()},
        "encoder": [_layer_dict(l) for l in model.encoder.layers],
        "decoder": [_layer_dict(l) for l in model.decoder.layers],
        "A": model.A.W.tolist(),
        "B": model.B.W.tolist(),
        "config": model.config,
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path) -> KoopmanModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    d = doc["dims"]
    return KoopmanModel(
        KoopmanDims(d["n"], d["m"], d["phi"]),
        Mlp([_layer_from(l) for l in doc["encoder"]]),
        Mlp([_layer_from(l) for l in doc["decoder"]]),
        nn.linear_no_bias(doc["A"]),
        nn.linear_no_bias(doc["B"]),
        MinMaxScaler(doc["scaler_x"]["min"], doc["scaler_x"]["max"]),
        MinMaxScaler(doc["scaler_u"]["min"], doc["scaler_u"]["max"]),
        doc.get("config", {}),
    )
