"""BatchTopK sparse autoencoder: sparsity operator, loss with analytic gradients,
Adam training, offline diagnostics and checkpoint I/O.

All arithmetic runs in float64; trained parameters are stored as float32 so that
checkpoints round-trip exactly.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import binfmt
from .errors import DegenerateVariance, DivergedLoss, InvalidBudget, ValidationError

log = logging.getLogger(__name__)

CKPT_MAGIC = b"EVSAECKP"
_CKPT_HEADER = struct.Struct("<QQQdd")  # d, m, k, input_scale, theta
THETA_DECAY = 0.99


@dataclass(eq=False)
class SaeParams:
    W_enc: np.ndarray  # (m, d)
    b_enc: np.ndarray  # (m,)
    W_dec: np.ndarray  # (d, m), unit-norm columns
    b_dec: np.ndarray  # (d,)
    k: int
    input_scale: float = 1.0
    theta: float = 0.0

    @property
    def d(self):
        return self.W_dec.shape[0]

    @property
    def m(self):
        return self.W_dec.shape[1]

    def validate(self):
        m, d = self.W_enc.shape
        if self.W_dec.shape != (d, m) or self.b_enc.shape != (m,) or self.b_dec.shape != (d,):
            raise ValidationError("inconsistent SAE parameter shapes")
        if m < d:
            raise ValidationError(f"dictionary size m={m} must be >= d={d}")
        if self.k < 1:
            raise InvalidBudget(f"k must be positive, got {self.k}")
        if not self.input_scale > 0:
            raise ValidationError("input_scale must be positive")
        arrays = (self.W_enc, self.b_enc, self.W_dec, self.b_dec)
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValidationError("non-finite SAE parameters")
        norms = np.linalg.norm(self.W_dec.astype(np.float64), axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValidationError("decoder columns must have unit norm")
        return self

    def preact(self, H):
        """Encoder pre-activations ``(B, m)`` for raw (unscaled) states ``H``."""
        H = np.asarray(H, dtype=np.float64)
        return (self.input_scale * H) @ self.W_enc.T.astype(np.float64) + self.b_enc

    def encode(self, H, mode="inference"):
        """Sparse codes. ``mode`` is ``train`` (BatchTopK), ``inference`` (theta
        threshold) or ``topk`` (per-row top-k)."""
        H = np.atleast_2d(H)
        P = self.preact(H)
        if mode == "train":
            return batch_topk(P, self.k)
        if mode == "topk":
            return row_topk(P, self.k)
        if mode == "inference":
            return np.where(P > self.theta, np.maximum(P, 0.0), 0.0)
        raise ValueError(f"unknown encode mode {mode!r}")

    def decode(self, Z):
        Z = np.asarray(Z, dtype=np.float64)
        return (Z @ self.W_dec.T.astype(np.float64) + self.b_dec) / self.input_scale

    def decoder_column(self, i):
        return self.W_dec[:, i].astype(np.float64)

    def astype(self, dtype):
        return replace(self, W_enc=self.W_enc.astype(dtype), b_enc=self.b_enc.astype(dtype),
                       W_dec=self.W_dec.astype(dtype), b_dec=self.b_dec.astype(dtype))

    def __eq__(self, other):
        if not isinstance(other, SaeParams):
            return NotImplemented
        same_arrays = all(
            a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()
            for a, b in zip(self._arrays(), other._arrays())
        )
        return same_arrays and (self.k, self.input_scale, self.theta) == (
            other.k, other.input_scale, other.theta)

    def _arrays(self):
        return (self.W_enc, self.b_enc, self.W_dec, self.b_dec)


@dataclass
class SaeTrainConfig:
    m: int = 64
    k: int = 64
    learning_rate: float = 1e-4
    batch_size: int = 40_000
    steps: int = 10_000
    warmup_steps: int = 1_000
    decay_start_fraction: float = 0.8
    lambda_aux: float = 1.0 / 32.0
    k_aux: int | None = None  # defaults to 2k
    dead_after_steps: int = 200
    seed: int = 0
    normalize: bool = True

    def validate(self):
        if self.k < 1:
            raise InvalidBudget(f"k must be positive, got {self.k}")
        if self.steps < 1 or not 0 <= self.warmup_steps < self.steps:
            raise ValidationError("need 0 <= warmup_steps < steps")
        if self.lambda_aux < 0:
            raise ValidationError("lambda_aux must be >= 0")
        if self.resolved_k_aux() < 1:
            raise ValidationError("k_aux must be >= 1")
        if not 0.0 <= self.decay_start_fraction <= 1.0:
            raise ValidationError("decay_start_fraction must lie in [0, 1]")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        return self

    def resolved_k_aux(self):
        return 2 * self.k if self.k_aux is None else self.k_aux


@dataclass
class SaeDiagnostics:
    fve: float
    alive_fraction: float
    avg_l0: float
    alive: np.ndarray = field(repr=False, default=None)

    def row(self):
        """Report row, e.g. ``0.911  94.1%  63.6``."""
        return f"{self.fve:.3f}  {100 * self.alive_fraction:.1f}%  {self.avg_l0:.1f}"


# -- sparsity operators --------------------------------------------------------

def batch_topk_mask(P, k):
    """Boolean mask of the top ``k*B`` entries of ``P`` by signed value.

    Ties at the cut go to the lower feature index, then the lower row index.
    """
    P = np.asarray(P)
    B, m = P.shape
    if k <= 0:
        raise InvalidBudget(f"k must be positive, got {k}")
    n_keep = k * B
    if n_keep > B * m:
        raise InvalidBudget(f"kB={n_keep} exceeds B*m={B * m}")
    flat = P.ravel()
    if n_keep == flat.size:
        return np.ones_like(P, dtype=bool)
    cut = np.partition(flat, flat.size - n_keep)[flat.size - n_keep]
    mask = flat > cut
    need = n_keep - int(mask.sum())
    if need > 0:
        tied = np.flatnonzero(flat == cut)
        order = np.lexsort((tied // m, tied % m))
        mask[tied[order[:need]]] = True
    return mask.reshape(B, m)


def batch_topk(P, k):
    P = np.asarray(P, dtype=np.float64)
    return np.where(batch_topk_mask(P, k), np.maximum(P, 0.0), 0.0)


def row_topk(P, k):
    """Per-row top-k (inference fallback), same tie rule within a row."""
    P = np.asarray(P, dtype=np.float64)
    if k <= 0:
        raise InvalidBudget(f"k must be positive, got {k}")
    out = np.zeros_like(P)
    for b in range(P.shape[0]):
        mask = batch_topk_mask(P[b:b + 1], k)
        out[b] = np.where(mask[0], np.maximum(P[b], 0.0), 0.0)
    return out


def sae_forward(params, H, train=False, topk_inference=False):
    """Return ``(Z, H_hat)``; ``H_hat`` is in the raw input space."""
    H = np.asarray(H, dtype=np.float64)
    if not np.all(np.isfinite(H)):
        raise ValidationError("sae_forward requires finite inputs")
    mode = "train" if train else ("topk" if topk_inference else "inference")
    Z = params.encode(H, mode=mode)
    return Z, params.decode(Z)


# -- loss and gradients --------------------------------------------------------

@dataclass
class _Support:
    main: np.ndarray  # kept entries with positive pre-activation
    aux: np.ndarray   # (B, n_dead) kept aux entries with positive pre-activation
    dead_idx: np.ndarray


def _aux_support(Pd, k_aux):
    B, n = Pd.shape
    kk = min(k_aux, n)
    mask = np.zeros_like(Pd, dtype=bool)
    if kk == n:
        mask[:] = True
    else:
        idx = np.argpartition(-Pd, kk - 1, axis=1)[:, :kk]
        np.put_along_axis(mask, idx, True, axis=1)
    return mask & (Pd > 0)


def _loss_terms(W_enc, b_enc, W_dec, b_dec, Hs, k, dead_mask, lambda_aux, k_aux,
                support=None, aux_target=None, grads=False):
    """Loss in the scaled input space, optionally with analytic gradients.

    ``support`` pins the active sets (used by finite-difference checks);
    ``aux_target`` pins the residual the auxiliary term reconstructs. The
    residual is treated as a constant in the gradient.
    """
    B = Hs.shape[0]
    P = Hs @ W_enc.T + b_enc
    if support is None:
        main = batch_topk_mask(P, k) & (P > 0)
        dead_idx = np.flatnonzero(dead_mask)
        aux_mask = _aux_support(P[:, dead_idx], k_aux) if dead_idx.size else None
        support = _Support(main, aux_mask, dead_idx)
    Z = np.where(support.main, P, 0.0)
    Hhat = Z @ W_dec.T + b_dec
    E = Hs - Hhat
    mse = float(np.sum(E * E) / B)
    aux = 0.0
    dead_idx = support.dead_idx
    if dead_idx.size:
        target = E if aux_target is None else aux_target
        Pd = P[:, dead_idx]
        Zd = np.where(support.aux, Pd, 0.0)
        Wd = W_dec[:, dead_idx]
        R = target - Zd @ Wd.T
        aux = float(np.sum(R * R) / B)
    total = mse + lambda_aux * aux
    out = {"total": total, "mse": mse, "aux": aux, "Z": Z, "E": E, "support": support}
    if not grads:
        return out
    G = -2.0 * E / B
    gW_dec = G.T @ Z
    gb_dec = G.sum(axis=0)
    dP = (G @ W_dec) * support.main
    if dead_idx.size:
        G2 = lambda_aux * (-2.0 * R / B)
        gW_dec[:, dead_idx] += G2.T @ Zd
        dP[:, dead_idx] += (G2 @ Wd) * support.aux
    gW_enc = dP.T @ Hs
    gb_enc = dP.sum(axis=0)
    out["grads"] = (gW_enc, gb_enc, gW_dec, gb_dec)
    return out


def sae_loss(params, H, dead_mask, lambda_aux, k_aux):
    """``(total, mse, aux)`` for raw states ``H``, computed in the scaled space."""
    Hs = np.asarray(H, dtype=np.float64) * params.input_scale
    dead_mask = np.asarray(dead_mask, dtype=bool)
    arrs = [np.asarray(a, dtype=np.float64) for a in params._arrays()]
    r = _loss_terms(*arrs, Hs, params.k, dead_mask, lambda_aux, k_aux)
    return r["total"], r["mse"], r["aux"]


def sae_loss_and_grads(params, H, dead_mask, lambda_aux, k_aux, support=None, aux_target=None):
    Hs = np.asarray(H, dtype=np.float64) * params.input_scale
    arrs = [np.asarray(a, dtype=np.float64) for a in params._arrays()]
    return _loss_terms(*arrs, Hs, params.k, np.asarray(dead_mask, bool), lambda_aux, k_aux,
                       support=support, aux_target=aux_target, grads=True)


# -- training ------------------------------------------------------------------

def init_params(d, m, k, seed):
    rng = np.random.default_rng(seed)
    W_dec = rng.standard_normal((d, m))
    W_dec /= np.linalg.norm(W_dec, axis=0, keepdims=True)
    return SaeParams(W_enc=W_dec.T.copy(), b_enc=np.zeros(m), W_dec=W_dec,
                     b_dec=np.zeros(d), k=int(k))


def _as_arrays(data):
    if isinstance(data, np.ndarray):
        return [np.asarray(data, dtype=np.float64)]
    out = [np.asarray(getattr(b, "data", b), dtype=np.float64) for b in data]
    if not out:
        raise ValidationError("training data yields no batches")
    return out


def _batch_stream(chunks, batch_size, seed):
    """Infinite stream of batches; a single array is reshuffled every epoch,
    a list of pre-made batches is cycled in order."""
    if len(chunks) == 1:
        X = chunks[0]
        rng = np.random.default_rng(seed)
        while True:
            order = rng.permutation(len(X))
            for s in range(0, len(order), batch_size):
                yield X[order[s:s + batch_size]]
    while True:
        yield from chunks


def lr_at(config, step):
    lr = config.learning_rate
    if config.warmup_steps and step < config.warmup_steps:
        return lr * (step + 1) / config.warmup_steps
    decay_start = int(config.decay_start_fraction * config.steps)
    if step >= decay_start and config.steps > decay_start:
        return lr * (config.steps - step) / (config.steps - decay_start)
    return lr


def estimate_input_scale(chunks):
    total = sum(np.linalg.norm(c, axis=1).sum() for c in chunks)
    n = sum(len(c) for c in chunks)
    d = chunks[0].shape[1]
    mean_norm = total / n
    if mean_norm <= 0:
        raise DegenerateVariance("all-zero training data")
    return float(math.sqrt(d) / mean_norm)


def train_sae(config, data, log_every=0):
    """Train a BatchTopK SAE. ``data`` is an ``(N, d)`` array or a sequence of
    batches (arrays or ``ActivationBatch``). Returns ``(params, history)``."""
    config.validate()
    chunks = _as_arrays(data)
    d = chunks[0].shape[1]
    if config.m < d:
        raise ValidationError(f"m={config.m} must be >= d={d}")
    scale = estimate_input_scale(chunks) if config.normalize else 1.0
    p = init_params(d, config.m, config.k, config.seed)
    W_enc, b_enc, W_dec, b_dec = p.W_enc, p.b_enc, p.W_dec, p.b_dec
    params = [W_enc, b_enc, W_dec, b_dec]
    m1 = [np.zeros_like(a) for a in params]
    m2 = [np.zeros_like(a) for a in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    since_fired = np.zeros(config.m, dtype=np.int64)
    theta = None
    k_aux = config.resolved_k_aux()
    history = []
    stream = _batch_stream(chunks, config.batch_size, config.seed + 1)

    def snapshot():
        return SaeParams(W_enc.copy(), b_enc.copy(), W_dec.copy(), b_dec.copy(), config.k,
                         scale, 0.0 if theta is None else float(theta))

    for step in range(config.steps):
        Hs = next(stream) * scale
        dead = since_fired >= config.dead_after_steps
        r = _loss_terms(W_enc, b_enc, W_dec, b_dec, Hs, config.k, dead,
                        config.lambda_aux, k_aux, grads=True)
        if not math.isfinite(r["total"]):
            raise DivergedLoss(f"non-finite loss at step {step}", params=snapshot(),
                               history=history)
        Z = r["Z"]
        fired = (Z > 0).any(axis=0)
        since_fired = np.where(fired, 0, since_fired + 1)
        kept = Z[Z > 0]
        if kept.size:
            lo = float(kept.min())
            theta = lo if theta is None else THETA_DECAY * theta + (1 - THETA_DECAY) * lo
        lr = lr_at(config, step)
        t = step + 1
        for a, g, mm, vv in zip(params, r["grads"], m1, m2):
            mm *= b1
            mm += (1 - b1) * g
            vv *= b2
            vv += (1 - b2) * g * g
            a -= lr * (mm / (1 - b1 ** t)) / (np.sqrt(vv / (1 - b2 ** t)) + eps)
        W_dec /= np.linalg.norm(W_dec, axis=0, keepdims=True)
        history.append({"step": step, "mse": r["mse"], "aux": r["aux"],
                        "l0": float((Z > 0).sum() / len(Z)), "dead": int(dead.sum())})
        if log_every and step % log_every == 0:
            log.info("step %d mse %.5f aux %.5f dead %d", step, r["mse"], r["aux"], dead.sum())
    out = snapshot().astype(np.float32)
    W = out.W_dec.astype(np.float64)
    out.W_dec = (W / np.linalg.norm(W, axis=0, keepdims=True)).astype(np.float32)
    return out, history


# -- diagnostics -----------------------------------------------------------------

def fve(H, H_hat):
    H = np.asarray(H, dtype=np.float64)
    resid = np.sum((H - H_hat) ** 2)
    var = np.sum((H - H.mean(axis=0)) ** 2)
    if var <= 0:
        raise DegenerateVariance("all rows identical; FVE undefined")
    return float(1.0 - resid / var)


def diagnostics_on(params, H, topk_inference=False):
    Z, H_hat = sae_forward(params, H, topk_inference=topk_inference)
    alive = (Z > 0).any(axis=0)
    return SaeDiagnostics(fve=fve(H, H_hat), alive_fraction=float(alive.mean()),
                          avg_l0=float((Z > 0).sum(axis=1).mean()), alive=alive)


def diagnostics(params, rset, layer, topk_inference=False):
    H, _ = rset.stacked(layer)
    return diagnostics_on(params, H, topk_inference=topk_inference)


def suite_codes(params, rset, layer, mode="inference"):
    """Inference codes for every rollout: ``{episode_id: (T, m)}``."""
    return {r.episode_id: params.encode(r.rows(layer)[0], mode=mode) for r in rset.rollouts}


# -- checkpoint I/O -----------------------------------------------------------------

def save_params(params, path):
    header = _CKPT_HEADER.pack(params.d, params.m, params.k, float(params.input_scale),
                               float(params.theta))
    blob = binfmt.pack_tensors(list(params._arrays()), magic=CKPT_MAGIC, extra_header=header)
    binfmt.write_file(path, blob)


def load_params(path):
    extra, arrays = binfmt.unpack_tensors(binfmt.read_file(path), path=str(path),
                                          magic=CKPT_MAGIC, extra_header_size=_CKPT_HEADER.size)
    d, m, k, scale, theta = _CKPT_HEADER.unpack(extra)
    W_enc, b_enc, W_dec, b_dec = arrays
    p = SaeParams(W_enc, b_enc, W_dec, b_dec, int(k), scale, theta)
    if (p.d, p.m) != (d, m):
        raise ValidationError(f"{path}: header (d={d}, m={m}) disagrees with tensors")
    return p
