"""Linear sparse autoencoder with optional separate encoders per response pool.

Architecture: ``z = relu(x @ W_enc.T + b_enc)``, ``x_hat = z @ W_dec.T + b_dec``.
Loss: mean squared reconstruction error plus ``sparsity_coeff * |z|_1 / V``
(the L1 term is averaged over the batch and divided by the input width so the
two terms live on the same per-voxel scale).

When a predicted pool is given, measured and predicted rows each get their own
encoder while sharing one decoder, and every batch is half measured, half
predicted. One epoch is one pass over the measured training rows.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from ..core import Decomposition

log = logging.getLogger(__name__)


class SAETrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SAEConfig:
    expansion_factor: float = 4.0
    sparsity_coeff: float = 4.0
    epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 256
    holdout_fraction: float = 0.05
    dtype: str = "float32"

    def __post_init__(self):
        if self.expansion_factor <= 0:
            raise ValueError("expansion_factor must be positive")
        if self.sparsity_coeff < 0:
            raise ValueError("sparsity_coeff must be >= 0")
        if self.batch_size < 2 or self.epochs < 1:
            raise ValueError("batch_size >= 2 and epochs >= 1 required")


class _Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self._tmp = {k: np.empty_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        step = self.lr * math.sqrt(c2) / c1
        for k, g in grads.items():
            m, v, tmp = self.m[k], self.v[k], self._tmp[k]
            m *= self.b1
            np.multiply(g, 1.0 - self.b1, out=tmp)
            m += tmp
            v *= self.b2
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - self.b2
            v += tmp
            np.sqrt(v, out=tmp)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= step
            params[k] -= tmp


def _encode(x, w, b):
    pre = x @ w.T
    pre += b
    return pre, np.maximum(pre, 0)


def _batch_loss(params: dict, parts: Sequence[tuple[str, np.ndarray]], lam: float) -> float:
    """Loss over (encoder key, rows) groups; used for held-out monitoring."""
    total_rows = sum(len(x) for _, x in parts)
    if total_rows == 0:
        return float("nan")
    v = params["dec_weight"].shape[0]
    rec = 0.0
    l1 = 0.0
    for key, x in parts:
        if not len(x):
            continue
        _, z = _encode(x, params[f"enc_weight_{key}"], params[f"enc_bias_{key}"])
        r = z @ params["dec_weight"].T + params["dec_bias"] - x
        rec += float(np.einsum("ij,ij->", r, r, dtype=np.float64))
        l1 += float(z.sum(dtype=np.float64))
    return rec / (total_rows * v) + lam * l1 / (total_rows * v)


def _loss_and_grads(params: dict, parts: Sequence[tuple[str, np.ndarray]], lam: float):
    total_rows = sum(len(x) for _, x in parts)
    v = params["dec_weight"].shape[0]
    scale = 1.0 / (total_rows * v)
    wd = params["dec_weight"]  # V x L
    grads = {k: np.zeros_like(p) for k, p in params.items()}
    rec = 0.0
    l1 = 0.0
    for key, x in parts:
        pre, z = _encode(x, params[f"enc_weight_{key}"], params[f"enc_bias_{key}"])
        r = z @ wd.T
        r += params["dec_bias"]
        r -= x
        rec += float(np.einsum("ij,ij->", r, r, dtype=np.float64))
        l1 += float(z.sum(dtype=np.float64))
        d_out = (2.0 * scale) * r  # N x V
        grads["dec_weight"] += d_out.T @ z
        grads["dec_bias"] += d_out.sum(axis=0)
        dz = d_out @ wd
        dz += lam * scale
        dz *= pre > 0
        grads[f"enc_weight_{key}"] += dz.T @ x
        grads[f"enc_bias_{key}"] += dz.sum(axis=0)
    return (rec + lam * l1) * scale, grads


def _holdout_split(n: int, frac: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_hold = int(round(frac * n)) if n >= 20 else 0
    return perm[n_hold:], perm[:n_hold]


def fit_sae(x_measured: np.ndarray, x_predicted: np.ndarray | None = None, cfg: SAEConfig = SAEConfig(),
            seed: int = 0, roi: str = "roi", hyperparams: dict | None = None) -> Decomposition:
    xm = np.asarray(x_measured)
    if xm.ndim != 2 or xm.shape[0] == 0:
        raise ValueError("measured pool is empty")
    dual = x_predicted is not None and len(x_predicted) > 0
    dtype = np.dtype(cfg.dtype)
    xm = xm.astype(dtype)
    xp = np.asarray(x_predicted).astype(dtype) if dual else None
    v = xm.shape[1]
    if v < 1:
        raise ValueError("input width must be >= 1")
    if dual and xp.shape[1] != v:
        raise ValueError("measured and predicted widths differ")
    n_latent = max(1, int(round(cfg.expansion_factor * v)))
    lam = float(cfg.sparsity_coeff)
    rng = np.random.default_rng(seed)

    bound = 1.0 / math.sqrt(v)
    w_enc = rng.uniform(-bound, bound, size=(n_latent, v)).astype(dtype)
    params = {
        "enc_weight_measured": w_enc,
        "enc_bias_measured": np.zeros(n_latent, dtype),
        "dec_weight": w_enc.T.copy(),
        "dec_bias": np.zeros(v, dtype),
    }
    keys = ["measured"]
    if dual:
        params["enc_weight_predicted"] = w_enc.copy()
        params["enc_bias_predicted"] = np.zeros(n_latent, dtype)
        keys.append("predicted")

    train_m, hold_m = _holdout_split(len(xm), cfg.holdout_fraction, rng)
    hold_parts = [("measured", xm[hold_m])]
    if dual:
        train_p, hold_p = _holdout_split(len(xp), cfg.holdout_fraction, rng)
        hold_parts.append(("predicted", xp[hold_p]))
        half = max(1, cfg.batch_size // 2)
        steps = math.ceil(len(train_m) / half)
        p_stream = rng.permutation(train_p)
        p_pos = 0
    else:
        half = cfg.batch_size
        steps = math.ceil(len(train_m) / half)

    opt = _Adam(params, cfg.learning_rate)
    heldout = [_batch_loss(params, hold_parts, lam)]
    train_hist = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_m)
        epoch_loss = 0.0
        for s in range(steps):
            parts = [("measured", xm[order[s * half:(s + 1) * half]])]
            if dual:
                if p_pos + half > len(p_stream):
                    p_stream = rng.permutation(train_p)
                    p_pos = 0
                parts.append(("predicted", xp[p_stream[p_pos:p_pos + half]]))
                p_pos += half
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = _loss_and_grads(params, parts, lam)
            if not math.isfinite(loss):
                norms = {k: float(np.linalg.norm(p)) for k, p in params.items()}
                raise SAETrainingError(
                    f"non-finite loss at epoch {epoch}, step {s} (roi={roi}, seed={seed}); "
                    f"parameter norms: {norms}")
            with np.errstate(over="ignore", invalid="ignore"):
                opt.step(params, grads)
            epoch_loss += loss
        train_hist.append(epoch_loss / steps)
        heldout.append(_batch_loss(params, hold_parts, lam))
        log.debug("sae roi=%s epoch %d train %.5f heldout %.5f", roi, epoch, train_hist[-1], heldout[-1])

    # unit-norm decoder columns; encoders absorb the scale so reconstructions are unchanged
    params = {k: p.astype(np.float64) for k, p in params.items()}
    norms = np.linalg.norm(params["dec_weight"], axis=0)
    norms[norms == 0] = 1.0
    params["dec_weight"] /= norms
    state = {"dec_bias": params["dec_bias"]}
    for key in keys:
        state[f"enc_weight_{key}"] = params[f"enc_weight_{key}"] * norms[:, None]
        state[f"enc_bias_{key}"] = params[f"enc_bias_{key}"] * norms

    hp = {"expansion_factor": float(cfg.expansion_factor), "sparsity_coeff": lam, "seed": seed}
    hp.update(hyperparams or {})
    info = {"config": asdict(cfg), "n_latent": n_latent, "steps_per_epoch": steps,
            "heldout_loss": heldout, "train_loss": train_hist, "dual_encoder": dual}
    return Decomposition("sae", roi, params["dec_weight"].T, hyperparams=hp,
                         provenance=tuple(keys), state=state, info=info)


def sae_reconstruct(decomp: Decomposition, codes: np.ndarray) -> np.ndarray:
    """Reconstruction in the normalized input space from (post-normalization) codes."""
    return codes @ decomp.components + decomp.state["dec_bias"]


def active_fraction(codes: np.ndarray, cutoff: float = 0.01) -> float:
    """Mean fraction of latent codes above ``cutoff`` per sample."""
    return float(np.mean(np.asarray(codes) > cutoff))
