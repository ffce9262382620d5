"""Conditional VAE over graph embeddings (the pseudo-ID generator).

Encoder: ``[H, onehot(y)] -> hidden -> (mu, logvar)``.
Decoder: ``[z, onehot(y)] -> hidden -> H_hat``.
The prior is a standard normal independent of ``y``; the decoder likelihood is
a unit-variance Gaussian, so the negative ELBO is a squared error plus KL.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ShapeMismatch
from .gnn import _linear, linear


@dataclass
class CvaeConfig:
    d_z: int = 16
    hidden: int = 64
    lr: float = 1e-3


def init_cvae(d_h: int, n_classes: int, cfg: CvaeConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    if cfg.d_z >= d_h:
        raise ValueError("latent width must be smaller than the embedding width")
    p = {}
    p["enc.w1"], p["enc.b1"] = _linear(rng, d_h + n_classes, cfg.hidden)
    p["enc.mu.w"], p["enc.mu.b"] = _linear(rng, cfg.hidden, cfg.d_z)
    p["enc.lv.w"], p["enc.lv.b"] = _linear(rng, cfg.hidden, cfg.d_z)
    p["dec.w1"], p["dec.b1"] = _linear(rng, cfg.d_z + n_classes, cfg.hidden)
    p["dec.w2"], p["dec.b2"] = _linear(rng, cfg.hidden, d_h)
    return p


def n_classes_of(p: Mapping) -> int:
    return p["dec.w1"].shape[0] - p["enc.mu.w"].shape[1]


def onehot(y, n_classes: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    out = np.zeros((y.size, n_classes))
    out[np.arange(y.size), y] = 1.0
    return out


def _rows(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))


def encode(p: Mapping, H, y) -> tuple[Tensor, Tensor]:
    H = _rows(H)
    C = n_classes_of(p)
    if H.shape[1] + C != p["enc.w1"].shape[0]:
        raise ShapeMismatch(f"embedding width {H.shape[1]} does not fit the encoder")
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (H.shape[0],))
    hid = ad.relu(linear(ad.concat([H, onehot(y, C)]), p["enc.w1"], p["enc.b1"]))
    return linear(hid, p["enc.mu.w"], p["enc.mu.b"]), linear(hid, p["enc.lv.w"], p["enc.lv.b"])


def reparameterize(mu, logvar, noise) -> Tensor:
    return ad.reparameterize(mu, logvar, noise)


def decode(p: Mapping, z, y) -> Tensor:
    z = _rows(z)
    C = n_classes_of(p)
    if z.shape[1] + C != p["dec.w1"].shape[0]:
        raise ShapeMismatch(f"latent width {z.shape[1]} does not fit the decoder")
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (z.shape[0],))
    hid = ad.relu(linear(ad.concat([z, onehot(y, C)]), p["dec.w1"], p["dec.b1"]))
    return linear(hid, p["dec.w2"], p["dec.b2"])


def kl_term(mu, logvar) -> Tensor:
    """Summed KL of ``N(mu, exp(logvar))`` from ``N(0, I)``."""
    mu, logvar = _rows(mu), _rows(logvar)
    n = mu.data.size
    return ad.scale(ad.sq_norm(mu) + ad.sum(ad.exp(logvar)) - ad.sum(logvar) - float(n), 0.5)


def cvae_loss(p: Mapping, H, y, noise) -> Tensor:
    """Batch-mean negative ELBO: ``||H_hat - H||^2 / d_h + KL``.

    ``H`` must be a constant (detached) so no gradient leaks into the encoder
    network that produced it.
    """
    H = _rows(H)
    if H.tracked:
        H = H.detach()
    mu, logvar = encode(p, H, y)
    z = reparameterize(mu, logvar, noise)
    H_hat = decode(p, z, y)
    n, d_h = H.shape
    recon = ad.scale(ad.sq_norm(H_hat - H), 1.0 / d_h)
    return ad.scale(recon + kl_term(mu, logvar), 1.0 / n)


def cvae_step(p: dict, state: ad.AdamState, H: np.ndarray, y, rng: np.random.Generator, lr: float):
    """One Adam update of the cVAE on a detached embedding batch."""
    H = np.atleast_2d(np.asarray(H.data if isinstance(H, Tensor) else H))
    noise = rng.standard_normal((H.shape[0], p["enc.mu.w"].shape[1]))
    with Tape() as tape:
        leaves = {k: tape.watch(v) for k, v in p.items()}
        loss = cvae_loss(leaves, H, y, noise)
        grads = ad.backward(loss, list(leaves.values()))
    p, state = ad.adam_step(p, {k: grads[t] for k, t in leaves.items()}, state, lr)
    return p, state, loss.item()


def train_cvae(
    p: dict,
    H: np.ndarray,
    y,
    epochs: int = 50,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
) -> tuple[dict, list[float]]:
    """Stand-alone fitting on a fixed embedding set (the pipeline trains it online instead)."""
    rng = np.random.default_rng(seed)
    y = np.asarray(y, dtype=np.int64)
    state = ad.adam_init(p)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(H))
        losses = []
        for i in range(0, len(H), batch_size):
            idx = order[i : i + batch_size]
            p, state, loss = cvae_step(p, state, H[idx], y[idx], rng, lr)
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return p, history


def sample_pseudo_id(p: Mapping, y, n: int, seed: int) -> np.ndarray:
    """``n`` decoded prior samples with condition ``y`` (an int or per-sample array)."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, p["enc.mu.w"].shape[1]))
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,))
    return decode(p, z, y).numpy()
