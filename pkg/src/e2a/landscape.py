"""Loss-landscape diagnostics on embeddings: energy, margin, robust radius.

All radius quantities live in embedding space: the encoder output ``H`` is
perturbed while the classification head is held fixed.  A *head* is either
an MLP parameter dict (see :func:`e2a.gnn.classify`) or any callable that
maps an ``(n, d)`` tensor to ``(n, C)`` logits; the callable form is what the
affine probe models in the tests use.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ClassOutOfRange, DegenerateModel, NonFiniteValue, ZeroGradient
from .gnn import GraphBatch, ModelConfig, classify, embed, erm_loss, gin_forward, predict
from .syngraph import Graph

SQRT2 = float(np.sqrt(2.0))  # global logit-Lipschitz constant of softmax cross-entropy


@dataclass
class RadiusEstimate:
    value: float
    method: str  # "margin_approx" | "oracle_bisection"
    converged: bool = True
    n_directions: int = 0
    tolerance: float = 0.0


@dataclass
class EnergyBoundReport:
    L: float
    gamma: float
    C: int
    energy: float
    lower: float
    upper: float
    unique_argmax: bool

    @property
    def holds(self) -> bool:
        # 1e-12 absorbs summation rounding when the lower bound is attained
        return self.lower - 1e-12 <= self.energy <= self.upper + 1e-12


@dataclass
class LipschitzReport:
    L_x: float
    L_w: float

    @property
    def kappa(self) -> float:
        return self.L_w / self.L_x


def _logits_fn(head) -> Callable[[Tensor], Tensor]:
    if callable(head):
        return head
    return lambda H: classify(head, H)


def _row(H) -> np.ndarray:
    h = H.data if isinstance(H, Tensor) else np.asarray(H, dtype=np.float64)
    return h.reshape(1, -1)


# ---------------------------------------------------------------------------
# energy and margin


def energy(S) -> float | np.ndarray:
    """Negative log-sum-exp of logits; one value per row for 2-D input."""
    s = np.asarray(S.data if isinstance(S, Tensor) else S, dtype=np.float64)
    if not np.isfinite(s).all():
        raise NonFiniteValue("energy of non-finite logits")
    m = s.max(axis=-1, keepdims=True)
    e = -(m[..., 0] + np.log(np.exp(s - m).sum(axis=-1)))
    return float(e) if s.ndim == 1 else e


def energy_tensor(S: Tensor) -> Tensor:
    """Differentiable per-row energy, shape (n,)."""
    return ad.scale(ad.logsumexp_rows(S), -1.0)


def margin(S, y: int) -> float:
    s = np.asarray(S.data if isinstance(S, Tensor) else S, dtype=np.float64).reshape(-1)
    if not 0 <= y < s.size:
        raise ClassOutOfRange(f"class {y} outside [0, {s.size})")
    return float(s[y] - np.max(np.delete(s, y)))


def runner_up(S, y: int) -> int:
    """First index attaining the largest logit among classes other than ``y``."""
    s = np.asarray(S.data if isinstance(S, Tensor) else S, dtype=np.float64).reshape(-1).copy()
    s[y] = -np.inf
    return int(np.argmax(s))


def margin_gradient(H, y: int, head) -> tuple[float, np.ndarray]:
    """Margin at ``H`` and its gradient with respect to ``H``."""
    logits = _logits_fn(head)
    h0 = _row(H)
    with Tape() as tape:
        h = tape.watch(h0)
        S = logits(h)
        C = S.shape[1]
        if not 0 <= y < C:
            raise ClassOutOfRange(f"class {y} outside [0, {C})")
        j = runner_up(S, y)
        sel = np.zeros((1, C))
        sel[0, y], sel[0, j] = 1.0, -1.0
        g = ad.sum(ad.mul(S, sel))
        grad = ad.backward(g, [h])[h].data.reshape(-1)
    return g.item(), grad


def margin_radius(H, y: int, head) -> RadiusEstimate:
    """First-order robust radius ``g / ||grad g||``, clamped at zero."""
    g, grad = margin_gradient(H, y, head)
    if g <= 0:
        return RadiusEstimate(0.0, "margin_approx")
    norm = float(np.linalg.norm(grad))
    if norm < 1e-12:
        raise ZeroGradient(f"margin {g:.4g} > 0 with gradient norm {norm:.3g}")
    return RadiusEstimate(g / norm, "margin_approx")


def oracle_radius(
    H,
    y: int,
    head,
    n_directions: int = 16,
    tol: float = 1e-4,
    r_max: float = 10.0,
    seed: int = 0,
    n_grid: int = 64,
) -> RadiusEstimate:
    """Search-based robust radius.

    Along the normalised ``-grad g`` direction and ``n_directions - 1`` random
    unit directions, a grid scan over ``[0, r_max]`` brackets the first
    prediction flip and bisection narrows it to ``tol``.  The smallest flip
    distance over all directions is returned; if nothing flips, the value is
    ``r_max`` with ``converged=False``.
    """
    if n_directions < 1 or tol <= 0:
        raise ValueError("need n_directions >= 1 and tol > 0")
    logits = _logits_fn(head)
    h0 = _row(H)
    d = h0.shape[1]

    def flipped(points: np.ndarray) -> np.ndarray:
        return predict(logits(Tensor(points))) != y

    g, grad = margin_gradient(h0, y, head)
    if g <= 0 or flipped(h0)[0]:
        return RadiusEstimate(0.0, "oracle_bisection", True, n_directions, tol)

    rng = np.random.default_rng(seed)
    dirs = []
    norm = np.linalg.norm(grad)
    if norm > 0:
        dirs.append(-grad / norm)
    while len(dirs) < n_directions:
        u = rng.standard_normal(d)
        dirs.append(u / np.linalg.norm(u))

    grid = np.linspace(0.0, r_max, n_grid + 1)[1:]
    best = np.inf
    for u in dirs:
        flips = flipped(h0 + grid[:, None] * u[None, :])
        if not flips.any():
            continue
        k = int(np.argmax(flips))
        lo, hi = (grid[k - 1] if k > 0 else 0.0), grid[k]
        if lo >= best:
            continue
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if flipped(h0 + mid * u[None, :])[0]:
                hi = mid
            else:
                lo = mid
        best = min(best, hi)
    if not np.isfinite(best):
        return RadiusEstimate(float(r_max), "oracle_bisection", False, n_directions, tol)
    return RadiusEstimate(float(best), "oracle_bisection", True, n_directions, tol)


# ---------------------------------------------------------------------------
# energy / margin relations


def binary_energy_of_margin(gamma: float) -> float:
    """Energy of two logits ``(gamma/2, -gamma/2)``, i.e. ``-log(2 cosh(gamma/2))``."""
    a = abs(float(gamma))
    return -(0.5 * a + np.log1p(np.exp(-a)))


def multiclass_energy_bounds(S) -> EnergyBoundReport:
    s = np.asarray(S.data if isinstance(S, Tensor) else S, dtype=np.float64).reshape(-1)
    C = s.size
    if C < 2:
        raise ValueError("need at least two logits")
    top = int(np.argmax(s))
    L = float(s[top])
    others = np.delete(s, top)
    gamma = float(L - others.max())
    e = -L - float(np.log1p(np.exp(others - L).sum()))
    lower = -L - float(np.log1p((C - 1) * np.exp(-gamma)))
    return EnergyBoundReport(L, gamma, C, e, lower, -L, gamma > 0)


# ---------------------------------------------------------------------------
# Lipschitz probes


def _jacobian(fn: Callable[[dict[str, Tensor]], Tensor], point: dict[str, np.ndarray]) -> np.ndarray:
    """Rows = logits, columns = flattened inputs (dict order)."""
    with Tape() as tape:
        leaves = {k: tape.watch(v) for k, v in point.items()}
        S = fn(leaves)
        flat = S.data.reshape(-1)
        rows = []
        for c in range(flat.size):
            sel = np.zeros(S.shape)
            sel.reshape(-1)[c] = 1.0
            g = ad.backward(ad.sum(ad.mul(S, sel)), list(leaves.values()))
            rows.append(np.concatenate([g[t].values for t in leaves.values()]))
    return np.array(rows)


def _unflatten(vec: np.ndarray, like: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for k, v in like.items():
        out[k] = vec[pos : pos + v.size].reshape(v.shape)
        pos += v.size
    return out


def directional_lipschitz(
    fn: Callable[[dict], Tensor],
    point: dict[str, np.ndarray],
    n_samples: int = 32,
    sigma: float = 1e-3,
    seed: int = 0,
) -> float:
    """Max finite-difference gain ``||S(p + sigma u) - S(p)|| / sigma``.

    Directions are ``n_samples`` random unit vectors plus the top right
    singular vector of the tape Jacobian, so the estimate tracks the
    Jacobian spectral norm rather than a typical-direction gain.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    base = fn({k: Tensor(v) for k, v in point.items()}).data
    flat0 = np.concatenate([np.asarray(v, dtype=np.float64).reshape(-1) for v in point.values()])
    rng = np.random.default_rng(seed)
    dirs = [rng.standard_normal(flat0.size) for _ in range(n_samples)]
    J = _jacobian(fn, point)
    _, sv, vt = np.linalg.svd(J, full_matrices=False)
    if sv.size and sv[0] > 0:
        dirs.append(vt[0])
    best = 0.0
    for u in dirs:
        u = u / np.linalg.norm(u)
        moved = fn({k: Tensor(v) for k, v in _unflatten(flat0 + sigma * u, point).items()}).data
        best = max(best, float(np.linalg.norm(moved - base)) / sigma)
    return best


def _model_params(theta: Mapping, phi: Mapping) -> dict[str, np.ndarray]:
    return {**{k: np.asarray(v) for k, v in theta.items()}, **{k: np.asarray(v) for k, v in phi.items()}}


def lipschitz_probe(
    theta: Mapping,
    phi: Mapping,
    g: Graph,
    n_samples: int = 32,
    sigma: float = 1e-3,
    seed: int = 0,
    model: ModelConfig | None = None,
) -> LipschitzReport:
    """Input-space (node features) and parameter-space logit gains of one graph."""
    if n_samples < 10:
        raise ValueError("n_samples must be >= 10")
    batch = GraphBatch.from_graphs([g], *_bcfg(model))
    params = _model_params(theta, phi)

    def f_x(p):
        return classify(params, gin_forward(params, batch, x=p["x"]))

    def f_w(p):
        return classify(p, gin_forward(p, batch))

    L_x = directional_lipschitz(f_x, {"x": batch.x}, n_samples, sigma, seed)
    if L_x < 1e-12:
        raise DegenerateModel("logits do not respond to input perturbations")
    L_w = directional_lipschitz(f_w, params, n_samples, sigma, seed + 1)
    return LipschitzReport(L_x, L_w)


def _bcfg(model: ModelConfig | None) -> tuple[float, str]:
    model = model or ModelConfig()
    return model.gin_eps, model.readout


def param_loss_increase(
    loss_fn: Callable[[dict], Tensor],
    params: dict[str, np.ndarray],
    rho: float,
    n_dirs: int = 8,
    seed: int = 0,
) -> float:
    """``max_u L(w + rho u) - L(w)`` over random unit directions and the loss gradient direction.

    The zero perturbation is always admissible, so the result is ``>= 0``.
    """
    if rho < 0:
        raise ValueError("rho must be non-negative")
    if rho == 0:
        return 0.0
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    flat0 = np.concatenate([v.reshape(-1) for v in params.values()])
    with Tape() as tape:
        leaves = {k: tape.watch(v) for k, v in params.items()}
        loss = loss_fn(leaves)
        grads = ad.backward(loss, list(leaves.values()))
    base = loss.item()
    grad = np.concatenate([grads[t].values for t in leaves.values()])
    rng = np.random.default_rng(seed)
    dirs = [rng.standard_normal(flat0.size) for _ in range(n_dirs)]
    if np.linalg.norm(grad) > 1e-12:
        dirs.append(grad)
    worst = 0.0
    for u in dirs:
        u = u / np.linalg.norm(u)
        trial = {k: Tensor(v) for k, v in _unflatten(flat0 + rho * u, params).items()}
        worst = max(worst, loss_fn(trial).item() - base)
    return worst


def sam_sharpness(
    theta: Mapping,
    phi: Mapping,
    batch,
    rho: float,
    n_dirs: int = 8,
    seed: int = 0,
    model: ModelConfig | None = None,
) -> float:
    """Sampled SAM flatness gap of the ERM loss on ``batch``."""
    if rho < 0:
        raise ValueError("rho must be non-negative")
    if not isinstance(batch, GraphBatch):
        batch = GraphBatch.from_graphs(list(batch), *_bcfg(model))
    return param_loss_increase(lambda p: erm_loss(p, p, batch), _model_params(theta, phi), rho, n_dirs, seed)


# ---------------------------------------------------------------------------
# per-sample distributions


def radius_distribution(
    theta: Mapping,
    phi: Mapping,
    split: Sequence[Graph],
    method: str = "margin_approx",
    model: ModelConfig | None = None,
    **oracle_kw,
) -> list[RadiusEstimate]:
    if not split:
        raise ValueError("empty split")
    if method not in ("margin_approx", "oracle_bisection", "oracle"):
        raise ValueError(f"unknown radius method {method!r}")
    H = _embed(theta, split, model)
    out = []
    for h, g in zip(H, split):
        if method == "margin_approx":
            out.append(margin_radius(h, g.label, phi))
        else:
            out.append(oracle_radius(h, g.label, phi, **oracle_kw))
    return out


def _embed(theta, graphs, model):
    return embed(theta, list(graphs), model or ModelConfig())


def diagnostic_rows(
    theta: Mapping,
    phi: Mapping,
    split_name: str,
    graphs: Sequence[Graph],
    method: str = "margin_approx",
    model: ModelConfig | None = None,
    **oracle_kw,
) -> list[dict]:
    """CSV-ready rows ``{sample_id, split, method, radius, margin, energy}``."""
    H = _embed(theta, graphs, model)
    S = classify(phi, H).data
    radii = radius_distribution(theta, phi, graphs, method, model, **oracle_kw)
    return [
        {
            "sample_id": i,
            "split": split_name,
            "method": r.method,
            "radius": r.value,
            "margin": margin(S[i], g.label),
            "energy": energy(S[i]),
        }
        for i, (g, r) in enumerate(zip(graphs, radii))
    ]
