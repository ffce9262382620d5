"""Self-checks run by ``verify``: gradients, energy bounds, radius exactness."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cvae import CvaeConfig, cvae_loss, init_cvae
from .gnn import GraphBatch, ModelConfig, classify, erm_loss, init_model
from .landscape import binary_energy_of_margin, energy_tensor, margin_radius, multiclass_energy_bounds, oracle_radius
from .pipeline import calibration_loss
from .syngraph import make_graph

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


# ---------------------------------------------------------------------------
# gradients


def _away_from_zero(rng, shape, lo=0.2, hi=1.5):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    """One scalar-valued probe per registered primitive."""
    A = rng.standard_normal((3, 4))
    B = rng.standard_normal((4, 2))
    W = rng.standard_normal((3, 4))
    noise = rng.standard_normal((3, 4))
    x34 = rng.standard_normal((3, 4))
    cases = {
        "matmul": (lambda x: ad.sum(ad.matmul(x, B)), A),
        "add": (lambda x: ad.sum(ad.mul(ad.add(x, W), ad.add(x, W))), x34),
        "sub": (lambda x: ad.sum(ad.mul(ad.sub(x, W), W)), x34),
        "mul": (lambda x: ad.sum(ad.mul(x, x)), x34),
        "add_row": (lambda x: ad.sq_norm(ad.add_row(W, x)), rng.standard_normal(4)),
        "relu": (lambda x: ad.sum(ad.mul(ad.relu(x), W)), _away_from_zero(rng, (3, 4))),
        "tanh": (lambda x: ad.sum(ad.tanh(x)), x34),
        "exp": (lambda x: ad.sum(ad.exp(x)), x34),
        "log": (lambda x: ad.sum(ad.log(x)), rng.uniform(0.5, 2.0, (3, 4))),
        "logsumexp": (lambda x: ad.sum(ad.mul(ad.logsumexp_rows(x), ad.logsumexp_rows(x))), x34),
        "sum": (lambda x: ad.sq_norm(ad.sum(x, axis=0)), x34),
        "mean": (lambda x: ad.sq_norm(ad.mean(x, axis=1)), x34),
        "concat": (lambda x: ad.sum(ad.mul(ad.concat([x, W]), ad.concat([W, x]))), x34),
        "gather_rows": (lambda x: ad.sq_norm(ad.gather_rows(x, np.array([0, 2, 2]))), x34),
        "sq_norm": (lambda x: ad.sq_norm(x), x34),
        "scale": (lambda x: ad.sum(ad.mul(ad.scale(x, -2.5), W)), x34),
        "softmax_ce": (lambda x: ad.softmax_cross_entropy(x, np.array([0, 3, 1])), x34),
        "reparameterize": (lambda x: ad.sq_norm(ad.reparameterize(x, ad.scale(x, 0.3), noise)), x34),
    }
    missing = set(ad.OP_CATALOG) - set(cases)
    if missing:
        raise AssertionError(f"no gradient probe for {sorted(missing)}")
    return cases


def _tiny_batch(rng, d_in: int = 4) -> GraphBatch:
    graphs = [make_graph("path", 6 + i, i % 3, d_in, rng) for i in range(4)]
    return GraphBatch.from_graphs(graphs)


def composite_cases(seed: int = 0) -> dict[str, Callable[[], float]]:
    """Composite objectives; each returns the relative error when called."""
    rng = np.random.default_rng(seed)
    model = ModelConfig(d_h=8, n_layers=2)
    theta, phi = init_model(4, 3, model, seed)
    batch = _tiny_batch(rng)
    cv = init_cvae(8, 3, CvaeConfig(d_z=3, hidden=6), rng)
    H = rng.standard_normal((5, 8))
    y = np.array([0, 1, 2, 0, 1])
    noise = rng.standard_normal((5, 3))
    H_pood = rng.standard_normal((5, 8))

    def erm():
        return ad.finite_diff_check_params(lambda p: erm_loss(p, p, batch), {**theta, **phi}, max_coords=12, seed=seed)

    def cvae():
        return ad.finite_diff_check_params(lambda p: cvae_loss(p, H, y, noise), cv, max_coords=12, seed=seed)

    def calibration():
        f = lambda p: calibration_loss(p, H, H_pood, y, 0.1)  # noqa: E731
        return ad.finite_diff_check_params(f, phi, max_coords=12, seed=seed)

    def calibration_pair():
        f = lambda p: calibration_loss(p, H, H_pood, y, 0.1, pairing="pair")  # noqa: E731
        return ad.finite_diff_check_params(f, phi, max_coords=12, seed=seed)

    def energy_of_latent():
        from .cvae import decode

        z = rng.standard_normal((4, 3))
        yz = np.array([0, 1, 2, 1])
        return ad.finite_diff_check(lambda zt: ad.sum(energy_tensor(classify(phi, decode(cv, zt, yz)))), z)

    return {
        "erm_loss": erm,
        "cvae_loss": cvae,
        "calibration_loss": calibration,
        "calibration_loss_pair": calibration_pair,
        "energy_wrt_latent": energy_of_latent,
    }


def check_gradients(seed: int = 0, tol: float = GRAD_TOL) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, (fn, x) in primitive_cases(rng).items():
        err = ad.finite_diff_check(fn, x)
        out.append(CheckResult(f"grad/{name}", err < tol, f"max rel err {err:.2e}"))
    for name, run in composite_cases(seed).items():
        err = run()
        out.append(CheckResult(f"grad/{name}", err < tol, f"max rel err {err:.2e}"))
    return out


# ---------------------------------------------------------------------------
# energy bounds and radius exactness


def random_logits(rng: np.random.Generator, n: int, c_lo: int = 2, c_hi: int = 10) -> list[np.ndarray]:
    out = []
    for _ in range(n):
        C = int(rng.integers(c_lo, c_hi + 1))
        scale = 10 ** rng.uniform(-2, 1.5)
        out.append(rng.standard_normal(C) * scale)
    return out


def check_energy_sandwich(n: int = 10_000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = sum(not multiclass_energy_bounds(S).holds for S in random_logits(rng, n))
    return CheckResult("energy/sandwich", bad == 0, f"{bad} violations in {n} logit vectors")


def check_binary_monotone(n_grid: int = 2001) -> CheckResult:
    gammas = np.linspace(0.0, 20.0, n_grid)
    e = np.array([binary_energy_of_margin(g) for g in gammas])
    ok = bool(np.all(np.diff(e) < 0))
    return CheckResult("energy/binary_monotone", ok, f"strictly decreasing on {n_grid} points in [0, 20]: {ok}")


def affine_head(W: np.ndarray, b: np.ndarray):
    return lambda H: ad.add_row(ad.matmul(H if isinstance(H, Tensor) else Tensor(np.atleast_2d(H)), W), b)


def check_affine_radius(n: int = 100, seed: int = 0, tol: float = 1e-4, r_max: float = 100.0) -> CheckResult:
    """Linearised radius equals the searched radius for two-class affine heads.

    ``r_max`` is widened past the oracle default so every boundary is in range.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    bad = 0
    for i in range(n):
        d = int(rng.integers(2, 9))
        W = rng.standard_normal((d, 2))
        b = rng.standard_normal(2)
        head = affine_head(W, b)
        H = rng.standard_normal(d)
        S = classify_affine(W, b, H)
        y = int(np.argmax(S))
        approx = margin_radius(H, y, head).value
        est = oracle_radius(H, y, head, tol=tol, r_max=r_max, seed=i)
        exact = est.value
        err = abs(approx - exact)
        worst = max(worst, err)
        bad += (not est.converged) or err > tol + 1e-6 * exact
    return CheckResult("radius/affine_exact", bad == 0, f"{bad}/{n} outside tolerance; worst abs err {worst:.2e}")


def classify_affine(W, b, H) -> np.ndarray:
    return np.asarray(H) @ W + b


def run_all(seed: int = 0) -> list[CheckResult]:
    t0 = time.perf_counter()
    results = check_gradients(seed)
    results.append(check_energy_sandwich(seed=seed))
    results.append(check_binary_monotone())
    results.append(check_affine_radius(seed=seed))
    results.append(CheckResult("timing", True, f"{time.perf_counter() - t0:.1f} s"))
    return results
