"""Experiment harness: run configuration, density curves, reports, timing."""

from __future__ import annotations

import dataclasses
import os
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml
from scipy.integrate import trapezoid

from .cvae import CvaeConfig
from .errors import ConfigInvalid, MissingCheckpoint, TooFewSamples, ZeroVariance
from .gnn import ModelConfig, TrainConfig, chunked_batches, classify, config_hash, embed, evaluate, init_model, load_checkpoint, train_erm
from .landscape import energy, radius_distribution
from .pipeline import E2AConfig, run_e2a
from .syngraph import SPLITS, Graph, GraphDataset, MotifConfig

OUT_ENV = "E2A_OUT_DIR"

# ---------------------------------------------------------------------------
# configuration


@dataclass
class E2ASection:
    epochs: int = 100
    calib_epochs: int = 20
    steps: int = 5
    eta: float = 0.1
    lam: float = 0.1
    lam2: float = 0.01
    pseudo_batch: int | None = None
    calibrate_theta: bool = True
    energy_pairing: str = "mean"
    calibration_step: str = "separate"
    lr: float = 1e-3
    batch_size: int = 32


@dataclass
class DiagnosticsConfig:
    radius_method: str = "margin_approx"
    radius_epochs: list = field(default_factory=lambda: [10, 50, 100])
    n_directions: int = 16
    oracle_tol: float = 1e-4
    max_samples: int = 300
    kde_points: int = 256


@dataclass
class SweepConfig:
    steps: list = field(default_factory=lambda: [1, 3, 5, 10])
    eta: list = field(default_factory=lambda: [0.01, 0.1, 0.5, 1.0])
    lam: list = field(default_factory=lambda: [0.0, 0.01, 0.1, 1.0])
    bench_grid: list = field(default_factory=lambda: [[1, 0.1], [5, 0.1], [10, 0.1], [10, 1.0]])
    bench_epochs: int = 10
    bench_rounds: int = 3


def _default_out() -> str:
    return os.environ.get(OUT_ENV, "runs")


@dataclass
class RunConfig:
    dataset: MotifConfig = field(default_factory=lambda: MotifConfig(shift="size"))
    model: ModelConfig = field(default_factory=ModelConfig)
    cvae: CvaeConfig = field(default_factory=CvaeConfig)
    e2a: E2ASection = field(default_factory=E2ASection)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    out_dir: str = field(default_factory=_default_out)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def hash(self) -> str:
        """Content hash; the output location does not take part."""
        d = self.to_dict()
        d.pop("out_dir")
        return config_hash(d)

    def e2a_config(self, seed: int, variant: str = "full", **overrides) -> E2AConfig:
        cfg = E2AConfig(**asdict(self.e2a), variant=variant, seed=int(seed), model=self.model, cvae=self.cvae)
        return dataclasses.replace(cfg, **overrides)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.e2a.epochs, self.e2a.lr, self.e2a.batch_size, int(seed))


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _check_type(value, default, where: str):
    if value is None or default is None:
        return value
    if isinstance(value, dict) and where.endswith(".counts"):
        return value  # per-split counts
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigInvalid(f"{where}: expected a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigInvalid(f"{where}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigInvalid(f"{where}: expected a number, got {value!r}")
        return float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigInvalid(f"{where}: expected a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigInvalid(f"{where}: expected a list, got {value!r}")
    return value


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, Mapping):
        raise ConfigInvalid(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigInvalid(f"{where}: unknown key(s) {', '.join(unknown)}")
    base = cls()
    kwargs = {}
    for k, v in data.items():
        kwargs[k] = _check_type(v, getattr(base, k), f"{where}.{k}")
    return dataclasses.replace(base, **kwargs)


_SECTIONS = {
    "dataset": MotifConfig,
    "model": ModelConfig,
    "cvae": CvaeConfig,
    "e2a": E2ASection,
    "diagnostics": DiagnosticsConfig,
    "sweep": SweepConfig,
}


def config_from_dict(data: Mapping | None) -> RunConfig:
    data = dict(data or {})
    allowed = set(_SECTIONS) | {"seeds", "out_dir"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigInvalid(f"unknown top-level key(s) {', '.join(unknown)}")
    kwargs = {name: _build(cls, data.get(name), name) for name, cls in _SECTIONS.items()}
    if "dataset" not in data or "shift" not in (data["dataset"] or {}):
        kwargs["dataset"] = dataclasses.replace(kwargs["dataset"], shift="size")
    cfg = RunConfig(**kwargs)
    if "seeds" in data:
        seeds = data["seeds"]
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise ConfigInvalid("seeds must be a non-empty list of integers")
        cfg.seeds = list(seeds)
    if "out_dir" in data:
        cfg.out_dir = str(data["out_dir"])
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    e = cfg.e2a
    if e.epochs < 1:
        raise ConfigInvalid("e2a.epochs must be >= 1")
    if not 0 <= e.calib_epochs <= e.epochs:
        raise ConfigInvalid("need 0 <= e2a.calib_epochs <= e2a.epochs")
    if e.steps < 1 or e.eta < 0 or e.lam < 0 or e.lr <= 0 or e.batch_size < 1:
        raise ConfigInvalid("need steps >= 1, eta >= 0, lam >= 0, lr > 0, batch_size >= 1")
    if cfg.model.d_h < 1 or cfg.model.n_layers < 1 or cfg.model.readout != "sum":
        raise ConfigInvalid("model needs d_h >= 1, n_layers >= 1 and sum readout")
    if not 0 < cfg.cvae.d_z < cfg.model.d_h:
        raise ConfigInvalid("cvae.d_z must lie in (0, model.d_h)")
    if cfg.diagnostics.radius_method not in ("margin_approx", "oracle_bisection"):
        raise ConfigInvalid(f"unknown radius method {cfg.diagnostics.radius_method!r}")
    cfg.e2a_config(cfg.seeds[0]).validate()


def parse_override(text: str) -> tuple[list[str], object]:
    """``"e2a.eta=0.5"`` -> ``(["e2a", "eta"], 0.5)``; the value is parsed as YAML."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigInvalid(f"override must look like section.key=value, got {text!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"cannot parse value in {text!r}: {exc}") from exc
    return key.strip().split("."), value


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigInvalid(f"{path}: top level must be a mapping")
    for text in overrides:
        keys, value = parse_override(text)
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigInvalid(f"override {text!r} descends into a scalar")
        node[keys[-1]] = value
    return config_from_dict(data)


def dump_config(cfg: RunConfig, path) -> None:
    d = cfg.to_dict()
    d["hash"] = cfg.hash()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(d, sort_keys=True))


# ---------------------------------------------------------------------------
# kernel density


@dataclass
class KdeCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    n_samples: int

    def integral(self) -> float:
        return float(trapezoid(self.density, self.grid))

    def rows(self, **extra) -> list[dict]:
        return [{**extra, "x": float(x), "density": float(d)} for x, d in zip(self.grid, self.density)]


def silverman_bandwidth(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(1.06 * v.std(ddof=1) * v.size ** (-0.2))


def default_grid(values, bandwidth: float, n: int = 256) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return np.linspace(v.min() - 4 * bandwidth, v.max() + 4 * bandwidth, n)


def kde(values, grid=None, bandwidth: float | None = None, n_grid: int = 256) -> KdeCurve:
    """Gaussian kernel density; Silverman bandwidth unless one is given."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        raise TooFewSamples(f"need at least 2 values, got {v.size}")
    if bandwidth is None:
        bandwidth = silverman_bandwidth(v)
        if not bandwidth > 0:
            warnings.warn("sample has zero variance; using bandwidth 1e-3", ZeroVariance, stacklevel=2)
            bandwidth = 1e-3
    elif bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    grid = default_grid(v, bandwidth, n_grid) if grid is None else np.asarray(grid, dtype=np.float64)
    density = np.zeros_like(grid)
    for start in range(0, v.size, 2048):
        u = (grid[:, None] - v[None, start : start + 2048]) / bandwidth
        density += np.exp(-0.5 * u * u).sum(axis=1)
    density /= v.size * bandwidth * np.sqrt(2 * np.pi)
    return KdeCurve(grid, density, float(bandwidth), int(v.size))


def overlap_coefficient(a, b, n_grid: int = 512) -> float:
    """``integral of min(p_a, p_b)`` for the two sample sets' KDEs on a shared grid."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ha, hb = (silverman_bandwidth(x) if np.std(x) > 0 else 1e-3 for x in (a, b))
    lo = min(a.min() - 4 * ha, b.min() - 4 * hb)
    hi = max(a.max() + 4 * ha, b.max() + 4 * hb)
    grid = np.linspace(lo, hi, n_grid)
    pa = kde(a, grid, ha).density
    pb = kde(b, grid, hb).density
    return float(trapezoid(np.minimum(pa, pb), grid))


# ---------------------------------------------------------------------------
# reports


@dataclass
class EnergyShiftReport:
    curves: dict[str, KdeCurve]
    means: dict[str, float]

    @property
    def order(self) -> list[str]:
        return sorted(self.means, key=self.means.get)


def split_energies(theta, phi, dataset: GraphDataset, model: ModelConfig | None = None) -> dict[str, np.ndarray]:
    return {s: energy(classify(phi, embed(theta, dataset[s], model))) for s in SPLITS}


def energy_shift_report(theta, phi, dataset: GraphDataset, model: ModelConfig | None = None, n_grid: int = 256) -> EnergyShiftReport:
    """Energy KDE per split on one shared grid, with the split means."""
    energies = split_energies(theta, phi, dataset, model)
    pooled = np.concatenate(list(energies.values()))
    h = max((silverman_bandwidth(e) for e in energies.values() if np.std(e) > 0), default=1e-3)
    grid = default_grid(pooled, h, n_grid)
    curves = {}
    for s, e in energies.items():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ZeroVariance)
            curves[s] = kde(e, grid)
    return EnergyShiftReport(curves, {s: float(np.mean(e)) for s, e in energies.items()})


@dataclass
class RadiusTraceReport:
    epochs: list[int]
    medians: list[float]
    curves: list[KdeCurve]


def _checkpoint_paths(source, epochs: Sequence[int] | None) -> list[tuple[int, Path]]:
    if isinstance(source, (str, Path)) and Path(source).is_dir():
        found = {int(p.stem.split("_")[1]): p for p in Path(source).glob("epoch_*.e2am")}
        if epochs is None:
            epochs = sorted(found)
        missing = [e for e in epochs if e not in found]
        if missing:
            raise MissingCheckpoint(f"{source}: no checkpoint for epoch(s) {missing}")
        out = [(e, found[e]) for e in epochs]
    else:
        out = []
        for i, p in enumerate(source):
            p = Path(p)
            if not p.exists():
                raise MissingCheckpoint(f"{p} does not exist")
            out.append((i, p))
    if len(out) < 2:
        raise MissingCheckpoint("need at least two checkpoints")
    return out


def radius_trace_report(
    checkpoints,
    graphs: Sequence[Graph],
    method: str = "margin_approx",
    model: ModelConfig | None = None,
    epochs: Sequence[int] | None = None,
    **oracle_kw,
) -> RadiusTraceReport:
    """Radius KDE and median per checkpoint.

    ``checkpoints`` is a directory of ``epoch_XXXX.e2am`` files (optionally
    restricted to ``epochs``) or an explicit list of checkpoint paths.
    """
    rep = RadiusTraceReport([], [], [])
    for epoch, path in _checkpoint_paths(checkpoints, epochs):
        theta, phi, _, meta = load_checkpoint(path)
        r = np.array([est.value for est in radius_distribution(theta, phi, graphs, method, model, **oracle_kw)])
        rep.epochs.append(int(meta.get("epoch", epoch)))
        rep.medians.append(float(np.median(r)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ZeroVariance)
            rep.curves.append(kde(r))
    return rep


# ---------------------------------------------------------------------------
# timing


def _timed_eval(theta, phi, batches, model) -> float:
    t0 = time.perf_counter()
    for b in batches:
        evaluate(theta, phi, b, model)
    return time.perf_counter() - t0


def bench_timing(
    grid: Sequence[tuple[int, float]],
    dataset: GraphDataset,
    base: E2AConfig | None = None,
    epochs: int = 10,
    rounds: int = 3,
    infer_repeats: int = 20,
) -> list[dict]:
    """Train ms/epoch and inference ms per test pass; the first row is plain ERM.

    Each setting runs ``rounds + 1`` times and the first (warm-up) round is
    dropped.  Calibration covers the same fraction of the schedule as in
    ``base``.  Inference per round is the fastest of ``infer_repeats``
    passes over both test splits.  Values are medians over rounds.
    """
    base = base or E2AConfig()
    frac = base.calib_epochs / base.epochs if base.epochs else 0.0
    calib = max(1, round(frac * epochs)) if frac > 0 else 0
    model = base.model
    test_batches = [chunked_batches(dataset[s], model) for s in ("id_test", "ood_test")]
    settings = [("erm", 0, 0.0)] + [("e2a", int(T), float(eta)) for T, eta in grid]
    rows = []
    for kind, T, eta in settings:
        train_ms, infer_ms = [], []
        for r in range(rounds + 1):
            if kind == "erm":
                theta, phi = init_model(dataset.d_in, dataset.n_classes, model, base.seed)
                res = train_erm(theta, phi, dataset, TrainConfig(epochs, base.lr, base.batch_size, base.seed), model, keep_checkpoints=(), evaluate_every=epochs)
                theta, phi, secs = res.theta, res.phi, res.train_seconds
            else:
                cfg = dataclasses.replace(base, epochs=epochs, calib_epochs=calib, steps=T, eta=eta, variant="full")
                res = run_e2a(cfg, dataset)
                theta, phi, secs = res.theta, res.phi, res.train_seconds
            t_inf = min(_timed_eval(theta, phi, test_batches, model) for _ in range(infer_repeats))
            if r == 0:
                continue
            train_ms.append(1e3 * float(np.mean(secs)))
            infer_ms.append(1e3 * t_inf)
        rows.append({"method": kind, "T": T, "eta": eta, "train_ms": float(np.median(train_ms)), "infer_ms": float(np.median(infer_ms))})
    return rows
