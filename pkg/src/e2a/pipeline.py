"""Energy-guided dual-stage augmentation: modeling, exploration, calibration.

Every epoch runs the ERM update and fits the cVAE on the detached batch
embeddings.  In the last ``calib_epochs`` epochs each mini-batch additionally
draws a class-balanced pseudo batch from the cVAE prior, pushes its latents
uphill in energy, decodes them into pseudo-OOD embeddings, and adds the
calibration loss to the ERM loss before the optimizer step.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .cvae import CvaeConfig, cvae_step, decode, init_cvae
from .errors import ConfigInvalid, NonFiniteValue, UnknownVariant
from .gnn import (
    GraphBatch,
    ModelConfig,
    Params,
    TrainConfig,
    TrainResult,
    classify,
    config_hash,
    embed,
    gin_forward,
    init_model,
    save_checkpoint,
    train_erm,
)
from .landscape import energy, energy_tensor
from .syngraph import GraphDataset

VARIANTS = ("erm", "sam_star", "no_energy", "no_ce", "full")


@dataclass
class E2AConfig:
    epochs: int = 100
    calib_epochs: int = 20
    steps: int = 5  # ascent iterations T
    eta: float = 0.1
    lam: float = 0.1
    lam2: float = 0.01  # second reported coefficient; no term uses it
    pseudo_batch: int | None = None  # defaults to the training batch size
    calibrate_theta: bool = True
    energy_pairing: str = "mean"  # or "pair"
    calibration_step: str = "separate"  # or "joint": one step on ERM + calibration loss
    variant: str = "full"
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    cvae: CvaeConfig = field(default_factory=CvaeConfig)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise UnknownVariant(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.epochs < 0 or self.calib_epochs < 0 or self.calib_epochs > self.epochs:
            raise ConfigInvalid("need 0 <= calib_epochs <= epochs")
        if self.steps < 1 or self.eta < 0 or self.lam < 0:
            raise ConfigInvalid("need steps >= 1, eta >= 0, lam >= 0")
        if self.calibration_step not in ("separate", "joint"):
            raise ConfigInvalid(f"calibration_step must be 'separate' or 'joint', got {self.calibration_step!r}")
        if self.energy_pairing not in ("mean", "pair"):
            raise ConfigInvalid(f"energy_pairing must be 'mean' or 'pair', got {self.energy_pairing!r}")

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.lr, self.batch_size, self.seed)


@dataclass
class EnergyTrace:
    energies: np.ndarray  # (T + 1, n): row t holds e_t for every trajectory
    y: np.ndarray

    @property
    def delta(self) -> np.ndarray:
        return self.energies[-1] - self.energies[0]


def _stream(seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), k]))


def _decoder_fn(decoder) -> Callable:
    if callable(decoder):
        return decoder
    return lambda z, y: decode(decoder, z, y)


def _head_fn(head) -> Callable:
    if callable(head):
        return head
    return lambda H: classify(head, H)


# ---------------------------------------------------------------------------
# exploration


def explore(decoder, head, y, z0, T: int, eta: float) -> tuple[np.ndarray, EnergyTrace]:
    """Gradient ascent on ``E(head(decoder(z, y)))`` in latent space.

    Both networks are used as constants; only ``z`` is watched.  Rows of
    ``z0`` are independent trajectories because the energy of one row does
    not depend on the others.
    """
    dec, f = _decoder_fn(decoder), _head_fn(head)
    z = np.atleast_2d(np.asarray(z0, dtype=np.float64)).copy()
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (z.shape[0],))
    energies = []
    for _ in range(T):
        with Tape() as tape:
            zt = tape.watch(z)
            e = energy_tensor(f(dec(zt, y)))
            grad = ad.backward(ad.sum(e), [zt])[zt].data
        energies.append(e.numpy())
        z = z + eta * grad
        if not np.isfinite(z).all():
            raise NonFiniteValue("latent ascent diverged; reduce eta")
    energies.append(energy(f(dec(Tensor(z), y))))
    return z, EnergyTrace(np.array(energies).reshape(T + 1, -1), np.asarray(y).copy())


def perturb_embeddings(head, H: np.ndarray, T: int, eta: float) -> np.ndarray:
    """Energy ascent directly on embeddings (the SAM-style baseline)."""
    f = _head_fn(head)
    h = np.atleast_2d(np.asarray(H, dtype=np.float64)).copy()
    for _ in range(T):
        with Tape() as tape:
            ht = tape.watch(h)
            grad = ad.backward(ad.sum(energy_tensor(f(ht))), [ht])[ht].data
        h = h + eta * grad
    return h


# ---------------------------------------------------------------------------
# calibration objective


def calibration_loss(
    phi: Mapping,
    H_id,
    H_pood,
    y_pood,
    lam: float,
    pairing: str = "mean",
    use_energy: bool = True,
) -> Tensor:
    """``(e_ood - e_id)^2 + lam * CE(head(H_pood), y_pood)``.

    With ``pairing="mean"`` the energies are batch means before squaring;
    ``"pair"`` averages squared differences of aligned rows.  ``H_pood`` is
    treated as a constant.
    """
    H_id = H_id if isinstance(H_id, Tensor) else Tensor(np.atleast_2d(H_id))
    pood = np.atleast_2d(H_pood.data if isinstance(H_pood, Tensor) else np.asarray(H_pood, dtype=np.float64))
    S_pood = classify(phi, pood)
    terms = []
    if use_energy:
        e_id = energy_tensor(classify(phi, H_id))
        e_ood = energy_tensor(S_pood)
        if pairing == "mean":
            d = ad.mean(e_ood) - ad.mean(e_id)
            terms.append(ad.mul(d, d))
        elif pairing == "pair":
            d = e_ood - e_id
            terms.append(ad.mean(ad.mul(d, d)))
        else:
            raise ConfigInvalid(f"unknown pairing {pairing!r}")
    if lam > 0:
        terms.append(ad.scale(ad.softmax_cross_entropy(S_pood, y_pood), lam))
    if not terms:
        return ad.scale(ad.sum(S_pood), 0.0)
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


# ---------------------------------------------------------------------------
# pipeline


class _E2AHooks:
    def __init__(self, cfg: E2AConfig, ds: GraphDataset, metrics_path: Path | None = None):
        self.cfg = cfg
        self.C = ds.n_classes
        d_h = cfg.model.d_h
        self.cvae = init_cvae(d_h, self.C, cfg.cvae, _stream(cfg.seed, 2))
        self.cvae_state = ad.adam_init(self.cvae)
        self.cvae_rng = _stream(cfg.seed, 3)
        self.pseudo_rng = _stream(cfg.seed, 4)
        self.first_calib = cfg.epochs - cfg.calib_epochs + 1
        self.calib_state: ad.AdamState | None = None
        self.n_pseudo = cfg.pseudo_batch or cfg.batch_size
        self.metrics: list[dict] = []
        self.metrics_path = metrics_path
        self._reset_epoch()
        held = _stream(cfg.seed, 5)
        self.heldout_y = np.arange(self.n_pseudo) % self.C
        self.heldout_z = held.standard_normal((self.n_pseudo, cfg.cvae.d_z))
        self.heldout_graphs = ds["train"][: self.n_pseudo * 2]

    def _reset_epoch(self):
        self.acc = {"cvae_loss": [], "calib_loss": [], "e_id": [], "e_pood_before": [], "e_pood": [], "delta_e": []}

    def calibrating(self, epoch: int) -> bool:
        return self.cfg.variant != "erm" and self.cfg.calib_epochs > 0 and epoch >= self.first_calib

    def _pseudo_batch(self, phi_now: Mapping) -> tuple[np.ndarray, np.ndarray, EnergyTrace]:
        y = self.pseudo_rng.permutation(np.arange(self.n_pseudo) % self.C)
        z0 = self.pseudo_rng.standard_normal((self.n_pseudo, self.cfg.cvae.d_z))
        zT, trace = explore(self.cvae, phi_now, y, z0, self.cfg.steps, self.cfg.eta)
        return decode(self.cvae, zT, y).numpy(), y, trace

    def _calibration_term(self, batch: GraphBatch, H: Tensor, phi_leaves: Mapping) -> Tensor:
        cfg = self.cfg
        phi_now = {k: v.data for k, v in phi_leaves.items()}
        H_id = H if cfg.calibrate_theta else H.detach()
        if cfg.variant == "sam_star":
            H_pood = perturb_embeddings(phi_now, H.data, cfg.steps, cfg.eta)
            y_pood = batch.y
            self.acc["e_pood_before"].append(float(np.mean(energy(classify(phi_now, H.data)))))
        else:
            H_pood, y_pood, trace = self._pseudo_batch(phi_now)
            self.acc["e_pood_before"].append(float(trace.energies[0].mean()))
            self.acc["delta_e"].append(float(trace.delta.mean()))
        lam = 0.0 if cfg.variant == "no_ce" else cfg.lam
        use_energy = cfg.variant != "no_energy"
        loss = calibration_loss(phi_leaves, H_id, H_pood, y_pood, lam, cfg.energy_pairing, use_energy)
        self.acc["calib_loss"].append(loss.item())
        self.acc["e_id"].append(float(np.mean(energy(classify(phi_now, H.data)))))
        self.acc["e_pood"].append(float(np.mean(energy(classify(phi_now, H_pood)))))
        return loss

    def extra_loss(self, epoch, batch: GraphBatch, H: Tensor, leaves):
        if self.cfg.calibration_step != "joint" or not self.calibrating(epoch):
            return None
        return self._calibration_term(batch, H, {k: v for k, v in leaves.items() if k.startswith("mlp.")})

    def after_step(self, epoch, batch: GraphBatch, H: np.ndarray, params: Params):
        self.cvae, self.cvae_state, loss = cvae_step(self.cvae, self.cvae_state, H, batch.y, self.cvae_rng, self.cfg.cvae.lr)
        self.acc["cvae_loss"].append(loss)
        if self.cfg.calibration_step != "separate" or not self.calibrating(epoch):
            return None
        # second update on a fresh embedding of the same batch, with its own optimizer state
        # without the energy term nothing reaches the encoder
        with_theta = self.cfg.calibrate_theta and self.cfg.variant != "no_energy"
        keys = [k for k in params if with_theta or k.startswith("mlp.")]
        if self.calib_state is None:
            self.calib_state = ad.adam_init({k: params[k] for k in keys})
        with Tape() as tape:
            leaves = {k: tape.watch(params[k]) for k in keys}
            theta = {k: leaves.get(k, params[k]) for k in params if k.startswith("gin.")}
            H_new = gin_forward(theta, batch)
            loss = self._calibration_term(batch, H_new, {k: leaves[k] for k in keys if k.startswith("mlp.")})
            grads = ad.backward(loss, list(leaves.values()))
        upd, self.calib_state = ad.adam_step(
            {k: params[k] for k in keys}, {k: grads[t] for k, t in leaves.items()}, self.calib_state, self.cfg.lr
        )
        return {**params, **upd}

    def heldout_gap(self, theta: Params, phi: Params) -> float:
        """``|mean e_pood - mean e_id|`` on a fixed latent batch and fixed training graphs."""
        zT, _ = explore(self.cvae, phi, self.heldout_y, self.heldout_z, self.cfg.steps, self.cfg.eta)
        e_pood = energy(classify(phi, decode(self.cvae, zT, self.heldout_y)))
        e_id = energy(classify(phi, embed(theta, self.heldout_graphs, self.cfg.model)))
        return float(abs(np.mean(e_pood) - np.mean(e_id)))

    def end_epoch(self, epoch, record, theta, phi):
        cal = self.calibrating(epoch)
        m = {
            "phase": "calibration" if cal else "modeling",
            "epoch": epoch,
            "seed": self.cfg.seed,
            "variant": self.cfg.variant,
            "losses": {
                "erm": record["train_loss"],
                "cvae": float(np.mean(self.acc["cvae_loss"])) if self.acc["cvae_loss"] else None,
                "calibration": float(np.mean(self.acc["calib_loss"])) if self.acc["calib_loss"] else None,
            },
            "accuracies": {k[:-4]: v for k, v in record.items() if k.endswith("_acc")},
            "mean_energy_id": float(np.mean(self.acc["e_id"])) if self.acc["e_id"] else None,
            "mean_energy_pood": float(np.mean(self.acc["e_pood"])) if self.acc["e_pood"] else None,
            "mean_energy_pood_before": float(np.mean(self.acc["e_pood_before"])) if self.acc["e_pood_before"] else None,
            "delta_e": float(np.mean(self.acc["delta_e"])) if self.acc["delta_e"] else None,
            "delta_e_batches": list(self.acc["delta_e"]),
            "heldout_gap": self.heldout_gap(theta, phi) if cal and self.cfg.variant != "sam_star" else None,
        }
        self.metrics.append(m)
        if self.metrics_path is not None:
            with open(self.metrics_path, "a") as fh:
                fh.write(json.dumps(m, sort_keys=True) + "\n")
        self._reset_epoch()


@dataclass
class E2AResult:
    theta: Params
    phi: Params
    cvae: Params
    trace: list[dict]
    metrics: list[dict]
    checkpoints: dict[int, tuple[Params, Params]]
    train_seconds: list[float]


def run_e2a(
    config: E2AConfig,
    dataset: GraphDataset,
    out_dir=None,
    keep_checkpoints: Sequence[int] | None = (),
    init: tuple[Params, Params] | None = None,
) -> E2AResult:
    """Train with the augmentation schedule; fully determined by ``config.seed``.

    With ``out_dir`` a checkpoint per epoch and ``metrics.jsonl`` are written
    as training proceeds, so a failure leaves the completed epochs on disk.
    """
    config.validate()
    theta, phi = init or init_model(dataset.d_in, dataset.n_classes, config.model, config.seed)
    metrics_path = None
    ckpt_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        metrics_path.write_text("")
        ckpt_dir = out_dir / "checkpoints"
    hooks = _E2AHooks(config, dataset, metrics_path)
    res: TrainResult = train_erm(
        theta,
        phi,
        dataset,
        config.train_config(),
        config.model,
        hooks=None if config.variant == "erm" else hooks,
        checkpoint_dir=ckpt_dir,
        keep_checkpoints=keep_checkpoints,
    )
    if out_dir is not None:
        save_checkpoint(
            out_dir / "final.e2am",
            res.theta,
            res.phi,
            hooks.cvae,
            meta={"epoch": config.epochs, "seed": config.seed, "config_hash": config_hash(asdict(config))},
        )
    return E2AResult(res.theta, res.phi, hooks.cvae, res.trace, hooks.metrics, res.checkpoints, res.train_seconds)


def ablate(variant: str, config: E2AConfig, dataset: GraphDataset, seeds: Sequence[int] = (0, 1, 2)) -> list[dict]:
    """One metrics row per seed: ``{variant, seed, id_acc, ood_acc}``."""
    if variant not in VARIANTS:
        raise UnknownVariant(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    rows = []
    for seed in seeds:
        res = run_e2a(replace(config, variant=variant, seed=seed), dataset)
        last = res.trace[-1]
        rows.append({"variant": variant, "seed": seed, "id_acc": last["id_test_acc"], "ood_acc": last["ood_test_acc"]})
    return rows
