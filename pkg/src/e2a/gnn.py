"""GIN encoder, MLP head, and the mini-batch ERM training loop.

Parameters are plain ``dict[str, ndarray]``; forward functions accept either
arrays (constants) or tape-watched tensors under the same keys, so one code
path serves inference and differentiation.  Encoder keys start with
``gin.``; head keys start with ``mlp.``.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .envelope import pack_array, pack_json, read_envelope, unpack_array, unpack_json, write_envelope
from .errors import FormatError, ShapeMismatch
from .syngraph import SPLITS, Graph, GraphDataset

MODEL_MAGIC = b"E2AMODEL"

Params = dict  # str -> ndarray (or Tensor while on a tape)


@dataclass
class ModelConfig:
    d_h: int = 32
    n_layers: int = 3
    gin_eps: float = 0.0
    readout: str = "sum"


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0


def config_hash(obj) -> str:
    """Stable hash of a (nested) config; insensitive to key order."""
    if hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(raw.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# parameters


def _linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)


def init_gin(d_in: int, d_h: int, n_layers: int, rng: np.random.Generator) -> Params:
    theta = {}
    width = d_in
    for layer in range(n_layers):
        theta[f"gin.{layer}.w1"], theta[f"gin.{layer}.b1"] = _linear(rng, width, d_h)
        theta[f"gin.{layer}.w2"], theta[f"gin.{layer}.b2"] = _linear(rng, d_h, d_h)
        width = d_h
    return theta


def init_mlp(d_h: int, n_classes: int, rng: np.random.Generator) -> Params:
    phi = {}
    phi["mlp.w1"], phi["mlp.b1"] = _linear(rng, d_h, d_h)
    phi["mlp.w2"], phi["mlp.b2"] = _linear(rng, d_h, n_classes)
    return phi


def init_model(d_in: int, n_classes: int, cfg: ModelConfig, seed: int) -> tuple[Params, Params]:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    return init_gin(d_in, cfg.d_h, cfg.n_layers, rng), init_mlp(cfg.d_h, n_classes, rng)


def n_layers_of(theta: Mapping) -> int:
    return len({k.split(".")[1] for k in theta if k.startswith("gin.")})


# ---------------------------------------------------------------------------
# batching


@dataclass
class GraphBatch:
    """Disjoint union of graphs as constant sparse operators."""

    agg: sp.csr_matrix  # A + (1 + eps) I over all nodes
    x: np.ndarray
    pool: sp.csr_matrix  # graphs x nodes
    y: np.ndarray
    n_graphs: int

    @classmethod
    def from_graphs(cls, graphs: Sequence[Graph], gin_eps: float = 0.0, readout: str = "sum") -> GraphBatch:
        if not graphs:
            raise ValueError("empty batch")
        sizes = np.array([g.n_nodes for g in graphs])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        n = int(offsets[-1])
        edges = np.concatenate([g.edges + offsets[i] for i, g in enumerate(graphs)]).reshape(-1, 2)
        rows = np.concatenate([edges[:, 0], edges[:, 1], np.arange(n)])
        cols = np.concatenate([edges[:, 1], edges[:, 0], np.arange(n)])
        vals = np.concatenate([np.ones(2 * len(edges)), np.full(n, 1.0 + gin_eps)])
        agg = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        owner = np.repeat(np.arange(len(graphs)), sizes)
        if readout == "sum":
            w = np.ones(n)
        elif readout == "mean":
            w = 1.0 / sizes[owner]
        else:
            raise ValueError(f"unknown readout {readout!r}")
        pool = sp.csr_matrix((w, (owner, np.arange(n))), shape=(len(graphs), n))
        x = np.concatenate([g.node_features for g in graphs])
        y = np.array([g.label for g in graphs], dtype=np.int64)
        return cls(agg, x, pool, y, len(graphs))


def _as_batch(graphs, cfg: ModelConfig | None = None) -> GraphBatch:
    if isinstance(graphs, GraphBatch):
        return graphs
    cfg = cfg or ModelConfig()
    if isinstance(graphs, Graph):
        graphs = [graphs]
    return GraphBatch.from_graphs(list(graphs), cfg.gin_eps, cfg.readout)


def chunked_batches(graphs: Sequence[Graph], cfg: ModelConfig, size: int = 128) -> list[GraphBatch]:
    return [GraphBatch.from_graphs(graphs[i : i + size], cfg.gin_eps, cfg.readout) for i in range(0, len(graphs), size)]


# ---------------------------------------------------------------------------
# forward


def linear(x, w, b) -> Tensor:
    return ad.add_row(ad.matmul(x, w), b)


def gin_forward(theta: Mapping, graphs, cfg: ModelConfig | None = None, x=None) -> Tensor:
    """Graph embeddings ``H`` of shape (n_graphs, d_h).

    ``x`` optionally replaces the batch node features (e.g. a watched tensor
    for input-space derivatives).
    """
    batch = _as_batch(graphs, cfg)
    h = batch.x if x is None else x
    if h.shape != batch.x.shape or h.shape[1] != theta["gin.0.w1"].shape[0]:
        raise ShapeMismatch(f"node features {h.shape} do not fit encoder input {theta['gin.0.w1'].shape[0]}")
    for layer in range(n_layers_of(theta)):
        m = ad.matmul(batch.agg, h)
        m = ad.relu(linear(m, theta[f"gin.{layer}.w1"], theta[f"gin.{layer}.b1"]))
        h = ad.relu(linear(m, theta[f"gin.{layer}.w2"], theta[f"gin.{layer}.b2"]))
    return ad.matmul(batch.pool, h)


def classify(phi: Mapping, H) -> Tensor:
    """Logits ``S`` of shape (n, C)."""
    H = H if isinstance(H, Tensor) else Tensor(np.atleast_2d(H))
    if H.data.ndim != 2 or H.shape[1] != phi["mlp.w1"].shape[0]:
        raise ShapeMismatch(f"embedding shape {H.shape} does not match head input {phi['mlp.w1'].shape[0]}")
    z = ad.relu(linear(H, phi["mlp.w1"], phi["mlp.b1"]))
    return linear(z, phi["mlp.w2"], phi["mlp.b2"])


def predict(S) -> np.ndarray:
    """Argmax per row; ties go to the lowest class index."""
    s = S.data if isinstance(S, Tensor) else np.asarray(S)
    return np.argmax(np.atleast_2d(s), axis=1)


def erm_loss(theta: Mapping, phi: Mapping, batch, cfg: ModelConfig | None = None) -> Tensor:
    batch = _as_batch(batch, cfg)
    return ad.softmax_cross_entropy(classify(phi, gin_forward(theta, batch)), batch.y)


def embed(theta: Mapping, graphs: Sequence[Graph], cfg: ModelConfig | None = None, chunk: int = 128) -> np.ndarray:
    cfg = cfg or ModelConfig()
    return np.concatenate([gin_forward(theta, b).data for b in chunked_batches(graphs, cfg, chunk)])


def evaluate(theta: Mapping, phi: Mapping, split, cfg: ModelConfig | None = None) -> float:
    """Accuracy over a list of graphs or pre-built batches."""
    batches = split if split and isinstance(split[0], GraphBatch) else chunked_batches(split, cfg or ModelConfig())
    if not batches:
        raise ValueError("empty split")
    correct = total = 0
    for b in batches:
        correct += int(np.sum(predict(classify(phi, gin_forward(theta, b))) == b.y))
        total += b.n_graphs
    return correct / total


# ---------------------------------------------------------------------------
# training


class TrainHooks(Protocol):
    """Extension points used by the augmentation pipeline."""

    def extra_loss(self, epoch: int, batch: GraphBatch, H: Tensor, params: Mapping[str, Tensor]) -> Tensor | None: ...

    def after_step(self, epoch: int, batch: GraphBatch, H: np.ndarray, params: Params) -> Params | None:
        """Runs after the optimizer step; a returned dict replaces the parameters."""

    def end_epoch(self, epoch: int, record: dict, theta: Params, phi: Params) -> None: ...


@dataclass
class TrainResult:
    theta: Params
    phi: Params
    trace: list[dict]
    checkpoints: dict[int, tuple[Params, Params]] = field(default_factory=dict)
    train_seconds: list[float] = field(default_factory=list)


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def train_erm(
    theta: Params,
    phi: Params,
    ds: GraphDataset,
    train: TrainConfig | None = None,
    model: ModelConfig | None = None,
    *,
    hooks: TrainHooks | None = None,
    checkpoint_dir=None,
    keep_checkpoints: Iterable[int] | None = None,
    evaluate_every: int = 1,
) -> TrainResult:
    """Shuffled mini-batch Adam on the training split.

    Snapshots of ``(theta, phi)`` are kept in memory for the epochs listed in
    ``keep_checkpoints`` (all epochs when ``None``) and written to
    ``checkpoint_dir`` when one is given.
    """
    train = train or TrainConfig()
    model = model or ModelConfig()
    if train.epochs < 0:
        raise ValueError("epochs must be >= 0")
    keep = None if keep_checkpoints is None else set(keep_checkpoints)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([int(train.seed), 1]))
    params = {**theta, **phi}
    state = ad.adam_init(params)
    graphs = ds["train"]
    eval_batches = {s: chunked_batches(ds[s], model) for s in SPLITS}
    result = TrainResult(dict(theta), dict(phi), [])

    for epoch in range(1, train.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for idx in iterate_minibatches(len(graphs), train.batch_size, shuffle_rng):
            batch = GraphBatch.from_graphs([graphs[i] for i in idx], model.gin_eps, model.readout)
            with Tape() as tape:
                leaves = {k: tape.watch(v) for k, v in params.items()}
                H = gin_forward(leaves, batch)
                loss = ad.softmax_cross_entropy(classify(leaves, H), batch.y)
                losses.append(loss.item())
                if hooks is not None:
                    extra = hooks.extra_loss(epoch, batch, H, leaves)
                    if extra is not None:
                        loss = loss + extra
                grads = ad.backward(loss, list(leaves.values()))
            params, state = ad.adam_step(params, {k: grads[t] for k, t in leaves.items()}, state, train.lr)
            if hooks is not None:
                params = hooks.after_step(epoch, batch, H.data, params) or params
        result.train_seconds.append(time.perf_counter() - t0)

        theta_e = {k: v for k, v in params.items() if k.startswith("gin.")}
        phi_e = {k: v for k, v in params.items() if k.startswith("mlp.")}
        record = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if epoch % evaluate_every == 0 or epoch == train.epochs:
            for s in SPLITS:
                record[f"{s}_acc"] = evaluate(theta_e, phi_e, eval_batches[s])
        if hooks is not None:
            hooks.end_epoch(epoch, record, theta_e, phi_e)
        result.trace.append(record)
        if keep is None or epoch in keep:
            result.checkpoints[epoch] = (theta_e, phi_e)
        if checkpoint_dir is not None:
            save_checkpoint(
                Path(checkpoint_dir) / f"epoch_{epoch:04d}.e2am",
                theta_e,
                phi_e,
                meta={"epoch": epoch, "seed": train.seed, "config_hash": config_hash({"train": train, "model": model})},
            )
        result.theta, result.phi = theta_e, phi_e
    return result


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, theta: Params, phi: Params, cvae: Params | None = None, meta: dict | None = None) -> None:
    sections = {"meta": pack_json(meta or {})}
    for group, params in (("theta", theta), ("phi", phi), ("cvae", cvae or {})):
        for k in sorted(params):
            sections[f"{group}/{k}"] = pack_array(np.asarray(params[k]))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_envelope(path, MODEL_MAGIC, sections)


def load_checkpoint(path) -> tuple[Params, Params, Params, dict]:
    sec = read_envelope(path, MODEL_MAGIC)
    if "meta" not in sec:
        raise FormatError(f"{path}: missing meta section")
    groups: dict[str, dict] = {"theta": {}, "phi": {}, "cvae": {}}
    for name, raw in sec.items():
        if name == "meta":
            continue
        group, _, key = name.partition("/")
        if group not in groups:
            raise FormatError(f"{path}: unknown section {name!r}")
        groups[group][key] = unpack_array(raw)
    return groups["theta"], groups["phi"], groups["cvae"], unpack_json(sec["meta"])
