"""Miniature motif-classification graphs with structural distribution shift.

Every graph is a *base* graph with one label-carrying *motif* bridged onto a
random base node.  The label depends on the motif only; environments differ
in the base family (``basis`` shift) or the base size (``size`` shift), so an
out-of-distribution split changes the structure around the motif without
changing what determines the class.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np

from .envelope import pack_array, pack_json, read_envelope, unpack_array, unpack_json, write_envelope
from .errors import ConfigInvalid, FormatError

SPLITS = ("train", "val", "id_test", "ood_test")
BASES = ("path", "star", "tree", "ladder", "wheel")
MOTIFS = ("cycle5", "house", "clique4")
MOTIF_SIZE = {"cycle5": 5, "house": 5, "clique4": 4}
TRAIN_BASES = ("path", "star", "tree")
OOD_BASES = ("ladder", "wheel")

DATA_MAGIC = b"E2AGRAPH"

DEFAULT_SIZES = {
    "basis": {"train": (6, 12), "val": (6, 12), "id_test": (6, 12), "ood_test": (6, 12)},
    "size": {"train": (6, 12), "val": (13, 18), "id_test": (6, 12), "ood_test": (19, 30)},
}


@dataclass(eq=False)
class Graph:
    n_nodes: int
    edges: np.ndarray  # (n_edges, 2) int64, i < j, sorted, unique
    node_features: np.ndarray  # (n_nodes, d_in) float64
    label: int
    env_id: int
    base: str = ""
    base_size: int = 0

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.n_nodes == other.n_nodes
            and self.label == other.label
            and self.env_id == other.env_id
            and self.base == other.base
            and self.base_size == other.base_size
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.node_features, other.node_features)
        )

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n_nodes))
        g.add_edges_from(map(tuple, self.edges.tolist()))
        return g

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.reshape(-1), minlength=self.n_nodes)

    def relabel(self, perm: np.ndarray) -> Graph:
        """Graph with node ``i`` renamed to ``perm[i]``."""
        perm = np.asarray(perm)
        edges = _canonical_edges(perm[self.edges])
        feats = np.empty_like(self.node_features)
        feats[perm] = self.node_features
        return Graph(self.n_nodes, edges, feats, self.label, self.env_id, self.base, self.base_size)


@dataclass
class MotifConfig:
    shift: str = "basis"
    n_classes: int = 3
    counts: int | dict = 100  # graphs per class per split
    sizes: dict | None = None  # split -> (lo, hi) base size, inclusive
    d_in: int = 4
    seed: int = 7

    def resolved_counts(self) -> dict[str, int]:
        if isinstance(self.counts, dict):
            return {s: int(self.counts[s]) for s in SPLITS}
        return {s: int(self.counts) for s in SPLITS}

    def resolved_sizes(self) -> dict[str, tuple[int, int]]:
        if self.shift not in DEFAULT_SIZES:
            raise ConfigInvalid(f"shift must be 'basis' or 'size', got {self.shift!r}")
        sizes = dict(DEFAULT_SIZES[self.shift])
        for k, v in (self.sizes or {}).items():
            if k not in SPLITS:
                raise ConfigInvalid(f"unknown split {k!r} in sizes")
            sizes[k] = (int(v[0]), int(v[1]))
        return sizes


@dataclass(eq=False)
class GraphDataset:
    splits: dict[str, list[Graph]]
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, GraphDataset):
            return NotImplemented
        return self.meta == other.meta and all(
            len(self.splits[s]) == len(other.splits[s]) and all(a == b for a, b in zip(self.splits[s], other.splits[s]))
            for s in SPLITS
        )

    @property
    def n_classes(self) -> int:
        return int(self.meta["n_classes"])

    @property
    def d_in(self) -> int:
        return int(self.meta["d_in"])

    def __getitem__(self, split: str) -> list[Graph]:
        return self.splits[split]


def _canonical_edges(edges) -> np.ndarray:
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    e = np.sort(e, axis=1)
    e = np.unique(e, axis=0)
    return e.reshape(-1, 2)


def _base_graph(family: str, n: int) -> nx.Graph:
    if family == "path":
        return nx.path_graph(n)
    if family == "star":
        return nx.star_graph(n - 1)
    if family == "tree":
        return nx.full_rary_tree(2, n)
    if family == "ladder":
        return nx.ladder_graph(max(n // 2, 2))
    if family == "wheel":
        return nx.wheel_graph(n)
    raise ConfigInvalid(f"unknown base family {family!r}")


def _motif_graph(motif: str) -> nx.Graph:
    return {"cycle5": nx.cycle_graph(5), "house": nx.house_graph(), "clique4": nx.complete_graph(4)}[motif]


def degree_features(degrees: np.ndarray, d_in: int) -> np.ndarray:
    """Degree one-hot over ``d_in - 1`` channels (top channel absorbs larger degrees) plus a constant channel."""
    width = d_in - 1
    x = np.zeros((degrees.size, d_in))
    x[np.arange(degrees.size), np.minimum(degrees, width - 1)] = 1.0
    x[:, -1] = 1.0
    return x


def make_graph(family: str, base_size: int, label: int, d_in: int, rng: np.random.Generator, env_id: int = 0) -> Graph:
    base = _base_graph(family, base_size)
    nb = base.number_of_nodes()
    motif = _motif_graph(MOTIFS[label])
    edges = [(u, v) for u, v in base.edges()]
    edges += [(u + nb, v + nb) for u, v in motif.edges()]
    anchor = int(rng.integers(nb))
    edges.append((anchor, nb))
    n = nb + motif.number_of_nodes()
    perm = rng.permutation(n)
    e = _canonical_edges(perm[np.asarray(edges)])
    deg = np.bincount(e.reshape(-1), minlength=n)
    return Graph(n, e, degree_features(deg, d_in), int(label), int(env_id), family, nb)


def _validate(cfg: MotifConfig) -> None:
    if cfg.n_classes != 3:
        raise ConfigInvalid("only the 3-class motif task is supported")
    if cfg.d_in < 3:
        raise ConfigInvalid("d_in must be at least 3")
    counts = cfg.resolved_counts()
    if min(counts.values()) < 50:
        raise ConfigInvalid(f"counts must be >= 50 per split per class, got {counts}")
    sizes = cfg.resolved_sizes()
    for split, (lo, hi) in sizes.items():
        if lo < 4 or hi < lo or hi > 200:
            raise ConfigInvalid(f"bad size range {lo}..{hi} for {split}")
    if cfg.shift == "size" and sizes["train"][1] >= sizes["ood_test"][0]:
        raise ConfigInvalid("size shift needs train sizes strictly below ood_test sizes")


def make_motif_dataset(config: MotifConfig | dict | None = None, **overrides) -> GraphDataset:
    if config is None:
        config = MotifConfig(**overrides)
    elif isinstance(config, dict):
        config = MotifConfig(**{**config, **overrides})
    _validate(config)
    counts = config.resolved_counts()
    sizes = config.resolved_sizes()
    seeds = np.random.SeedSequence(int(config.seed) % 2**64).spawn(len(SPLITS))
    splits: dict[str, list[Graph]] = {}
    for split, ss in zip(SPLITS, seeds):
        rng = np.random.default_rng(ss)
        if config.shift == "basis":
            families = OOD_BASES if split == "ood_test" else TRAIN_BASES
        else:
            families = ("path",)
        lo, hi = sizes[split]
        graphs = []
        for label in range(config.n_classes):
            for _ in range(counts[split]):
                fam = families[int(rng.integers(len(families)))]
                size = int(rng.integers(lo, hi + 1))
                env = BASES.index(fam) if config.shift == "basis" else size
                graphs.append(make_graph(fam, size, label, config.d_in, rng, env))
        order = rng.permutation(len(graphs))
        splits[split] = [graphs[i] for i in order]
    meta = {
        "shift": config.shift,
        "n_classes": config.n_classes,
        "d_in": config.d_in,
        "seed": int(config.seed),
        "counts": counts,
        "sizes": {k: list(v) for k, v in sizes.items()},
    }
    return GraphDataset(splits, meta)


# ---------------------------------------------------------------------------
# persistence


def dataset_save(ds: GraphDataset, path) -> None:
    sections = {"meta": pack_json(ds.meta)}
    for split in SPLITS:
        gs = ds.splits[split]
        sections[f"{split}/n_nodes"] = pack_array(np.array([g.n_nodes for g in gs], dtype=np.int64))
        sections[f"{split}/n_edges"] = pack_array(np.array([len(g.edges) for g in gs], dtype=np.int64))
        sections[f"{split}/label"] = pack_array(np.array([g.label for g in gs], dtype=np.int64))
        sections[f"{split}/env"] = pack_array(np.array([g.env_id for g in gs], dtype=np.int64))
        sections[f"{split}/base"] = pack_array(np.array([BASES.index(g.base) for g in gs], dtype=np.int64))
        sections[f"{split}/base_size"] = pack_array(np.array([g.base_size for g in gs], dtype=np.int64))
        sections[f"{split}/edges"] = pack_array(np.concatenate([g.edges for g in gs]).astype(np.int64))
        sections[f"{split}/x"] = pack_array(np.concatenate([g.node_features for g in gs]))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_envelope(path, DATA_MAGIC, sections)


def dataset_load(path) -> GraphDataset:
    sec = read_envelope(path, DATA_MAGIC)
    try:
        meta = unpack_json(sec["meta"])
        splits = {}
        for split in SPLITS:
            nn = unpack_array(sec[f"{split}/n_nodes"])
            ne = unpack_array(sec[f"{split}/n_edges"])
            lab = unpack_array(sec[f"{split}/label"])
            env = unpack_array(sec[f"{split}/env"])
            base = unpack_array(sec[f"{split}/base"])
            bsz = unpack_array(sec[f"{split}/base_size"])
            edges = unpack_array(sec[f"{split}/edges"]).reshape(-1, 2)
            x = unpack_array(sec[f"{split}/x"])
            eo = np.concatenate([[0], np.cumsum(ne)])
            xo = np.concatenate([[0], np.cumsum(nn)])
            splits[split] = [
                Graph(
                    int(nn[i]),
                    edges[eo[i] : eo[i + 1]].copy(),
                    x[xo[i] : xo[i + 1]].copy(),
                    int(lab[i]),
                    int(env[i]),
                    BASES[int(base[i])],
                    int(bsz[i]),
                )
                for i in range(len(nn))
            ]
    except (KeyError, ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed dataset ({exc})") from exc
    return GraphDataset(splits, meta)


def graph_stats(ds: GraphDataset) -> dict:
    out = {"counts": {}, "size_hist": {}, "label_hist": {}, "base_hist": {}}
    for split in SPLITS:
        gs = ds.splits[split]
        out["counts"][split] = len(gs)
        out["size_hist"][split] = dict(sorted(Counter(g.n_nodes for g in gs).items()))
        out["label_hist"][split] = dict(sorted(Counter(g.label for g in gs).items()))
        out["base_hist"][split] = dict(sorted(Counter(g.base for g in gs).items()))
    return out


def config_dict(cfg: MotifConfig) -> dict:
    return asdict(cfg)
