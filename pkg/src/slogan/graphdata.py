"""Graph data model, TUDataset-format I/O, density splitting, synthetic shifts,
and block-diagonal batching."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .gradcore import Rng

SOURCE = "source"
TARGET = "target"

DEGREE_CAP = 10  # degree one-hot fallback uses bins 0..10


@dataclass
class Graph:
    """Attributed undirected graph. Edges are stored once per pair, no self-loops."""

    node_count: int
    edges: np.ndarray            # (E, 2) int array, i < j
    node_features: np.ndarray    # (node_count, d) float array
    label: int | None = None
    domain: str = SOURCE
    id: int = 0
    node_tags: np.ndarray | None = None   # original integer node labels, if any

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        if self.node_count < 1:
            raise ValueError("graph must have at least one node")
        if self.edges.size:
            if self.edges.min() < 0 or self.edges.max() >= self.node_count:
                raise ValueError(f"edge endpoint out of range for {self.node_count} nodes")
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise ValueError("self-loops must not be stored")
        if self.node_features.shape[0] != self.node_count:
            raise ValueError("feature rows must match node count")
        if not np.all(np.isfinite(self.node_features)):
            raise ValueError("node features must be finite")

    @property
    def edge_count(self) -> int:
        return int(self.edges.shape[0])

    def density(self) -> float:
        n = self.node_count
        if n < 2:
            return 0.0
        return 2.0 * self.edge_count / (n * (n - 1))

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.node_count, dtype=np.int64)
        if self.edges.size:
            np.add.at(deg, self.edges[:, 0], 1)
            np.add.at(deg, self.edges[:, 1], 1)
        return deg


# how node features were derived; controls what serialization emits
FEATURES_FROM_NODE_LABELS = "node_labels"
FEATURES_FROM_DEGREE = "degree"
FEATURES_FROM_ATTRIBUTES = "attributes"


@dataclass
class Dataset:
    graphs: list[Graph]
    num_classes: int
    feature_dim: int
    feature_kind: str = FEATURES_FROM_ATTRIBUTES

    def __post_init__(self):
        for g in self.graphs:
            if g.node_features.shape[1] != self.feature_dim:
                raise ValueError(
                    f"graph {g.id}: feature dim {g.node_features.shape[1]} != dataset dim {self.feature_dim}"
                )
            if g.label is not None and not (0 <= g.label < self.num_classes):
                raise ValueError(f"graph {g.id}: label {g.label} outside 0..{self.num_classes - 1}")

    def __len__(self) -> int:
        return len(self.graphs)

    def labels(self) -> np.ndarray:
        return np.array([-1 if g.label is None else g.label for g in self.graphs], dtype=np.int64)

    def retagged(self, domain: str) -> "Dataset":
        graphs = [replace(g, domain=domain) for g in self.graphs]
        return Dataset(graphs, self.num_classes, self.feature_dim, self.feature_kind)


@dataclass
class GraphBatch:
    """Graphs stacked block-diagonally: node indices offset per graph."""

    offsets: np.ndarray       # (B,) start node index of each graph
    edges: np.ndarray         # (E, 2) global node indices
    node_features: np.ndarray  # (N, d)
    graph_sizes: np.ndarray   # (B,)
    labels: np.ndarray        # (B,), -1 where missing
    domains: list[str]
    membership: np.ndarray    # (N,) node -> graph index
    ids: np.ndarray           # (B,)

    @property
    def num_graphs(self) -> int:
        return len(self.graph_sizes)

    @property
    def num_nodes(self) -> int:
        return int(self.node_features.shape[0])


def make_batch(graphs: list[Graph]) -> GraphBatch:
    if not graphs:
        raise ValueError("make_batch: empty graph list")
    d = graphs[0].node_features.shape[1]
    for g in graphs:
        if g.node_features.shape[1] != d:
            raise ValueError(
                f"make_batch: mixed feature dims {d} vs {g.node_features.shape[1]} (graph {g.id})"
            )
    sizes = np.array([g.node_count for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    edges = [g.edges + off for g, off in zip(graphs, offsets) if g.edges.size]
    membership = np.repeat(np.arange(len(graphs)), sizes)
    return GraphBatch(
        offsets=offsets,
        edges=np.concatenate(edges, axis=0) if edges else np.zeros((0, 2), dtype=np.int64),
        node_features=np.concatenate([g.node_features for g in graphs], axis=0),
        graph_sizes=sizes,
        labels=np.array([-1 if g.label is None else g.label for g in graphs], dtype=np.int64),
        domains=[g.domain for g in graphs],
        membership=membership,
        ids=np.array([g.id for g in graphs], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# TUDataset text format


def _read_int_lines(path) -> list[int]:
    with open(path) as fh:
        return [int(line.strip()) for line in fh if line.strip()]


def parse_tudataset(root_path, name: str) -> Dataset:
    """Parse the TUDataset text layout rooted at ``root_path``/``name``.

    Mandatory: ``<name>_A.txt`` (1-indexed comma-separated edge pairs),
    ``<name>_graph_indicator.txt``, ``<name>_graph_labels.txt``. Optional:
    ``<name>_node_labels.txt`` (one-hot features) and
    ``<name>_node_attributes.txt`` (comma-separated float features; takes
    precedence, which is how synthetic datasets round-trip). Without either,
    features fall back to one-hot degree capped at 10.
    """
    import os

    base = os.path.join(str(root_path), name)
    paths = {key: f"{base}_{key}.txt" for key in
             ("A", "graph_indicator", "graph_labels", "node_labels", "node_attributes")}
    for key in ("A", "graph_indicator", "graph_labels"):
        if not os.path.exists(paths[key]):
            raise FileNotFoundError(f"missing mandatory file {paths[key]}")

    indicator = np.array(_read_int_lines(paths["graph_indicator"]), dtype=np.int64)
    graph_labels_raw = _read_int_lines(paths["graph_labels"])
    num_nodes_total = len(indicator)
    num_graphs = len(graph_labels_raw)
    if indicator.min() < 1 or indicator.max() > num_graphs:
        raise ValueError("graph_indicator references an unknown graph")

    # per-graph node index ranges; TUDataset nodes are 1-indexed and contiguous
    sizes = np.bincount(indicator - 1, minlength=num_graphs)
    if np.any(sizes == 0):
        raise ValueError("graph with zero nodes in graph_indicator")
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])

    edge_sets: list[set[tuple[int, int]]] = [set() for _ in range(num_graphs)]
    with open(paths["A"]) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 2:
                raise ValueError(f"{paths['A']}:{lineno}: expected two node indices")
            u, v = int(parts[0]), int(parts[1])
            if not (1 <= u <= num_nodes_total and 1 <= v <= num_nodes_total):
                raise ValueError(f"{paths['A']}:{lineno}: edge references unknown node ({u}, {v})")
            gu, gv = indicator[u - 1], indicator[v - 1]
            if gu != gv:
                raise ValueError(f"{paths['A']}:{lineno}: edge crosses graphs {gu} and {gv}")
            if u == v:
                continue  # self-loops are added only during normalization
            lo, hi = sorted((u - 1 - starts[gu - 1], v - 1 - starts[gu - 1]))
            edge_sets[gu - 1].add((int(lo), int(hi)))

    node_tags = None
    if os.path.exists(paths["node_labels"]):
        node_tags = np.array(_read_int_lines(paths["node_labels"]), dtype=np.int64)
        if len(node_tags) != num_nodes_total:
            raise ValueError("node_labels length does not match node count")

    node_attrs = None
    if os.path.exists(paths["node_attributes"]):
        node_attrs = np.loadtxt(paths["node_attributes"], delimiter=",", ndmin=2, dtype=np.float64)
        if node_attrs.shape[0] != num_nodes_total:
            raise ValueError("node_attributes length does not match node count")

    # contiguous class remap in sorted original-label order
    classes = sorted(set(graph_labels_raw))
    class_map = {c: i for i, c in enumerate(classes)}

    graphs = []
    if node_attrs is not None:
        kind, d = FEATURES_FROM_ATTRIBUTES, node_attrs.shape[1]
    elif node_tags is not None:
        kind = FEATURES_FROM_NODE_LABELS
        tag_values = sorted(set(int(t) for t in node_tags))
        tag_map = {t: i for i, t in enumerate(tag_values)}
        d = len(tag_values)
    else:
        kind, d = FEATURES_FROM_DEGREE, DEGREE_CAP + 1

    for gi in range(num_graphs):
        n = int(sizes[gi])
        start = int(starts[gi])
        edges = np.array(sorted(edge_sets[gi]), dtype=np.int64).reshape(-1, 2)
        tags = None
        if kind == FEATURES_FROM_ATTRIBUTES:
            feats = node_attrs[start:start + n]
        elif kind == FEATURES_FROM_NODE_LABELS:
            tags = node_tags[start:start + n]
            feats = np.zeros((n, d))
            feats[np.arange(n), [tag_map[int(t)] for t in tags]] = 1.0
        else:
            deg = np.zeros(n, dtype=np.int64)
            if edges.size:
                np.add.at(deg, edges[:, 0], 1)
                np.add.at(deg, edges[:, 1], 1)
            feats = np.zeros((n, d))
            feats[np.arange(n), np.minimum(deg, DEGREE_CAP)] = 1.0
        graphs.append(Graph(
            node_count=n, edges=edges, node_features=feats,
            label=class_map[graph_labels_raw[gi]], id=gi, node_tags=tags,
        ))
    return Dataset(graphs, num_classes=len(classes), feature_dim=d, feature_kind=kind)


def write_tudataset(ds: Dataset, root_path, name: str) -> None:
    """Serialize a Dataset back to the TUDataset text layout (round-trippable)."""
    import os

    os.makedirs(str(root_path), exist_ok=True)
    base = os.path.join(str(root_path), name)
    offsets = np.concatenate([[0], np.cumsum([g.node_count for g in ds.graphs])[:-1]])

    with open(f"{base}_A.txt", "w") as fh:
        for g, off in zip(ds.graphs, offsets):
            for u, v in g.edges:
                fh.write(f"{u + off + 1}, {v + off + 1}\n")
                fh.write(f"{v + off + 1}, {u + off + 1}\n")
    with open(f"{base}_graph_indicator.txt", "w") as fh:
        for gi, g in enumerate(ds.graphs, start=1):
            fh.write(f"{gi}\n" * g.node_count)
    with open(f"{base}_graph_labels.txt", "w") as fh:
        for g in ds.graphs:
            fh.write(f"{0 if g.label is None else g.label}\n")

    if ds.feature_kind == FEATURES_FROM_NODE_LABELS:
        with open(f"{base}_node_labels.txt", "w") as fh:
            for g in ds.graphs:
                for t in g.node_tags:
                    fh.write(f"{int(t)}\n")
    elif ds.feature_kind == FEATURES_FROM_ATTRIBUTES:
        with open(f"{base}_node_attributes.txt", "w") as fh:
            for g in ds.graphs:
                for row in g.node_features:
                    fh.write(", ".join(repr(float(x)) for x in row) + "\n")


# ---------------------------------------------------------------------------
# density split


def density_split(ds: Dataset, parts: int) -> list[Dataset]:
    """Sort graphs by (density, id) ascending and cut into ``parts`` contiguous
    near-equal chunks; the remainder goes to the earliest chunks."""
    if parts < 2:
        raise ValueError("density_split: parts must be >= 2")
    n = len(ds.graphs)
    if parts > n:
        raise ValueError(f"density_split: parts {parts} exceeds graph count {n}")
    order = sorted(ds.graphs, key=lambda g: (g.density(), g.id))
    base, rem = divmod(n, parts)
    chunks = []
    pos = 0
    for k in range(parts):
        size = base + (1 if k < rem else 0)
        chunks.append(Dataset(order[pos:pos + size], ds.num_classes, ds.feature_dim, ds.feature_kind))
        pos += size
    return chunks


# ---------------------------------------------------------------------------
# synthetic biased shift


@dataclass
class SynthConfig:
    n_per_domain: int = 500
    min_nodes: int = 6
    max_nodes: int = 20
    rho_s: float = 0.9

    def validate(self) -> None:
        if self.n_per_domain < 1:
            raise ValueError("n_per_domain must be >= 1")
        if not (6 <= self.min_nodes <= self.max_nodes <= 20):
            raise ValueError("node counts must satisfy 6 <= min <= max <= 20")
        if not (0.5 <= self.rho_s <= 1.0):
            raise ValueError("rho_s must lie in [0.5, 1]")


MOTIF_SIZE = 5


def _synthetic_graph(n: int, label: int, bit: int, domain: str, gid: int, rng: Rng) -> Graph:
    edge_set: set[tuple[int, int]] = set()
    if label == 1:
        for i in range(MOTIF_SIZE):  # 5-cycle
            edge_set.add(tuple(sorted((i, (i + 1) % MOTIF_SIZE))))
    else:
        for i in range(1, MOTIF_SIZE):  # star on the same node budget
            edge_set.add((0, i))
    # attach the remaining nodes as a chain with random rewiring; keeping the
    # motif degrees mostly untouched is what makes the class separable by a
    # two-layer convolution
    for v in range(MOTIF_SIZE, n):
        if v > MOTIF_SIZE and rng.uniform() < 0.7:
            u = v - 1
        else:
            u = int(rng.integers(0, v))
        edge_set.add(tuple(sorted((u, v))))

    edges = np.array(sorted(edge_set), dtype=np.int64)
    deg = np.zeros(n, dtype=np.int64)
    np.add.at(deg, edges[:, 0], 1)
    np.add.at(deg, edges[:, 1], 1)

    feats = np.zeros((n, 4))
    # degree normalized per graph: the star's hub compresses everyone else's
    # value, so the motif class is readable from pooled features
    feats[:, 0] = deg / max(1, deg.max())
    motif = np.zeros(n)
    motif[:MOTIF_SIZE] = 1.0
    feats[:, 1] = motif + rng.normal(0.0, 0.075, size=n)
    feats[:, 2] = float(bit)
    # label-free noise whose scale is a domain signature, the synthetic stand-in
    # for the marginal feature shift a density split induces on real data
    noise_scale = 0.25 if domain == SOURCE else 0.5
    feats[:, 3] = rng.normal(0.0, noise_scale, size=n)
    return Graph(node_count=n, edges=edges, node_features=feats,
                 label=label, domain=domain, id=gid)


def gen_synthetic_biased(cfg: SynthConfig, rng: Rng) -> tuple[Dataset, Dataset]:
    """Planted-motif graphs with a spurious feature channel whose label
    correlation flips sign between domains.

    Label 1 plants a 5-cycle, label 0 a 5-node star; channels 0-1 carry the
    causal signal (normalized degree, noisy motif membership), channel 2 is the
    spurious bit (= label w.p. rho_s on source, = 1-label w.p. rho_s on
    target), channel 3 is noise. Target labels are kept for evaluation only.
    """
    cfg.validate()
    datasets = []
    for domain in (SOURCE, TARGET):
        graphs = []
        for i in range(cfg.n_per_domain):
            n = int(rng.integers(cfg.min_nodes, cfg.max_nodes + 1))
            label = int(rng.integers(0, 2))
            aligned = rng.uniform() < cfg.rho_s
            if domain == SOURCE:
                bit = label if aligned else 1 - label
            else:
                bit = (1 - label) if aligned else label
            graphs.append(_synthetic_graph(n, label, bit, domain, i, rng))
        datasets.append(Dataset(graphs, num_classes=2, feature_dim=4,
                                feature_kind=FEATURES_FROM_ATTRIBUTES))
    return datasets[0], datasets[1]
