"""Head-wiring strategies over the shared backbone.

Five wirings:

* leaf_node          - one softmax over the leaves; internal node
                       probabilities are sums over descendant leaves.
* flattened          - one softmax head per internal node with >= 2
                       children, all reading the backbone features; loss is
                       masked for samples whose path skips the head.
* leaky_flattened    - flattened plus a virtual fall-back class per head,
                       targeted whenever the path skips the head, so every
                       head sees every sample.
* dense              - flattened plus parent-to-child feature reuse: a
                       head's input is the backbone features concatenated
                       with its parent head's hidden activation.
* leaky_dense        - dense + leaky.

For the hierarchy wirings, unconditional node probabilities are the chain
product of per-head conditionals along the path to the root; the leaky
slot stays in the softmax denominator at inference (mass can genuinely
leak; reported per head) unless renormalize_leaky is set.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, class_weights
from .nnet import (
    Adam,
    Backbone,
    LinearLayer,
    LrSchedule,
    relu,
    relu_backward,
    softmax,
    weighted_ce,
)
from .rng import SplitMix64
from .taxonomy import (
    Head,
    RoutedLabel,
    Taxonomy,
    derive_heads,
    dfs_order,
    leaves,
    route_label,
)


class StrategyKind(enum.Enum):
    LEAF_NODE = "leaf_node"
    FLATTENED = "flattened"
    LEAKY_FLATTENED = "leaky_flattened"
    DENSE = "dense"
    LEAKY_DENSE = "leaky_dense"

    @property
    def leaky(self) -> bool:
        return self in (StrategyKind.LEAKY_FLATTENED, StrategyKind.LEAKY_DENSE)

    @property
    def dense_heads(self) -> bool:
        return self in (StrategyKind.DENSE, StrategyKind.LEAKY_DENSE)

    @property
    def display(self) -> str:
        return {
            StrategyKind.LEAF_NODE: "Leaf-Node",
            StrategyKind.FLATTENED: "Flattened Hierarchy",
            StrategyKind.LEAKY_FLATTENED: "Leaky Flattened Hierarchy",
            StrategyKind.DENSE: "Dense Hierarchy",
            StrategyKind.LEAKY_DENSE: "Leaky Dense Hierarchy",
        }[self]

    @classmethod
    def parse(cls, name: str) -> "StrategyKind":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown strategy {name!r} (expected one of: {valid})") from None


ALL_KINDS = tuple(StrategyKind)
NOT_APPLICABLE = -1


class HeadModule:
    """One classification head: optional hidden Linear+ReLU, then logits.

    With hidden width 0 the head is a linear probe and its downstream
    signal (for dense wiring) is its logits instead of the hidden
    activation.
    """

    def __init__(self, head: Head, input_dim: int, hidden_width: int,
                 stream: SplitMix64 | None, parent_index: int | None):
        self.head = head
        self.input_dim = input_dim
        self.parent_index = parent_index
        if hidden_width > 0:
            self.hidden: LinearLayer | None = LinearLayer(input_dim, hidden_width, stream)
            out_in = hidden_width
        else:
            self.hidden = None
            out_in = input_dim
        self.out = LinearLayer(out_in, head.width, stream)

    @property
    def signal_dim(self) -> int:
        return self.hidden.n_out if self.hidden is not None else self.out.n_out

    def layers(self) -> list[LinearLayer]:
        return ([self.hidden] if self.hidden is not None else []) + [self.out]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: LrSchedule = field(default_factory=LrSchedule)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


class Model:
    """Backbone + strategy-wired heads with hand-written backprop."""

    def __init__(self, taxonomy: Taxonomy, kind: StrategyKind, backbone: Backbone,
                 heads: list[Head], hidden_width: int,
                 stream: SplitMix64 | None = None):
        self.taxonomy = taxonomy
        self.kind = kind
        self.backbone = backbone
        self.heads = heads
        self.hidden_width = hidden_width
        self.leaf_order = leaves(taxonomy)

        parent_idx = self._parent_head_indices() if kind.dense_heads else [None] * len(heads)
        F = backbone.feature_dim
        self.head_modules: list[HeadModule] = []
        for m, head in enumerate(heads):
            input_dim = F
            if parent_idx[m] is not None:
                input_dim += self.head_modules[parent_idx[m]].signal_dim
            self.head_modules.append(
                HeadModule(head, input_dim, hidden_width, stream, parent_idx[m])
            )
        self._routing_cache: dict[str, tuple[int, ...]] = {}

    def _parent_head_indices(self):
        index_of = {h.parent_tag: i for i, h in enumerate(self.heads)}
        out = []
        for h in self.heads:
            p = self.taxonomy.nodes[h.parent_tag].parent
            idx = None
            while p is not None:
                if p in index_of:
                    idx = index_of[p]
                    break
                p = self.taxonomy.nodes[p].parent
            out.append(idx)
        return out

    # ---- routing -------------------------------------------------------

    def route_targets(self, leaf: str) -> tuple[int, ...]:
        """Per-head integer targets for a leaf label (NOT_APPLICABLE = -1)."""
        cached = self._routing_cache.get(leaf)
        if cached is None:
            if self.kind is StrategyKind.LEAF_NODE:
                cached = (self.leaf_order.index(leaf),)
            else:
                cached = route_label(self.taxonomy, self.heads, leaf).targets
            self._routing_cache[leaf] = cached
        return cached

    def targets_matrix(self, leafs) -> np.ndarray:
        return np.array([self.route_targets(lf) for lf in leafs], dtype=np.int64)

    # ---- forward / backward --------------------------------------------

    def forward(self, x: np.ndarray):
        features, bb_cache = self.backbone.forward(x)
        logits = []
        head_cache = []
        for hm in self.head_modules:
            if hm.parent_index is not None:
                inp = np.concatenate([features, head_cache[hm.parent_index][-1]], axis=1)
            else:
                inp = features
            if hm.hidden is not None:
                z = hm.hidden.forward(inp)
                h = relu(z)
                lg = hm.out.forward(h)
                signal = h
            else:
                z = h = None
                lg = hm.out.forward(inp)
                signal = lg
            logits.append(lg)
            head_cache.append((inp, z, h, signal))
        return logits, (bb_cache, head_cache, features.shape)

    def backward(self, cache, dlogits: list[np.ndarray]) -> None:
        bb_cache, head_cache, feat_shape = cache
        F = self.backbone.feature_dim
        dfeat = np.zeros(feat_shape)
        pending = [np.zeros((feat_shape[0], hm.signal_dim)) for hm in self.head_modules]
        for m in range(len(self.head_modules) - 1, -1, -1):
            hm = self.head_modules[m]
            inp, z, h, _signal = head_cache[m]
            dlg = dlogits[m]
            if hm.hidden is not None:
                dh = hm.out.backward(h, dlg) + pending[m]
                dz = relu_backward(z, dh)
                dinp = hm.hidden.backward(inp, dz)
            else:
                dinp = hm.out.backward(inp, dlg + pending[m])
            dfeat += dinp[:, :F]
            if hm.parent_index is not None:
                pending[hm.parent_index] += dinp[:, F:]
        self.backbone.backward(bb_cache, dfeat)

    # ---- loss ------------------------------------------------------------

    def masked_loss(self, logits: list[np.ndarray], targets: np.ndarray,
                    weights: list[np.ndarray], want_grads: bool):
        """Sum over heads of weighted CE over each head's applicable rows.

        Per-head loss is the mean over applicable samples only; heads with
        no applicable sample in the batch contribute zero.
        """
        total = 0.0
        dlogits = [np.zeros_like(lg) for lg in logits] if want_grads else None
        for m, lg in enumerate(logits):
            rows = np.nonzero(targets[:, m] >= 0)[0]
            if rows.size == 0:
                continue
            loss_m, dlg = weighted_ce(lg[rows], targets[rows, m], weights[m])
            total += loss_m
            if want_grads:
                dlogits[m][rows] = dlg
        return total, dlogits

    def loss(self, batch) -> float:
        x, targets, weights = batch
        logits, _ = self.forward(x)
        total, _ = self.masked_loss(logits, targets, weights, want_grads=False)
        return total

    def loss_and_backward(self, batch) -> float:
        x, targets, weights = batch
        self.zero_grad()
        logits, cache = self.forward(x)
        total, dlogits = self.masked_loss(logits, targets, weights, want_grads=True)
        self.backward(cache, dlogits)
        return total

    # ---- parameters ------------------------------------------------------

    def layers(self) -> list[LinearLayer]:
        out = self.backbone.layers()
        for hm in self.head_modules:
            out.extend(hm.layers())
        return out

    def parameters(self):
        pairs = []
        for layer in self.layers():
            pairs.extend(layer.parameters())
        return pairs

    def zero_grad(self) -> None:
        for layer in self.layers():
            layer.zero_grad()

    # ---- inference -------------------------------------------------------

    def predict(self, x: np.ndarray, renormalize_leaky: bool = False):
        """Unconditional node probabilities and per-head leaked mass.

        Returns (node_probs, leak) dicts of (B,) arrays.  node_probs covers
        every node; for the root it is exactly 1 for hierarchy wirings and
        the sum of its children for leaf_node.  For non-leaky wirings the
        leaf probabilities sum to 1 up to rounding; for leaky wirings
        1 - sum(leaves) equals the total leaked mass.
        """
        logits, _ = self.forward(x)
        B = x.shape[0]
        node_probs: dict[str, np.ndarray] = {}
        leak: dict[str, np.ndarray] = {}
        t = self.taxonomy

        if self.kind is StrategyKind.LEAF_NODE:
            probs = softmax(logits[0])
            for j, tag in enumerate(self.leaf_order):
                node_probs[tag] = probs[:, j]
            for tag in sorted(t.nodes, key=lambda tg: t.nodes[tg].level, reverse=True):
                node = t.nodes[tag]
                if node.children:
                    acc = np.zeros(B)
                    for ch in node.children:
                        acc = acc + node_probs[ch]
                    node_probs[tag] = acc
            return node_probs, leak

        cond = []
        for m, hm in enumerate(self.head_modules):
            c = softmax(logits[m])
            if hm.head.leaky and renormalize_leaky:
                real = c[:, : hm.head.n_real]
                c = real / real.sum(axis=1, keepdims=True)
            cond.append(c)
        head_index = {h.parent_tag: m for m, h in enumerate(self.heads)}

        node_probs[t.root] = np.ones(B)
        for tag in sorted(t.nodes, key=lambda tg: t.nodes[tg].level):
            node = t.nodes[tag]
            if tag != t.root and tag not in node_probs:
                node_probs[tag] = node_probs[node.parent].copy()  # single-child pass-through
            m = head_index.get(tag)
            if m is None:
                continue
            parent_mass = node_probs[tag]
            for j, child in enumerate(self.heads[m].classes):
                node_probs[child] = parent_mass * cond[m][:, j]
            if self.heads[m].leaky and not renormalize_leaky:
                leak[tag] = parent_mass * cond[m][:, self.heads[m].leaky_index]
        return node_probs, leak


def predict_node_probs(model: Model, sample: np.ndarray, renormalize_leaky: bool = False):
    """Single-sample convenience wrapper returning plain floats."""
    x = np.asarray(sample, dtype=np.float64).reshape(1, -1)
    node_probs, leak = model.predict(x, renormalize_leaky)
    return (
        {tag: float(v[0]) for tag, v in node_probs.items()},
        {tag: float(v[0]) for tag, v in leak.items()},
    )


def write_predictions(model: Model, d: Dataset, renormalize_leaky: bool = False) -> str:
    """Predictions CSV: unconditional node probabilities per sample.

    Columns: id, one per node in depth-first order, then leak_<head> for
    each leaky head.  17 significant digits."""
    node_order = dfs_order(model.taxonomy)
    X = d.features_matrix()
    node_probs, leak = model.predict(X, renormalize_leaky=renormalize_leaky)
    leak_ids = [h.parent_tag for h in model.heads if h.leaky] if leak else []
    header = ["id"] + node_order + [f"leak_{h}" for h in leak_ids]
    lines = [",".join(header)]
    for i, s in enumerate(d.samples):
        vals = ["%.17g" % node_probs[tag][i] for tag in node_order]
        vals += ["%.17g" % leak[h][i] for h in leak_ids]
        lines.append(s.id + "," + ",".join(vals))
    return "\n".join(lines) + "\n"


def build_model(t: Taxonomy, kind: StrategyKind, input_dim: int,
                widths=(64, 32, 32), hidden: int = 32,
                dense_connectivity: bool = True, seed: int = 0,
                stream: SplitMix64 | None = None) -> Model:
    """Construct a strategy model with deterministic initialization."""
    if stream is None:
        stream = SplitMix64(seed).substream(f"init/{kind.value}")
    backbone = Backbone(input_dim, widths, dense_connectivity, stream)
    if kind is StrategyKind.LEAF_NODE:
        heads = [Head(id="__leaves__", parent_tag=t.root,
                      classes=tuple(leaves(t)), leaky=False)]
    else:
        heads = derive_heads(t, leaky=kind.leaky)
    return Model(t, kind, backbone, heads, hidden, stream)


def compute_loss(model: Model, x: np.ndarray, leafs, weights) -> float:
    """Masked multi-head loss of a batch of labelled samples."""
    targets = model.targets_matrix(leafs)
    return model.loss((x, targets, weights))


@dataclass
class TrainHistory:
    epochs: list[int]
    losses: list[float]
    lrs: list[float]

    def as_csv(self) -> str:
        lines = ["epoch,loss,lr"]
        for e, loss, lr in zip(self.epochs, self.losses, self.lrs):
            lines.append("%d,%.17g,%.17g" % (e, loss, lr))
        return "\n".join(lines) + "\n"


def train(d: Dataset, t: Taxonomy, kind: StrategyKind, cfg: TrainConfig,
          widths=(64, 32, 32), hidden: int = 32, dense_connectivity: bool = True,
          train_splits=(0, 1, 2, 3)) -> tuple[Model, TrainHistory]:
    """Train one strategy on the train-dev subsets, deterministically.

    Per epoch: Fisher-Yates shuffle from the "shuffle/<kind>" substream,
    minibatches of cfg.batch_size (trailing partial batch included), Adam
    updates at the scheduled learning rate.  The recorded epoch loss is
    the mean of batch losses.
    """
    train_set = d.subset(set(train_splits))
    if len(train_set) == 0:
        raise ValueError("empty training set (no samples in splits 0-3)")

    root = SplitMix64(cfg.seed)
    model = build_model(
        t, kind, input_dim=d.feature_dim, widths=widths, hidden=hidden,
        dense_connectivity=dense_connectivity,
        stream=root.substream(f"init/{kind.value}"),
    )
    shuffle_stream = root.substream(f"shuffle/{kind.value}")

    leafs = [s.leaf for s in train_set.samples]
    X = train_set.features_matrix()
    targets = model.targets_matrix(leafs)
    routings = [RoutedLabel(lf, model.route_targets(lf)) for lf in leafs]
    weights = class_weights(train_set, model.heads, routings)

    adam = Adam(model.parameters())
    history = TrainHistory([], [], [])
    n = len(train_set)
    for epoch in range(cfg.epochs):
        lr = cfg.lr.at_epoch(epoch)
        order = shuffle_stream.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = model.loss_and_backward((X[idx], targets[idx], weights))
            adam.step(lr)
            batch_losses.append(loss)
        history.epochs.append(epoch)
        history.losses.append(float(np.mean(batch_losses)))
        history.lrs.append(lr)
    return model, history


# ---- checkpoint serialization ------------------------------------------

_MAGIC = b"HTAXMDL1"
_KIND_CODES = {k: i for i, k in enumerate(StrategyKind)}
_KIND_FROM_CODE = {i: k for k, i in _KIND_CODES.items()}


class CheckpointError(ValueError):
    pass


def save_model(model: Model) -> bytes:
    """Versioned binary checkpoint; parameters in declaration order, LE f64."""
    bb = model.backbone
    head = struct.pack(
        "<8sBHB", _MAGIC, _KIND_CODES[model.kind], bb.input_dim, len(bb.widths)
    )
    head += struct.pack("<%dH" % len(bb.widths), *bb.widths)
    head += struct.pack("<HB", model.hidden_width, 1 if bb.dense_connectivity else 0)
    head += model.taxonomy.content_hash()
    blobs = [np.ascontiguousarray(p, dtype="<f8").tobytes() for p, _ in model.parameters()]
    return head + b"".join(blobs)


def load_model(data: bytes, t: Taxonomy) -> Model:
    off = struct.calcsize("<8sBHB")
    if len(data) < off:
        raise CheckpointError("truncated checkpoint header")
    magic, kind_code, input_dim, n_widths = struct.unpack_from("<8sBHB", data, 0)
    if magic != _MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if kind_code not in _KIND_FROM_CODE:
        raise CheckpointError(f"unknown strategy code {kind_code}")
    widths = struct.unpack_from("<%dH" % n_widths, data, off)
    off += struct.calcsize("<%dH" % n_widths)
    hidden, dense_flag = struct.unpack_from("<HB", data, off)
    off += struct.calcsize("<HB")
    tax_hash = data[off : off + 32]
    off += 32
    if tax_hash != t.content_hash():
        raise CheckpointError("checkpoint was built against a different taxonomy")

    model = build_model(
        t, _KIND_FROM_CODE[kind_code], input_dim=input_dim, widths=widths,
        hidden=hidden, dense_connectivity=bool(dense_flag), stream=None,
    )
    for p, _ in model.parameters():
        nbytes = p.size * 8
        if off + nbytes > len(data):
            raise CheckpointError("truncated checkpoint payload")
        p[...] = np.frombuffer(data[off : off + nbytes], dtype="<f8").reshape(p.shape)
        off += nbytes
    if off != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    return model
