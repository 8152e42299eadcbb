"""Small classifiers with permutation-injection points at every reduction.

Each model exposes two forward paths:

* an exact path (binary64, canonical order) that is differentiable with
  respect to inputs, weights, and soft-permutation entries.  A reduction
  sum_j u_j v_j becomes sum_j (P u)_j (P v)_j, which is invariant for hard
  permutation matrices (P^T P = I exactly) but not for the doubly-stochastic
  relaxation, so gradients can flow through the relaxation;
* an ordered path where every reduction is evaluated in an emulated IEEE-754
  format under an explicitly injected accumulation order, exposing the
  non-associativity the exact path hides.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np
import torch

from .orderedfp import ModeOverflowError, PrecisionMode
from .permkit import as_permutation, identity

torch.set_default_dtype(torch.float64)


class ModelKind(enum.Enum):
    LINEAR = "linear"
    MLP = "mlp"
    GNN = "gnn"


class Aggregation(enum.Enum):
    ADD = "add"
    MEAN = "mean"


@dataclass(frozen=True)
class Graph:
    n_nodes: int
    edges: np.ndarray  # (E, 2) of (src, dst)
    features: np.ndarray  # (n_nodes, d)
    labels: np.ndarray  # (n_nodes,)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.intp).reshape(-1, 2)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "features",
                           np.asarray(self.features, dtype=np.float64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.intp))
        if edges.size and (edges.min() < 0 or edges.max() >= self.n_nodes):
            raise ValueError("edge endpoints out of range")
        if self.features.shape[0] != self.n_nodes:
            raise ValueError("features must have one row per node")
        if self.labels.shape[0] != self.n_nodes:
            raise ValueError("labels must have one entry per node")

    @property
    def n_edges(self):
        return self.edges.shape[0]


@dataclass(frozen=True)
class InjectionPoint:
    layer_index: int
    perm: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "perm", as_permutation(self.perm))


@dataclass(frozen=True)
class ModelSpec:
    """Weights of a linear / MLP / mini-GNN classifier.

    For LINEAR and MLP, ``weights[l]`` has shape (fan_in, fan_out).  For GNN,
    the first ``n_conv`` entries are conv layers stored as stacked
    (W_self, W_nbr) pairs of shape (2, fan_in, fan_out), followed by the
    final classifier weight.
    """

    kind: ModelKind
    dims: tuple
    weights: tuple
    biases: tuple
    aggregation: Aggregation = Aggregation.ADD

    @property
    def n_classes(self):
        return self.dims[-1]

    @property
    def n_conv(self):
        return len(self.dims) - 2 if self.kind is ModelKind.GNN else 0

    def injection_lengths(self, graph=None):
        """Reduction stream length at each injection point.

        Dense layers reduce over their fan-in; GNN conv layers reduce over
        the global edge stream.
        """
        if self.kind is ModelKind.GNN:
            if graph is None:
                raise ValueError("GNN injection lengths require a graph")
            return [graph.n_edges] * self.n_conv + [int(self.dims[-2])]
        return [int(d) for d in self.dims[:-1]]


def init_model(kind, dims, seed=0, aggregation=Aggregation.ADD):
    """Gaussian-initialized model; deterministic per seed."""
    kind = ModelKind(kind)
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2 or dims[-1] < 2:
        raise ValueError("dims must give at least input size and >= 2 classes")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    if kind is ModelKind.GNN:
        if len(dims) < 3:
            raise ValueError("GNN dims must include at least one hidden size")
        for fan_in, fan_out in zip(dims[:-2], dims[1:-1]):
            scale = 1.0 / np.sqrt(fan_in)
            weights.append(rng.normal(0.0, scale, size=(2, fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        scale = 1.0 / np.sqrt(dims[-2])
        weights.append(rng.normal(0.0, scale, size=(dims[-2], dims[-1])))
        biases.append(np.zeros(dims[-1]))
    else:
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            scale = 1.0 / np.sqrt(fan_in)
            weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
    return ModelSpec(kind=kind, dims=dims,
                     weights=tuple(w.copy() for w in weights),
                     biases=tuple(b.copy() for b in biases),
                     aggregation=Aggregation(aggregation))


def linear_from_normal(nhat, bias=0.0):
    """Two-class linear model scoring along a hyperplane normal.

    Logits are (0, nhat . x - bias): class 1 iff the point lies on or above
    the hyperplane (argmax ties break to class 0 at the boundary).
    """
    nhat = np.asarray(nhat, dtype=np.float64)
    w = np.stack([np.zeros_like(nhat), nhat], axis=1)
    b = np.array([0.0, -float(bias)])
    return ModelSpec(kind=ModelKind.LINEAR, dims=(nhat.size, 2),
                     weights=(w,), biases=(b,))


# ---------------------------------------------------------------------------
# exact differentiable path (torch)
# ---------------------------------------------------------------------------


def _mix(fan_in, soft_perms, idx, device=None):
    """P^T P for the idx-th injection point, or None for identity."""
    if soft_perms is None or idx >= len(soft_perms) or soft_perms[idx] is None:
        return None
    p = soft_perms[idx]
    if not torch.is_tensor(p):
        p = torch.as_tensor(np.asarray(p, dtype=np.float64))
    if p.shape != (fan_in, fan_in):
        raise ValueError(
            f"soft permutation {idx} has shape {tuple(p.shape)}, expected "
            f"({fan_in}, {fan_in})")
    return p.T @ p


def _dense_exact(h, w, b, mix):
    if mix is not None:
        h = h @ mix
    return h @ w + b


def _forward_torch(model, x, soft_perms=None, graph=None):
    """Shared exact forward; ``x`` is a torch tensor (features for GNN)."""
    if model.kind is ModelKind.GNN:
        if graph is None:
            raise ValueError("GNN forward requires a graph")
        src = torch.as_tensor(graph.edges[:, 0], dtype=torch.long)
        dst = torch.as_tensor(graph.edges[:, 1], dtype=torch.long)
        deg = torch.zeros(graph.n_nodes)
        deg.index_add_(0, dst, torch.ones(graph.n_edges))
        h = x
        for l in range(model.n_conv):
            w_pair = torch.as_tensor(model.weights[l])
            b = torch.as_tensor(model.biases[l])
            msg = h[src]
            mix = _mix(graph.n_edges, soft_perms, l)
            if mix is not None:
                msg = mix @ msg
            agg = torch.zeros(graph.n_nodes, h.shape[1])
            agg = agg.index_add(0, dst, msg)
            if model.aggregation is Aggregation.MEAN:
                agg = agg / torch.clamp(deg, min=1.0)[:, None]
            h = torch.relu(h @ w_pair[0] + agg @ w_pair[1] + b)
        w_out = torch.as_tensor(model.weights[-1])
        b_out = torch.as_tensor(model.biases[-1])
        mix = _mix(int(model.dims[-2]), soft_perms, model.n_conv)
        return _dense_exact(h, w_out, b_out, mix)

    h = x if x.ndim == 2 else x[None, :]
    n_layers = len(model.weights)
    for l in range(n_layers):
        w = torch.as_tensor(model.weights[l])
        b = torch.as_tensor(model.biases[l])
        mix = _mix(w.shape[0], soft_perms, l)
        h = _dense_exact(h, w, b, mix)
        if l < n_layers - 1:
            h = torch.relu(h)
    return h if x.ndim == 2 else h[0]


def forward_exact(model, x, soft_perms=None, graph=None):
    """Full-precision canonical forward pass; returns numpy logits."""
    if model.kind is ModelKind.GNN:
        if graph is None and isinstance(x, Graph):
            graph, x = x, x.features
        feats = torch.as_tensor(np.asarray(x, dtype=np.float64))
        out = _forward_torch(model, feats, soft_perms, graph)
    else:
        out = _forward_torch(model, torch.as_tensor(np.asarray(x, dtype=np.float64)),
                             soft_perms)
    return out.detach().numpy()


# ---------------------------------------------------------------------------
# ordered reduced-precision path (numpy)
# ---------------------------------------------------------------------------


def _ordered_dense(h, w, b, order, dtype):
    """h @ w + b with per-step rounding and fan-in accumulated under ``order``."""
    h = h.astype(dtype)
    w = w.astype(dtype)
    acc = np.zeros((h.shape[0], w.shape[1]), dtype=dtype)
    with np.errstate(over="ignore", invalid="ignore"):
        for j in order:
            acc = acc + h[:, j, None] * w[None, j, :]
        acc = acc + b.astype(dtype)[None, :]
    return acc


def _ordered_scatter(msg, dst, n_nodes, order, dtype):
    """Scatter-add of messages into destination rows, accumulating in the
    injected stream order with per-step rounding."""
    agg = np.zeros((n_nodes, msg.shape[1]), dtype=dtype)
    msg = msg.astype(dtype)
    with np.errstate(over="ignore", invalid="ignore"):
        # np.add.at applies the updates sequentially in the order given,
        # rounding in dtype at every accumulation
        np.add.at(agg, dst[order], msg[order])
    return agg


def _injection_map(injections):
    mapping = {}
    for inj in injections or ():
        if inj.layer_index in mapping:
            raise ValueError(f"duplicate injection for layer {inj.layer_index}")
        mapping[inj.layer_index] = inj.perm
    return mapping


def forward_ordered(model, x, injections=None, mode=PrecisionMode.BINARY32,
                    graph=None):
    """Forward pass where every reduction runs in ``mode`` under its injected
    accumulation order (identity where not injected)."""
    dtype = mode.dtype
    inj = _injection_map(injections)

    if model.kind is ModelKind.GNN:
        if graph is None and isinstance(x, Graph):
            graph, x = x, x.features
        if graph is None:
            raise ValueError("GNN forward requires a graph")
        src = graph.edges[:, 0]
        dst = graph.edges[:, 1]
        deg = np.bincount(dst, minlength=graph.n_nodes).astype(dtype)
        h = np.asarray(x, dtype=np.float64).astype(dtype)
        for l in range(model.n_conv):
            order = inj.get(l)
            if order is None:
                order = identity(graph.n_edges)
            elif order.size != graph.n_edges:
                raise ValueError("injection length must equal edge count")
            agg = _ordered_scatter(h[src], dst, graph.n_nodes, order, dtype)
            if model.aggregation is Aggregation.MEAN:
                with np.errstate(invalid="ignore"):
                    agg = np.where(deg[:, None] > 0, agg / np.maximum(deg, 1)[:, None],
                                   agg)
            w_pair = model.weights[l]
            fan_in = w_pair.shape[1]
            h_self = _ordered_dense(h, w_pair[0], model.biases[l], identity(fan_in),
                                    dtype)
            h_nbr = _ordered_dense(agg, w_pair[1], np.zeros(w_pair.shape[2]),
                                   identity(fan_in), dtype)
            with np.errstate(over="ignore"):
                h = np.maximum(h_self + h_nbr, dtype(0))
        order = inj.get(model.n_conv)
        if order is None:
            order = identity(model.dims[-2])
        elif order.size != model.dims[-2]:
            raise ValueError("injection length must equal classifier fan-in")
        out = _ordered_dense(h, model.weights[-1], model.biases[-1],
                             order, dtype)
        result = out.astype(np.float64)
    else:
        arr = np.asarray(x, dtype=np.float64)
        h = arr if arr.ndim == 2 else arr[None, :]
        n_layers = len(model.weights)
        for l in range(n_layers):
            w = model.weights[l]
            order = inj.get(l)
            if order is None:
                order = identity(w.shape[0])
            elif order.size != w.shape[0]:
                raise ValueError("injection length must equal layer fan-in")
            h = _ordered_dense(h, w, model.biases[l], order, dtype)
            if l < n_layers - 1:
                h = np.maximum(h, dtype(0))
        result = h.astype(np.float64)
        if arr.ndim == 1:
            result = result[0]

    if np.any(np.isinf(result)) or np.any(np.isnan(result)):
        raise ModeOverflowError("ordered forward overflowed the emulated format")
    return result


# ---------------------------------------------------------------------------
# margins, losses, gradients, training
# ---------------------------------------------------------------------------


def margin(logits):
    """Top-1 minus top-2 score; 0 at an argmax tie."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size < 2:
        raise ValueError("margin needs at least two classes")
    top2 = np.sort(logits)[-2:]
    return float(top2[1] - top2[0])


def predict_class(logits):
    """Argmax with lowest-index tie-break."""
    return int(np.argmax(np.asarray(logits)))


def _loss_torch(logits, labels):
    if logits.ndim == 1:
        logits = logits[None, :]
        labels = labels.reshape(1)
    return torch.nn.functional.cross_entropy(logits, labels)


def loss_and_grads(model, x, label, soft_perms=None, graph=None, node=None):
    """Cross-entropy loss on the exact path plus reverse-mode gradients.

    Gradients are taken with respect to the input, all weights/biases, and
    any soft permutations supplied as torch tensors with requires_grad.
    For GNN models ``label`` is a per-node label array; restrict the loss to
    one node with ``node``.
    """
    if model.kind is ModelKind.GNN and graph is None and isinstance(x, Graph):
        graph, x = x, x.features
    x_t = torch.as_tensor(np.asarray(x, dtype=np.float64)).clone().requires_grad_(True)
    weights_t = [torch.as_tensor(w).clone().requires_grad_(True)
                 for w in model.weights]
    biases_t = [torch.as_tensor(b).clone().requires_grad_(True)
                for b in model.biases]
    shadow = replace(model, weights=tuple(weights_t), biases=tuple(biases_t))

    logits = _forward_torch(shadow, x_t, soft_perms, graph)
    labels_t = torch.as_tensor(np.asarray(label, dtype=np.int64))
    if model.kind is ModelKind.GNN and node is not None:
        loss = _loss_torch(logits[node], labels_t.reshape(-1)[node])
    else:
        loss = _loss_torch(logits, labels_t)

    grads = [x_t] + weights_t + biases_t
    soft_tensors = [p for p in (soft_perms or ()) if torch.is_tensor(p)
                    and p.requires_grad]
    grad_list = torch.autograd.grad(loss, grads + soft_tensors, allow_unused=True)
    nw = len(weights_t)

    def to_np(t):
        return None if t is None else t.detach().numpy().copy()

    return {
        "loss": float(loss.detach()),
        "grad_input": to_np(grad_list[0]),
        "grad_weights": [to_np(g) for g in grad_list[1:1 + nw]],
        "grad_biases": [to_np(g) for g in grad_list[1 + nw:1 + 2 * nw]],
        "grad_soft_perms": [to_np(g) for g in grad_list[1 + 2 * nw:]],
    }


def train(model, data, epochs, lr, seed=0):
    """Full-batch gradient descent on cross-entropy in exact mode.

    ``data`` is a :class:`Graph` for GNNs or an (X, y) pair otherwise.
    Deterministic per arguments; raises on divergence.
    """
    if model.kind is ModelKind.GNN:
        graph = data
        x_np = graph.features
        y_np = graph.labels
    else:
        graph = None
        x_np, y_np = data
    x_t = torch.as_tensor(np.asarray(x_np, dtype=np.float64))
    y_t = torch.as_tensor(np.asarray(y_np, dtype=np.int64))

    weights = [torch.as_tensor(w).clone().requires_grad_(True)
               for w in model.weights]
    biases = [torch.as_tensor(b).clone().requires_grad_(True)
              for b in model.biases]
    params = weights + biases
    for _ in range(epochs):
        shadow = replace(model, weights=tuple(weights), biases=tuple(biases))
        logits = _forward_torch(shadow, x_t, None, graph)
        loss = _loss_torch(logits, y_t)
        if not torch.isfinite(loss):
            raise FloatingPointError("training diverged (non-finite loss)")
        grads = torch.autograd.grad(loss, params)
        with torch.no_grad():
            for p, g in zip(params, grads):
                p -= lr * g
    return replace(model,
                   weights=tuple(w.detach().numpy().copy() for w in weights),
                   biases=tuple(b.detach().numpy().copy() for b in biases))


def accuracy(model, data, graph=None):
    if model.kind is ModelKind.GNN:
        graph = data if isinstance(data, Graph) else graph
        logits = forward_exact(model, graph.features, graph=graph)
        return float(np.mean(np.argmax(logits, axis=1) == graph.labels))
    x, y = data
    logits = forward_exact(model, x)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(y)))


# ---------------------------------------------------------------------------
# data generation and ingestion
# ---------------------------------------------------------------------------


def synthetic_graph(n_nodes, n_classes, feat_dim, seed, edges_per_node=4,
                    p_intra=0.8, feature_snr=1.0, feature_scale=1.0):
    """Stochastic-block-model graph with class-correlated features."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_classes, size=n_nodes)
    centroids = rng.normal(0.0, 1.0, size=(n_classes, feat_dim))
    feats = feature_scale * (feature_snr * centroids[labels]
                             + rng.normal(0.0, 1.0, size=(n_nodes, feat_dim)))
    edges = []
    for v in range(n_nodes):
        same = np.flatnonzero(labels == labels[v])
        other = np.flatnonzero(labels != labels[v])
        for _ in range(edges_per_node):
            pool = same if (rng.random() < p_intra and same.size > 1) else other
            if pool.size == 0:
                continue
            u = int(pool[rng.integers(pool.size)])
            if u != v:
                edges.append((u, v))
    return Graph(n_nodes=n_nodes, edges=np.asarray(edges, dtype=np.intp),
                 features=feats, labels=labels)


def separable_blobs(n_per_class, feat_dim, seed, separation=4.0):
    """Linearly separable 2-class point cloud."""
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=feat_dim)
    direction /= np.linalg.norm(direction)
    x0 = rng.normal(size=(n_per_class, feat_dim)) - separation / 2 * direction
    x1 = rng.normal(size=(n_per_class, feat_dim)) + separation / 2 * direction
    x = np.vstack([x0, x1])
    y = np.concatenate([np.zeros(n_per_class, dtype=np.intp),
                        np.ones(n_per_class, dtype=np.intp)])
    return x, y


def load_graph(edges_csv, features_csv, labels_csv):
    """Edge-list ingestion: src,dst per line plus feature and label CSVs."""
    edges = np.loadtxt(edges_csv, delimiter=",", dtype=np.intp, ndmin=2)
    features = np.loadtxt(features_csv, delimiter=",", dtype=np.float64, ndmin=2)
    labels = np.loadtxt(labels_csv, delimiter=",", dtype=np.intp, ndmin=1)
    return Graph(n_nodes=features.shape[0], edges=edges, features=features,
                 labels=labels)


def save_graph(graph, edges_csv, features_csv, labels_csv):
    np.savetxt(edges_csv, graph.edges, delimiter=",", fmt="%d")
    np.savetxt(features_csv, graph.features, delimiter=",")
    np.savetxt(labels_csv, graph.labels, delimiter=",", fmt="%d")
