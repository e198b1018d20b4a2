"""Multi-scale supernet: grid DAG, shared cells, and the relaxed forward pass.

Vertices live on a (layer, scale) grid. A vertex at layer l-1 owns up to four
outgoing edge kinds toward layer l: contracting (scale+1), non-scaling,
expanding (scale-1), and a parameter-free skip. Every non-skip edge carries a
cell; cell topology and its architecture parameters (alpha over ops, gamma
over intra-cell edges) are shared per cell kind, while the operator weights
are per cell instance. Scale s is only populated once s contracting steps can
have happened, so vertex (l, s) exists iff s <= l.

Feature-map widths are canonical per scale: C_s = C0 * 2^s. A cell outputs
the concatenation of its m intermediate nodes, so each internal node carries
C_s / m channels and the whole sum in the layer-transition rule (cells plus
skip) stays shape-consistent.
"""

from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from . import autodiff as ad
from . import ops
from .errors import ArgumentError, ConfigError, ShapeError

EDGE_KINDS = ("contract", "nonscale", "expand", "skip")
CELL_KINDS = ("contract", "nonscale", "expand")


def edge_kinds_at(s, num_scales):
    """Outgoing edge kinds available at scale s, in canonical order."""
    kinds = []
    if s + 1 < num_scales:
        kinds.append("contract")
    kinds.append("nonscale")
    if s > 0:
        kinds.append("expand")
    kinds.append("skip")
    return kinds


def cell_edges(m):
    """Intra-cell searchable edges [(source i, node j)] in canonical order."""
    return [(i, j) for j in range(1, m + 1) for i in range(j)]


@dataclass
class SearchConfig:
    layers: int = 4
    scales: int = 3
    nodes_per_cell: int = 2
    base_channels: int = 4
    k_partial: int = 2
    num_classes: int = 2
    input_shape: tuple = (8, 16, 16)
    n_fusion: int = 2

    def validate(self):
        if self.layers < 1 or self.scales < 1:
            raise ConfigError("need at least 1 layer and 1 scale")
        if self.nodes_per_cell < 1:
            raise ConfigError("cells need at least one intermediate node")
        if self.k_partial < 1:
            raise ConfigError("k_partial must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("segmentation needs >= 2 classes")
        if self.n_fusion < 1:
            raise ConfigError("n_fusion must be >= 1")
        if self.base_channels % self.nodes_per_cell != 0:
            raise ConfigError(
                f"base channels {self.base_channels} must be divisible by "
                f"m={self.nodes_per_cell} (cell output is the concat of m nodes)")
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be (D,H,W), got {self.input_shape}")
        down = 2 ** (self.scales - 1)
        for v in self.input_shape:
            if v % down != 0 or v < down:
                raise ConfigError(
                    f"input extents {self.input_shape} must be divisible by {down}")
        if self.k_partial > 1:
            for s in range(self.scales):
                if self.internal_channels(s) % self.k_partial != 0:
                    raise ConfigError(
                        f"internal width {self.internal_channels(s)} at scale {s} "
                        f"not divisible by k={self.k_partial}")
        return self

    def canonical_channels(self, s):
        return self.base_channels * (2 ** s)

    def internal_channels(self, s):
        return self.canonical_channels(s) // self.nodes_per_cell

    def spatial(self, s):
        return tuple(v // (2 ** s) for v in self.input_shape)

    def reachable(self, l, s):
        return 0 <= s < self.scales and s <= l <= self.layers

    def to_dict(self):
        return {
            "layers": self.layers, "scales": self.scales,
            "nodes_per_cell": self.nodes_per_cell,
            "base_channels": self.base_channels, "k_partial": self.k_partial,
            "num_classes": self.num_classes, "input_shape": list(self.input_shape),
            "n_fusion": self.n_fusion,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d).validate()


def target_scale(s, kind):
    return {"contract": s + 1, "nonscale": s, "expand": s - 1, "skip": s}[kind]


class Cell:
    """One cell instance: preprocess conv plus a weight bank per (edge, op)."""

    def __init__(self, cfg, kind, s_src, rng):
        self.kind = kind
        self.s_src = s_src
        self.s_tgt = target_scale(s_src, kind)
        cin = cfg.canonical_channels(self.s_src)
        self.c_internal = cfg.internal_channels(self.s_tgt)
        self.c_op = self.c_internal // cfg.k_partial
        self.pre_w, self.pre_b = ops.init_conv_weights(rng, cin, self.c_internal, 1)
        self.edge_ops = []
        for _ in cell_edges(cfg.nodes_per_cell):
            bank = {}
            for op_kind in ops.PRIMITIVE_OPS:
                bank[op_kind] = ops.init_primitive_weights(rng, op_kind, self.c_op)
            self.edge_ops.append(bank)

    def preprocess(self, x):
        if self.kind == "contract":
            return ops.contract_preprocess(x, self.pre_w, self.pre_b)
        if self.kind == "expand":
            return ops.expand_preprocess(x, self.pre_w, self.pre_b)
        return ops.nonscale_preprocess(x, self.pre_w, self.pre_b)

    def named_parameters(self, prefix):
        out = {f"{prefix}/pre/w": self.pre_w, f"{prefix}/pre/b": self.pre_b}
        for e, bank in enumerate(self.edge_ops):
            for op_kind, weights in bank.items():
                for name, t in weights.items():
                    out[f"{prefix}/e{e}/{op_kind}/{name}"] = t
        return out


@dataclass
class ArchParams:
    """Differentiable architecture parameters: alpha (op choice per intra-cell
    edge), gamma (intra-cell edge choice per node), beta (grid edge kinds).
    alpha/gamma are shared per cell kind; beta is per grid vertex."""

    alpha: dict = field(default_factory=dict)   # kind -> [Tensor(6)] per edge
    gamma: dict = field(default_factory=dict)   # kind -> [Tensor(j)] per node j
    beta: dict = field(default_factory=dict)    # (l, s) -> Tensor(len(kinds))

    @classmethod
    def zeros(cls, cfg):
        p = cls()
        n_ops = len(ops.PRIMITIVE_OPS)
        for kind in CELL_KINDS:
            p.alpha[kind] = [ad.Tensor(np.zeros(n_ops), requires_grad=True)
                             for _ in cell_edges(cfg.nodes_per_cell)]
            p.gamma[kind] = [ad.Tensor(np.zeros(j), requires_grad=True)
                             for j in range(1, cfg.nodes_per_cell + 1)]
        for l in range(cfg.layers):
            for s in range(cfg.scales):
                if cfg.reachable(l, s):
                    p.beta[(l, s)] = ad.Tensor(
                        np.zeros(len(edge_kinds_at(s, cfg.scales))), requires_grad=True)
        return p

    def named_parameters(self):
        out = {}
        for kind in CELL_KINDS:
            for e, t in enumerate(self.alpha[kind]):
                out[f"alpha/{kind}/e{e}"] = t
            for j, t in enumerate(self.gamma[kind], start=1):
                out[f"gamma/{kind}/n{j}"] = t
        for (l, s), t in sorted(self.beta.items()):
            out[f"beta/l{l}/s{s}"] = t
        return out

    def all_tensors(self):
        return list(self.named_parameters().values())


class Supernet:
    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.stem_w, self.stem_b = ops.init_conv_weights(rng, 1, cfg.base_channels, 3)
        self.head_w, self.head_b = ops.init_conv_weights(
            rng, cfg.base_channels, cfg.num_classes, 1)
        self.cells = {}
        for l in range(cfg.layers):
            for s in range(cfg.scales):
                if not cfg.reachable(l, s):
                    continue
                for kind in edge_kinds_at(s, cfg.scales):
                    if kind != "skip":
                        self.cells[(l, s, kind)] = Cell(cfg, kind, s, rng)

    def vertex_count(self):
        return sum(1 for l in range(self.cfg.layers + 1)
                   for s in range(self.cfg.scales) if self.cfg.reachable(l, s))

    def edge_count(self):
        """Grid edges from reachable vertices, skip included."""
        return sum(len(edge_kinds_at(s, self.cfg.scales))
                   for l in range(self.cfg.layers)
                   for s in range(self.cfg.scales) if self.cfg.reachable(l, s))

    def named_parameters(self):
        out = {"stem/w": self.stem_w, "stem/b": self.stem_b,
               "head/w": self.head_w, "head/b": self.head_b}
        for (l, s, kind), cell in sorted(self.cells.items()):
            out.update(cell.named_parameters(f"cell/l{l}/s{s}/{kind}"))
        return out

    def all_tensors(self):
        return list(self.named_parameters().values())


def build_supernet(cfg, rng_seed=0):
    """Construct the supernet with He-initialized weights and zeroed
    architecture parameters (uniform probabilities after softmax)."""
    cfg.validate()
    rng = np.random.default_rng(rng_seed)
    return Supernet(cfg, rng), ArchParams.zeros(cfg)


def prob_alpha(params):
    return {kind: [ad.softmax(t, axis=0) for t in ts]
            for kind, ts in params.alpha.items()}


def prob_gamma(params):
    return {kind: [ad.softmax(t, axis=0) for t in ts]
            for kind, ts in params.gamma.items()}


def prob_beta(params):
    return {key: ad.softmax(t, axis=0) for key, t in params.beta.items()}


def beta_prob_map(params, cfg):
    """Detached {(l, s): {kind: float}} view of the beta probabilities."""
    out = {}
    for (l, s), t in params.beta.items():
        p = ad.softmax(t, axis=0).data
        out[(l, s)] = dict(zip(edge_kinds_at(s, cfg.scales), p.tolist()))
    return out


def _mixed_op(cell, e, x, p_alpha_edge):
    terms = []
    for k, op_kind in enumerate(ops.PRIMITIVE_OPS):
        y = ops.apply_primitive(op_kind, x, cell.edge_ops[e][op_kind])
        terms.append(ad.smul(y, ad.element(p_alpha_edge, k)))
    return reduce(ad.add, terms)


def cell_forward(cell, x_in, params, k_partial, probs=None):
    """Relaxed cell evaluation with partial channel connection.

    Per source: the first C/k channels run through the alpha-weighted mixed
    op, the rest bypass untouched; both halves are concatenated and the
    result is gamma-weighted and summed over sources. k_partial=1 degenerates
    to the plain relaxed mixture (full slice, empty bypass).
    """
    if probs is None:
        probs = (prob_alpha(params), prob_gamma(params))
    p_alpha, p_gamma = probs
    v0 = cell.preprocess(x_in)
    c = cell.c_internal
    if c % k_partial != 0:
        raise ConfigError(f"{c} channels not divisible by k={k_partial}")
    c_slice = c // k_partial
    if c_slice != cell.c_op:
        raise ConfigError(
            f"cell ops sized for {cell.c_op} channels but k={k_partial} "
            f"slices {c_slice}")
    nodes = [v0]
    edges = cell_edges(len(params.gamma[cell.kind]))
    for j in range(1, len(params.gamma[cell.kind]) + 1):
        p_g = p_gamma[cell.kind][j - 1]
        contribs = []
        for i in range(j):
            e = edges.index((i, j))
            head = ad.slice_channels(nodes[i], 0, c_slice)
            mixed = _mixed_op(cell, e, head, p_alpha[cell.kind][e])
            if c_slice < c:
                bypass = ad.slice_channels(nodes[i], c_slice, c)
                combined = ad.concat_channels([mixed, bypass])
            else:
                combined = mixed
            contribs.append(ad.smul(combined, ad.element(p_g, i)))
        nodes.append(reduce(ad.add, contribs))
    return ad.concat_channels(nodes[1:])


def cell_forward_unsplit(cell, x_in, params, probs=None):
    """Plain relaxed mixture with no channel splitting; only valid when the
    cell was built with k_partial=1 (op weights span the full width)."""
    if cell.c_op != cell.c_internal:
        raise ArgumentError("unsplit evaluation needs k_partial=1 op weights")
    if probs is None:
        probs = (prob_alpha(params), prob_gamma(params))
    p_alpha, p_gamma = probs
    v0 = cell.preprocess(x_in)
    nodes = [v0]
    edges = cell_edges(len(params.gamma[cell.kind]))
    for j in range(1, len(params.gamma[cell.kind]) + 1):
        p_g = p_gamma[cell.kind][j - 1]
        contribs = []
        for i in range(j):
            e = edges.index((i, j))
            mixed = _mixed_op(cell, e, nodes[i], p_alpha[cell.kind][e])
            contribs.append(ad.smul(mixed, ad.element(p_g, i)))
        nodes.append(reduce(ad.add, contribs))
    return ad.concat_channels(nodes[1:])


def network_forward(net, x, params, k_partial=None):
    """Relaxed supernet forward: per vertex, sum the beta-weighted incoming
    cell outputs plus the beta-weighted skip of the previous feature map."""
    cfg = net.cfg
    if k_partial is None:
        k_partial = cfg.k_partial
    if x.data.ndim != 5 or x.data.shape[1] != 1:
        raise ShapeError(f"input must be [N,1,D,H,W], got {x.data.shape}")
    if tuple(x.data.shape[2:]) != tuple(cfg.input_shape):
        raise ShapeError(
            f"input spatial {x.data.shape[2:]} != configured {cfg.input_shape}")

    p_alpha = prob_alpha(params)
    p_gamma = prob_gamma(params)
    p_beta = prob_beta(params)
    probs = (p_alpha, p_gamma)

    feat = {(0, 0): ops.conv3d(x, net.stem_w, net.stem_b, stride=1, pad=1)}
    for l in range(1, cfg.layers + 1):
        for s in range(cfg.scales):
            if not cfg.reachable(l, s):
                continue
            contribs = []
            for src, kind in (((l - 1, s - 1), "contract"),
                              ((l - 1, s), "nonscale"),
                              ((l - 1, s + 1), "expand"),
                              ((l - 1, s), "skip")):
                if src not in feat:
                    continue
                kinds = edge_kinds_at(src[1], cfg.scales)
                if kind not in kinds:
                    continue
                weight = ad.element(p_beta[src], kinds.index(kind))
                if kind == "skip":
                    contribs.append(ad.smul(feat[src], weight))
                else:
                    cell = net.cells[(src[0], src[1], kind)]
                    out = cell_forward(cell, feat[src], params, k_partial, probs)
                    contribs.append(ad.smul(out, weight))
            feat[(l, s)] = reduce(ad.add, contribs)
    return ops.conv3d(feat[(cfg.layers, 0)], net.head_w, net.head_b, stride=1, pad=0)
