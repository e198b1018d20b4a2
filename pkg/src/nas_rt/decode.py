"""Discrete architecture decoding, path fusion, JSON export, and execution.

Cell decoding takes the argmax over gamma (one source per node) and over
alpha restricted to non-zero ops (an argmax of "zero" would delete the node).
Network decoding extracts the top-n longest paths, excluding the degenerate
all-skip path, and fuses them: the retained edge set is the union of path
edges, and feature maps arriving at a shared vertex are summed element-wise.
"""

import json
import statistics
import time
from dataclasses import dataclass
from functools import reduce

import numpy as np

from . import autodiff as ad
from . import latency as lat
from . import ops, space
from .errors import DecodeError
from .space import SearchConfig, target_scale

# cell-kind names used in the architecture file
_KIND_TO_JSON = {"contract": "contracting", "nonscale": "nonscaling",
                 "expand": "expanding"}
_JSON_TO_KIND = {v: k for k, v in _KIND_TO_JSON.items()}


@dataclass
class CellArch:
    """kind plus, per intermediate node j, the chosen (source, op) pair."""
    kind: str
    nodes: list  # [(source index, op kind)] for j = 1..m

    def to_json(self):
        return {"nodes": [{"source": s, "op": op} for (s, op) in self.nodes]}


@dataclass
class ArchGraph:
    cfg: SearchConfig
    cells: dict     # kind -> CellArch
    edges: list     # sorted [(layer, from_scale, to_scale, kind)]
    merge: str = "sum"

    def validate(self):
        cfg = self.cfg
        for idx, (l, s, t, kind) in enumerate(self.edges):
            where = f"edges[{idx}]"
            if kind not in ("contract", "nonscale", "expand", "skip"):
                raise DecodeError(f"{where}.kind: unknown kind {kind!r}")
            if not (0 <= l < cfg.layers):
                raise DecodeError(f"{where}.layer: {l} outside [0,{cfg.layers})")
            if not (cfg.reachable(l, s) and cfg.reachable(l + 1, t)):
                raise DecodeError(f"{where}: vertex out of grid (l={l}, {s}->{t})")
            if t != target_scale(s, kind):
                raise DecodeError(
                    f"{where}: kind {kind} cannot step scale {s} -> {t}")
        if len(set(self.edges)) != len(self.edges):
            raise DecodeError("duplicate edges in architecture")
        # connectivity: everything reachable from stem and co-reachable from head
        verts = {(0, 0), (self.cfg.layers, 0)}
        fwd, bwd = {}, {}
        for (l, s, t, kind) in self.edges:
            verts.add((l, s))
            verts.add((l + 1, t))
            fwd.setdefault((l, s), []).append((l + 1, t))
            bwd.setdefault((l + 1, t), []).append((l, s))
        for (start, adj, label) in (((0, 0), fwd, "reachable from the stem"),
                                    ((self.cfg.layers, 0), bwd, "co-reachable from the head")):
            seen = {start}
            stack = [start]
            while stack:
                for nxt in adj.get(stack.pop(), []):
                    if nxt not in seen:
                        seen.add(nxt)
                        stack.append(nxt)
            missing = verts - seen
            if missing:
                raise DecodeError(f"vertices not {label}: {sorted(missing)}")
        for kind, cell in self.cells.items():
            m = self.cfg.nodes_per_cell
            if len(cell.nodes) != m:
                raise DecodeError(f"cells.{_KIND_TO_JSON[kind]}: expected {m} nodes")
            for j, (src, op) in enumerate(cell.nodes, start=1):
                where = f"cells.{_KIND_TO_JSON[kind]}.nodes[{j - 1}]"
                if not (0 <= src < j):
                    raise DecodeError(f"{where}.source: {src} not < node index {j}")
                if op not in ops.PRIMITIVE_OPS or op == "zero":
                    raise DecodeError(f"{where}.op: invalid op {op!r}")
        return self


def decode_cell(params, kind):
    """Argmax over gamma (source) and over non-zero alpha entries (op); ties
    break toward the lowest index."""
    nodes = []
    m = len(params.gamma[kind])
    edges = space.cell_edges(m)
    for j in range(1, m + 1):
        p_g = ad.softmax(params.gamma[kind][j - 1], axis=0).data
        src = int(np.argmax(p_g))
        e = edges.index((src, j))
        p_a = ad.softmax(params.alpha[kind][e], axis=0).data.copy()
        p_a[ops.ZERO_INDEX] = -np.inf
        nodes.append((src, ops.PRIMITIVE_OPS[int(np.argmax(p_a))]))
    return CellArch(kind=kind, nodes=nodes)


def decode_network(params, cfg, n):
    """Top-n longest paths by current beta probabilities, all-skip excluded."""
    probs = space.beta_prob_map(params, cfg)
    # one extra candidate covers the (unique) all-skip path if it ranks high
    top = lat.top_n_longest_paths(probs, n + 1, cfg.layers, cfg.scales)
    kept = [p for p in top.paths
            if not all(step[3] == "skip" for step in p.steps)]
    return kept[:n]


def fuse_paths(paths, params, cfg):
    """Union the edges of the given paths into one deployable graph; shared
    vertices merge by element-wise sum (widths are canonical per scale)."""
    if not paths:
        raise DecodeError("cannot fuse an empty path list")
    for p in paths:
        if p.steps[-1][2] != 0:
            raise DecodeError(f"path does not end at scale 0: {p.steps}")
    edges = sorted({step for p in paths for step in p.steps})
    cells = {kind: decode_cell(params, kind) for kind in space.CELL_KINDS}
    return ArchGraph(cfg=cfg, cells=cells, edges=edges).validate()


def export_arch(arch, path):
    payload = {
        "config": arch.cfg.to_dict(),
        "cells": {_KIND_TO_JSON[k]: c.to_json() for k, c in sorted(arch.cells.items())},
        "edges": [{"layer": l, "from_scale": s, "to_scale": t, "kind": kind}
                  for (l, s, t, kind) in arch.edges],
        "merge": arch.merge,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def import_arch(path):
    with open(path) as fh:
        payload = json.load(fh)
    for key in ("config", "cells", "edges", "merge"):
        if key not in payload:
            raise DecodeError(f"{key}: missing required key")
    try:
        cfg = SearchConfig.from_dict(payload["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DecodeError(f"config: {exc}") from None
    cells = {}
    for json_kind, body in payload["cells"].items():
        if json_kind not in _JSON_TO_KIND:
            raise DecodeError(f"cells.{json_kind}: unknown cell kind")
        try:
            nodes = [(int(n["source"]), str(n["op"])) for n in body["nodes"]]
        except (KeyError, TypeError) as exc:
            raise DecodeError(f"cells.{json_kind}: malformed nodes ({exc})") from None
        cells[_JSON_TO_KIND[json_kind]] = CellArch(_JSON_TO_KIND[json_kind], nodes)
    edges = []
    for idx, e in enumerate(payload["edges"]):
        try:
            edges.append((int(e["layer"]), int(e["from_scale"]),
                          int(e["to_scale"]), str(e["kind"])))
        except (KeyError, TypeError) as exc:
            raise DecodeError(f"edges[{idx}]: malformed edge ({exc})") from None
    arch = ArchGraph(cfg=cfg, cells=cells, edges=edges,
                     merge=str(payload["merge"]))
    if arch.merge != "sum":
        raise DecodeError(f"merge: unsupported rule {arch.merge!r}")
    return arch.validate()


class DiscreteCell:
    """One deployed cell: preprocess conv plus the chosen op per node, at the
    full internal width (partial channel connection is search-only)."""

    def __init__(self, cfg, cell_arch, s_src, rng):
        self.kind = cell_arch.kind
        self.arch = cell_arch
        self.s_tgt = target_scale(s_src, self.kind)
        c = cfg.internal_channels(self.s_tgt)
        self.pre_w, self.pre_b = ops.init_conv_weights(
            rng, cfg.canonical_channels(s_src), c, 1)
        self.node_weights = [ops.init_primitive_weights(rng, op, c)
                             for (_src, op) in cell_arch.nodes]

    def forward(self, x):
        if self.kind == "contract":
            v0 = ops.contract_preprocess(x, self.pre_w, self.pre_b)
        elif self.kind == "expand":
            v0 = ops.expand_preprocess(x, self.pre_w, self.pre_b)
        else:
            v0 = ops.nonscale_preprocess(x, self.pre_w, self.pre_b)
        nodes = [v0]
        for (src, op), weights in zip(self.arch.nodes, self.node_weights):
            nodes.append(ops.apply_primitive(op, nodes[src], weights))
        return ad.concat_channels(nodes[1:])

    def named_parameters(self, prefix):
        out = {f"{prefix}/pre/w": self.pre_w, f"{prefix}/pre/b": self.pre_b}
        for j, weights in enumerate(self.node_weights, start=1):
            for name, t in weights.items():
                out[f"{prefix}/n{j}/{name}"] = t
        return out


class DiscreteNetwork:
    """Executable form of an ArchGraph with freshly initialized weights."""

    def __init__(self, arch, rng_seed=0):
        arch.validate()
        self.arch = arch
        self.cfg = arch.cfg
        rng = np.random.default_rng(rng_seed)
        self.stem_w, self.stem_b = ops.init_conv_weights(
            rng, 1, self.cfg.base_channels, 3)
        self.head_w, self.head_b = ops.init_conv_weights(
            rng, self.cfg.base_channels, self.cfg.num_classes, 1)
        self.cells = {}
        for (l, s, t, kind) in arch.edges:
            if kind != "skip":
                self.cells[(l, s, kind)] = DiscreteCell(
                    self.cfg, arch.cells[kind], s, rng)

    def forward(self, x):
        feat = {(0, 0): ops.conv3d(x, self.stem_w, self.stem_b, stride=1, pad=1)}
        incoming = {}
        for (l, s, t, kind) in self.arch.edges:
            incoming.setdefault((l + 1, t), []).append((l, s, kind))
        for (l, t) in sorted(incoming):
            contribs = []
            for (ll, s, kind) in incoming[(l, t)]:
                src = feat[(ll, s)]
                if kind == "skip":
                    contribs.append(src)
                else:
                    contribs.append(self.cells[(ll, s, kind)].forward(src))
            feat[(l, t)] = reduce(ad.add, contribs)
        return ops.conv3d(feat[(self.cfg.layers, 0)], self.head_w, self.head_b,
                          stride=1, pad=0)

    def named_parameters(self):
        out = {"stem/w": self.stem_w, "stem/b": self.stem_b,
               "head/w": self.head_w, "head/b": self.head_b}
        for (l, s, kind), cell in sorted(self.cells.items()):
            out.update(cell.named_parameters(f"edge/l{l}/s{s}/{kind}"))
        return out

    def all_tensors(self):
        return list(self.named_parameters().values())


def estimate_arch_latency(arch, table):
    """Table-based latency of the deployed graph: stem + head + each retained
    non-skip edge's preprocess and chosen ops (each unique edge once)."""
    cfg = arch.cfg
    total = table.get(lat.stem_signature(cfg)) + table.get(lat.head_signature(cfg))
    for (l, s, t, kind) in arch.edges:
        if kind == "skip":
            continue
        total += table.get(lat.preprocess_signature(cfg, kind, s))
        for (_src, op) in arch.cells[kind].nodes:
            total += table.get(lat.primitive_signature(cfg, op, t))
    return total


def path_estimated_latency(path, arch, table):
    """Table-based latency of one path's edges (stem/head excluded)."""
    cfg = arch.cfg
    total = 0.0
    for (l, s, t, kind) in path.steps:
        if kind == "skip":
            continue
        total += table.get(lat.preprocess_signature(cfg, kind, s))
        for (_src, op) in arch.cells[kind].nodes:
            total += table.get(lat.primitive_signature(cfg, op, t))
    return total


def measure_inference(net, reps=30, warmup=5, rng=None):
    """Median single-sample forward latency in seconds (pinned, serial)."""
    rng = rng or np.random.default_rng(0)
    x = ad.Tensor(rng.uniform(0.0, 1.0, (1, 1) + tuple(net.cfg.input_shape)))
    with lat._pinned_serial_timing(), ad.no_grad():
        for _ in range(warmup):
            net.forward(x)
        samples = []
        for _ in range(reps):
            t0 = time.perf_counter()
            net.forward(x)
            samples.append(time.perf_counter() - t0)
    return statistics.median(samples)
