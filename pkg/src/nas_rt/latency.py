"""Operator latency profiling and the differentiable expected-latency model.

Per-operator runtimes are measured once into a lookup table keyed by operator
signature. The expected latency of a mixed op is the Gumbel-Softmax-weighted
sum of its candidates' table entries; cell latency adds the preprocess cost
and gamma-weighted mixed ops; network latency sums the expected latency of
the top-n longest grid paths (path length = product of outgoing-edge
probabilities along the path), recomputed from the current probabilities.
Everything stays differentiable w.r.t. the architecture parameters; each
Gumbel draw is a constant of the pass, shared per parameter group.

Lookup semantics follow deployed networks: expectations consume full-width
(non-partial) entries. Partial-width entries are profiled alongside so the
table also documents search-time workloads.
"""

import json
import os
import platform
import statistics
import time
from dataclasses import dataclass
from functools import reduce

import numpy as np

from . import autodiff as ad
from . import backend, ops
from .errors import ArgumentError, ConfigError, TableLookupError
from .space import cell_edges, edge_kinds_at, target_scale

PREPROCESS_OPS = ("pre_contract", "pre_nonscale", "pre_expand")


@dataclass(frozen=True, order=True)
class OpSignature:
    op: str
    cin: int
    cout: int
    d: int
    h: int
    w: int
    partial: bool = False

    def describe(self):
        tag = " partial" if self.partial else ""
        return f"{self.op}[{self.cin}->{self.cout} @ {self.d}x{self.h}x{self.w}{tag}]"


class LatencyTable:
    """Map OpSignature -> measured seconds, with an access counter so tests
    can prove the accuracy-only path never touches it."""

    def __init__(self, entries=None, metadata=None):
        self.entries = dict(entries or {})
        self.metadata = dict(metadata or {})
        self.lookup_count = 0

    def get(self, sig):
        self.lookup_count += 1
        try:
            return self.entries[sig]
        except KeyError:
            raise TableLookupError(f"no latency entry for {sig.describe()}") from None

    def __len__(self):
        return len(self.entries)

    def save(self, path):
        payload = {
            "metadata": self.metadata,
            "entries": [
                {"op": s.op, "cin": s.cin, "cout": s.cout, "d": s.d, "h": s.h,
                 "w": s.w, "partial": s.partial, "seconds": sec}
                for s, sec in sorted(self.entries.items())
            ],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            payload = json.load(fh)
        entries = {
            OpSignature(e["op"], e["cin"], e["cout"], e["d"], e["h"], e["w"],
                        e["partial"]): e["seconds"]
            for e in payload["entries"]
        }
        return cls(entries, payload.get("metadata", {}))


def preprocess_signature(cfg, kind, s_src):
    s_tgt = target_scale(s_src, kind)
    return OpSignature(f"pre_{kind}", cfg.canonical_channels(s_src),
                       cfg.internal_channels(s_tgt), *cfg.spatial(s_src))


def primitive_signature(cfg, op_kind, s_tgt, partial=False):
    c = cfg.internal_channels(s_tgt)
    if partial:
        c //= cfg.k_partial
    return OpSignature(op_kind, c, c, *cfg.spatial(s_tgt), partial=partial)


def stem_signature(cfg):
    return OpSignature("stem", 1, cfg.base_channels, *cfg.input_shape)


def head_signature(cfg):
    return OpSignature("head", cfg.base_channels, cfg.num_classes, *cfg.input_shape)


def enumerate_signatures(cfg):
    """Every signature reachable in the supernet, deterministic order."""
    sigs = [stem_signature(cfg), head_signature(cfg)]
    max_src = min(cfg.scales, cfg.layers)
    targets = set()
    for s in range(max_src):
        for kind in edge_kinds_at(s, cfg.scales):
            if kind == "skip":
                continue
            sigs.append(preprocess_signature(cfg, kind, s))
            targets.add(target_scale(s, kind))
    for t in sorted(targets):
        for op_kind in ops.PRIMITIVE_OPS:
            sigs.append(primitive_signature(cfg, op_kind, t))
            if cfg.k_partial > 1:
                sigs.append(primitive_signature(cfg, op_kind, t, partial=True))
    seen, out = set(), []
    for s in sigs:
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out


def _build_runner(sig, rng):
    """Materialize the op named by a signature on random data; returns a
    zero-argument callable executing one forward pass."""
    x = ad.Tensor(rng.uniform(-1.0, 1.0, (1, sig.cin, sig.d, sig.h, sig.w)))
    make_w = lambda *shape: ad.Tensor(rng.normal(0.0, 0.1, shape))
    if sig.op == "conv3d" or sig.op == "stem":
        w, b = make_w(sig.cout, sig.cin, 3, 3, 3), make_w(sig.cout)
        return lambda: ops.conv3d(x, w, b, stride=1, pad=1)
    if sig.op == "dilated_conv3d":
        w, b = make_w(sig.cout, sig.cin, 3, 3, 3), make_w(sig.cout)
        return lambda: ops.conv3d(x, w, b, stride=1, pad=2, dilation=2)
    if sig.op == "separable_conv3d":
        dw, pw, b = make_w(sig.cin, 1, 3, 3, 3), make_w(sig.cout, sig.cin, 1, 1, 1), make_w(sig.cout)
        return lambda: ops.separable_conv3d(x, dw, pw, b)
    if sig.op == "maxpool3d":
        return lambda: ops.maxpool3d(x, kernel=3, stride=1, pad=1)
    if sig.op == "head" or sig.op == "pre_nonscale":
        w, b = make_w(sig.cout, sig.cin, 1, 1, 1), make_w(sig.cout)
        return lambda: ops.conv3d(x, w, b, stride=1, pad=0)
    if sig.op == "pre_contract":
        w, b = make_w(sig.cout, sig.cin, 1, 1, 1), make_w(sig.cout)
        return lambda: ops.contract_preprocess(x, w, b)
    if sig.op == "pre_expand":
        w, b = make_w(sig.cout, sig.cin, 1, 1, 1), make_w(sig.cout)
        return lambda: ops.expand_preprocess(x, w, b)
    raise ConfigError(f"cannot construct operator for signature {sig.describe()}")


class _pinned_serial_timing:
    """Pin the process to one logical CPU and force serial kernels while
    timing, restoring both afterwards (best effort on the pinning)."""

    def __enter__(self):
        self._affinity = None
        if hasattr(os, "sched_getaffinity"):
            try:
                self._affinity = os.sched_getaffinity(0)
                os.sched_setaffinity(0, {min(self._affinity)})
            except OSError:
                self._affinity = None
        for mod in (backend.python_kernels, backend.compiled_kernels):
            if mod is not None:
                mod.set_num_threads(1)
        return self

    def __exit__(self, *exc):
        if self._affinity is not None:
            try:
                os.sched_setaffinity(0, self._affinity)
            except OSError:
                pass
        backend.set_threads(backend._thread_cap)
        return False


MIN_SAMPLE_SECONDS = 2e-3


def profile_op(sig, reps=50, warmup=10, rng=None):
    """Median wall-clock seconds of one forward execution of the operator.

    Takes reps timed samples after the warmup and returns their median. For
    operators faster than ~2 ms a sample times a burst of executions and
    divides, so every sample stays above the noise floor of shared-CPU hosts
    (for slower operators this is exactly one run per sample). Zero and
    identity compile away in decoded networks, so they are free by definition
    and skip the timing entirely.
    """
    if reps < 3 or warmup < 1:
        raise ArgumentError("profiling needs reps >= 3 and warmup >= 1")
    if sig.op in ("zero", "identity"):
        return 0.0
    rng = rng or np.random.default_rng(0)
    run = _build_runner(sig, rng)
    with _pinned_serial_timing(), ad.no_grad():
        for _ in range(warmup):
            run()
        t0 = time.perf_counter()
        run()
        estimate = max(time.perf_counter() - t0, 1e-9)
        inner = max(1, int(np.ceil(MIN_SAMPLE_SECONDS / estimate)))
        samples = []
        for _ in range(reps):
            t0 = time.perf_counter()
            for _ in range(inner):
                run()
            samples.append((time.perf_counter() - t0) / inner)
    return statistics.median(samples)


def build_table(cfg, reps=50, warmup=10):
    cfg.validate()
    rng = np.random.default_rng(0)
    entries = {}
    for sig in enumerate_signatures(cfg):
        entries[sig] = profile_op(sig, reps=reps, warmup=warmup, rng=rng)
    metadata = {
        "host": platform.platform(),
        "cpu_count": os.cpu_count(),
        "backend": backend.active.NAME,
        "reps": reps,
        "warmup": warmup,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    return LatencyTable(entries, metadata)


class GumbelNoise:
    """Per-group Gumbel(0,1) draws, cached so one step (or one frozen-noise
    gradient check) reuses a single draw per parameter group."""

    def __init__(self, rng):
        self.rng = rng
        self.cache = {}

    def gumbel(self, key, size):
        if key not in self.cache:
            u = self.rng.random(size)
            self.cache[key] = -np.log(-np.log(u + 1e-20) + 1e-20)
        return self.cache[key]


def _as_noise(rng_or_noise):
    if isinstance(rng_or_noise, GumbelNoise):
        return rng_or_noise
    return GumbelNoise(rng_or_noise)


def gumbel_softmax(weights, tau, rng, key=None):
    """softmax((weights + g) / tau) with g ~ Gumbel(0,1); the draw is a
    constant of the pass so gradients flow through the softmax only."""
    if tau <= 0:
        raise ArgumentError("gumbel_softmax needs tau > 0")
    noise = _as_noise(rng)
    g = noise.gumbel(key if key is not None else object(), weights.data.shape[0])
    shifted = ad.add(weights, ad.Tensor(g))
    return ad.softmax(ad.scale(shifted, 1.0 / tau), axis=0)


def expected_mixed_op_latency(alpha_edge, table, channels, spatial, tau, rng, key=None):
    """Gumbel-Softmax expectation of one mixed op's latency over the six
    candidate primitives at the given (deployed) width and spatial extents."""
    noise = _as_noise(rng)
    gs = gumbel_softmax(alpha_edge, tau, noise, key=key)
    lats = np.array([
        table.get(OpSignature(op_kind, channels, channels, *spatial))
        for op_kind in ops.PRIMITIVE_OPS
    ])
    return ad.tsum(ad.mul(gs, ad.Tensor(lats)))


def expected_cell_latency(params, table, cfg, kind, s_src, tau, rng):
    """Preprocess cost plus the gamma-weighted mixed-op expectations of one
    cell of the given kind anchored at source scale s_src."""
    noise = _as_noise(rng)
    s_tgt = target_scale(s_src, kind)
    spatial = cfg.spatial(s_tgt)
    channels = cfg.internal_channels(s_tgt)
    total = ad.Tensor(np.array(table.get(preprocess_signature(cfg, kind, s_src))))
    m = len(params.gamma[kind])
    edges = cell_edges(m)
    terms = [total]
    for j in range(1, m + 1):
        gs_gamma = gumbel_softmax(params.gamma[kind][j - 1], tau, noise,
                                  key=("gamma", kind, j))
        for i in range(j):
            e = edges.index((i, j))
            mixed = expected_mixed_op_latency(
                params.alpha[kind][e], table, channels, spatial, tau, noise,
                key=("alpha", kind, e))
            terms.append(ad.mul(ad.element(gs_gamma, i), mixed))
    return reduce(ad.add, terms)


@dataclass(frozen=True)
class PathSpec:
    """Stem-to-head route: ordered (layer, source scale, target scale, kind)
    steps plus the log of the Eq-style path length (product of edge probs)."""

    steps: tuple
    log_length: float

    @property
    def length(self):
        return float(np.exp(self.log_length))


@dataclass
class TopPaths:
    paths: list
    requested: int
    truncated: bool


def top_n_longest_paths(beta_probs, n, layers, scales):
    """Top-n stem-to-head paths by descending product of edge probabilities.

    Dynamic program over the grid keeping the n best prefixes per vertex
    (prefix order is preserved under extension since every extension adds the
    same log-probability). Ties break lexicographically on the edge-kind
    sequence. Returns all paths with a truncation flag if fewer than n exist.
    """
    if n < 1:
        raise ArgumentError("need n >= 1 paths")
    kind_rank = {k: i for i, k in enumerate(("contract", "nonscale", "expand", "skip"))}
    # vertex -> list of (log_len, rank_seq, steps), pruned to the n best
    best = {(0, 0): [(0.0, (), ())]}
    for l in range(layers):
        layer_cands = {}
        for s in sorted(s for (ll, s) in best if ll == l):
            for kind in edge_kinds_at(s, scales):
                p = beta_probs[(l, s)][kind]
                if p <= 0.0:
                    continue
                lp = float(np.log(p))
                tgt = target_scale(s, kind)
                cands = layer_cands.setdefault(tgt, [])
                for (ln, seq, steps) in best[(l, s)]:
                    cands.append((ln + lp, seq + (kind_rank[kind],),
                                  steps + ((l, s, tgt, kind),)))
        for tgt, cands in layer_cands.items():
            best[(l + 1, tgt)] = sorted(cands, key=lambda c: (-c[0], c[1]))[:n]
    final = best.get((layers, 0), [])
    paths = [PathSpec(steps, ln) for (ln, _seq, steps) in final]
    return TopPaths(paths=paths, requested=n, truncated=len(paths) < n)


def expected_network_latency(params, table, cfg, tau, rng, n=None, paths=None,
                             accounting="per_path"):
    """Differentiable expected latency of the supernet: stem/head fixed costs
    plus, over the top-n longest paths, the Gumbel-Softmax-weighted expected
    latency of each path edge's cell. Skip edges cost nothing. Path selection
    is recomputed from current probabilities but treated as a constant of the
    pass. accounting="union" charges edges shared between paths once.
    """
    from .space import beta_prob_map  # local import to avoid a cycle at module load

    if accounting not in ("per_path", "union"):
        raise ArgumentError(f"unknown accounting mode {accounting!r}")
    noise = _as_noise(rng)
    if n is None:
        n = cfg.n_fusion
    if paths is None:
        paths = top_n_longest_paths(beta_prob_map(params, cfg), n,
                                    cfg.layers, cfg.scales).paths
    terms = [ad.Tensor(np.array(table.get(stem_signature(cfg)) +
                                table.get(head_signature(cfg))))]
    gs_cache = {}
    cell_cache = {}
    charged = set()
    for path in paths:
        for (l, s, _tgt, kind) in path.steps:
            if kind == "skip":
                continue
            if accounting == "union":
                if (l, s, kind) in charged:
                    continue
                charged.add((l, s, kind))
            if (l, s) not in gs_cache:
                gs_cache[(l, s)] = gumbel_softmax(
                    params.beta[(l, s)], tau, noise, key=("beta", l, s))
            kinds = edge_kinds_at(s, cfg.scales)
            weight = ad.element(gs_cache[(l, s)], kinds.index(kind))
            if (kind, s) not in cell_cache:
                cell_cache[(kind, s)] = expected_cell_latency(
                    params, table, cfg, kind, s, tau, noise)
            terms.append(ad.mul(weight, cell_cache[(kind, s)]))
    return reduce(ad.add, terms)
