"""Independent reference implementations used as test oracles.

These stay deliberately naive (nested loops, exhaustive enumeration) and
never call into the package's kernel or DP code paths.
"""

import numpy as np


def conv3d_naive(x, w, b=None, stride=1, pad=1, dilation=1, groups=1):
    """Direct 6-nested-loop cross-correlation."""
    n, cin, d, h, wd = x.shape
    cout, cpg, k = w.shape[0], w.shape[1], w.shape[2]
    cpg_out = cout // groups
    span = dilation * (k - 1) + 1
    do = (d + 2 * pad - span) // stride + 1
    ho = (h + 2 * pad - span) // stride + 1
    wo = (wd + 2 * pad - span) // stride + 1
    y = np.zeros((n, cout, do, ho, wo))
    for ni in range(n):
        for co in range(cout):
            g = co // cpg_out
            for od in range(do):
                for oh in range(ho):
                    for ow in range(wo):
                        acc = 0.0
                        for ci in range(cpg):
                            for kd in range(k):
                                for kh in range(k):
                                    for kw in range(k):
                                        zd = od * stride - pad + kd * dilation
                                        zh = oh * stride - pad + kh * dilation
                                        zw = ow * stride - pad + kw * dilation
                                        if 0 <= zd < d and 0 <= zh < h and 0 <= zw < wd:
                                            acc += x[ni, g * cpg + ci, zd, zh, zw] \
                                                * w[co, ci, kd, kh, kw]
                        y[ni, co, od, oh, ow] = acc
            if b is not None:
                y[ni, co] += b[co]
    return y


def maxpool3d_naive(x, kernel=3, stride=1, pad=1):
    """Window-scan max with -inf padding."""
    n, c, d, h, w = x.shape
    do = (d + 2 * pad - kernel) // stride + 1
    ho = (h + 2 * pad - kernel) // stride + 1
    wo = (w + 2 * pad - kernel) // stride + 1
    y = np.full((n, c, do, ho, wo), -np.inf)
    for ni in range(n):
        for ci in range(c):
            for od in range(do):
                for oh in range(ho):
                    for ow in range(wo):
                        for kd in range(kernel):
                            for kh in range(kernel):
                                for kw in range(kernel):
                                    zd = od * stride - pad + kd
                                    zh = oh * stride - pad + kh
                                    zw = ow * stride - pad + kw
                                    if 0 <= zd < d and 0 <= zh < h and 0 <= zw < w:
                                        v = x[ni, ci, zd, zh, zw]
                                        if v > y[ni, ci, od, oh, ow]:
                                            y[ni, ci, od, oh, ow] = v
    return y


def enumerate_paths(beta_probs, layers, scales):
    """All stem-to-head paths as (log_length, steps), logs summed in layer
    order (matching the DP's accumulation order bit-for-bit)."""
    from nas_rt.space import edge_kinds_at, target_scale

    results = []

    def walk(l, s, log_len, steps):
        if l == layers:
            if s == 0:
                results.append((log_len, steps))
            return
        for kind in edge_kinds_at(s, scales):
            p = beta_probs[(l, s)][kind]
            if p <= 0:
                continue
            walk(l + 1, target_scale(s, kind), log_len + float(np.log(p)),
                 steps + ((l, s, target_scale(s, kind), kind),))

    walk(0, 0, 0.0, ())
    return results


def rank_paths(enumerated):
    """Sort enumerated paths the way the DP ranks them: by descending
    log-length, ties by lexicographic kind order."""
    kind_rank = {"contract": 0, "nonscale": 1, "expand": 2, "skip": 3}
    return sorted(enumerated,
                  key=lambda e: (-e[0], tuple(kind_rank[s[3]] for s in e[1])))


def softmax_np(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def cell_latency_enumeration(params, table, cfg, kind, s_src):
    """Exact expectation of the cell latency under independent categorical
    choices per gamma group and per alpha edge (the tau -> 0 limit of the
    Gumbel-Softmax model): F(pre) + sum_j sum_i p_gamma(i|j) * sum_k
    p_alpha(k|edge) * F(op_k)."""
    from nas_rt import latency as lat
    from nas_rt import ops
    from nas_rt.space import cell_edges, target_scale

    s_tgt = target_scale(s_src, kind)
    spatial = cfg.spatial(s_tgt)
    channels = cfg.internal_channels(s_tgt)
    total = table.get(lat.preprocess_signature(cfg, kind, s_src))
    m = len(params.gamma[kind])
    edges = cell_edges(m)
    for j in range(1, m + 1):
        pg = softmax_np(params.gamma[kind][j - 1].data)
        for i in range(j):
            e = edges.index((i, j))
            pa = softmax_np(params.alpha[kind][e].data)
            f = np.array([table.get(lat.OpSignature(op, channels, channels, *spatial))
                          for op in ops.PRIMITIVE_OPS])
            total += pg[i] * float(pa @ f)
    return total


def network_latency_closed_form(params, table, cfg, n):
    """tau -> 0 expectation of the network latency over the current top-n
    paths: stem + head + sum over path edges of p_beta(kind) * E[cell]."""
    from nas_rt import latency as lat
    from nas_rt.space import beta_prob_map, edge_kinds_at

    probs = beta_prob_map(params, cfg)
    paths = lat.top_n_longest_paths(probs, n, cfg.layers, cfg.scales).paths
    total = table.get(lat.stem_signature(cfg)) + table.get(lat.head_signature(cfg))
    for path in paths:
        for (l, s, _t, kind) in path.steps:
            if kind == "skip":
                continue
            total += probs[(l, s)][kind] * cell_latency_enumeration(
                params, table, cfg, kind, s)
    return total
