"""Slow, loop-by-loop reimplementations of the scoring pipeline. Tests compare the
vectorised code against these."""

import math
from typing import Dict, List, Sequence, Tuple

from stlite.cache import LayerCache
from stlite.config import BudgetConfig

ZERO = 1e-12


def _dot(a: Sequence[float], b: Sequence[float]) -> float:
    return sum(x * y for x, y in zip(a, b))


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    na, nb = math.sqrt(_dot(a, a)), math.sqrt(_dot(b, b))
    if na < ZERO or nb < ZERO:
        return 0.0
    if list(a) == list(b):
        return 1.0
    return max(-1.0, min(1.0, _dot(a, b) / (na * nb)))


def _rows(cache: LayerCache) -> List[List[List[float]]]:
    """heads x L x d keys as nested lists of python floats"""
    return [k.data.double().tolist() for k in cache.keys]


def attention_prior(cache: LayerCache, delta: int) -> List[float]:
    keys = _rows(cache)
    heads, seq_len, d = len(keys), cache.seq_len, cache.head_dim
    if cache.queries is not None:
        queries = [q.data.double().tolist()[-delta:] for q in cache.queries]
    else:
        queries = [k[seq_len - delta :] for k in keys]
    scale = 1.0 / math.sqrt(d)
    a = [0.0] * seq_len
    for h in range(heads):
        for q in queries[h]:
            logits = [scale * _dot(q, keys[h][i]) for i in range(seq_len)]
            top = max(logits)
            weights = [math.exp(x - top) for x in logits]
            z = sum(weights)
            for i in range(seq_len):
                a[i] += weights[i] / z / heads
    return a


def token_vectors(cache: LayerCache) -> List[List[float]]:
    return cache.stacked_keys().mean(dim=0).tolist()


def spatial_saliency(cache: LayerCache, vectors) -> List[float]:
    phi = [0.0] * cache.seq_len
    cells: Dict[Tuple[int, int, int], int] = {}
    for i, m in enumerate(cache.meta):
        if m.is_visual:
            cells[(m.frame_index, *m.grid_coord)] = i
    for (f, u, v), i in cells.items():
        sims = []
        for du in (-1, 0, 1):
            for dv in (-1, 0, 1):
                if (du, dv) == (0, 0):
                    continue
                j = cells.get((f, u + du, v + dv))
                if j is not None:
                    sims.append(cosine(vectors[i], vectors[j]))
        uniformity = sum(sorted(sims)) / len(sims) if sims else 1.0
        phi[i] = 1.0 - uniformity
    return phi


def trajectory_redundancy(cache: LayerCache, vectors) -> Dict[int, float]:
    """row -> best cosine match in the current frame, historical visual rows only"""
    visual = [(i, m.frame_index) for i, m in enumerate(cache.meta) if m.is_visual]
    if not visual:
        return {}
    current = max(f for _, f in visual)
    now = [i for i, f in visual if f == current]
    return {
        i: max(cosine(vectors[i], vectors[j]) for j in now)
        for i, f in visual
        if f < current
    }


def redundancy_threshold(rho: Sequence[float], budget_b: int) -> float:
    ordered = sorted(rho)
    return ordered[min(budget_b, len(ordered)) - 1]


def top_b(scores: Sequence[float], budget_b: int) -> List[int]:
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(order[:budget_b])


def st_lite(cache: LayerCache, config: BudgetConfig) -> Dict:
    """Every intermediate of one compression, computed with plain loops"""
    seq_len = cache.seq_len
    budget_b = config.budget(seq_len)
    a = attention_prior(cache, config.delta)
    vectors = token_vectors(cache)
    phi = spatial_saliency(cache, vectors) if config.enable_css else [0.0] * seq_len

    gate = [True] * seq_len
    tau = None
    rho = {}
    if config.enable_tsg:
        rho = trajectory_redundancy(cache, vectors)
        if rho:
            if budget_b < len(rho):
                tau = redundancy_threshold(list(rho.values()), budget_b)
            for i, r in rho.items():
                gate[i] = (tau is None or r <= tau) and r < config.duplicate_cutoff

    s = []
    for i, m in enumerate(cache.meta):
        if m.is_visual:
            s.append((a[i] + phi[i]) if gate[i] else 0.0)
        else:
            s.append(a[i])
    priority = list(s)
    if config.retain_window:
        for i in range(seq_len - min(config.delta, budget_b, seq_len), seq_len):
            priority[i] = math.inf
    return {
        "a_base": a,
        "phi_space": phi,
        "rho": rho,
        "m_time": gate,
        "s_final": s,
        "tau_red": tau,
        "kept": top_b(priority, budget_b),
    }
