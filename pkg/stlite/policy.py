"""Eviction policies: the spatio-trajectory compressor, its ablations and the
baselines it is compared against.

Every policy keeps one index set per layer, shared by all heads, and always retains the
observation window inside the budget unless told otherwise.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
import logging
import math
import os
from typing import Callable, Dict, List, Sequence, Tuple, Union

import numpy as np
import torch

from stlite.cache import LayerCache
from stlite.config import BudgetConfig, PolicyKind
from stlite.scoring import (
    AttentionWindow,
    TokenScores,
    base_attention_prior,
    integrate_scores,
    pool_prior,
    redundancy_threshold,
    spatial_saliency,
    strict_gate,
    temporal_gate,
    trajectory_stats,
)

logger = logging.getLogger(__name__)


RETAIN_ALL = "retain-all"
"""ledger spelling of a threshold that gates nothing"""


@dataclass
class EvictionResult:
    """Which rows of a layer survive, and the ledger that decided it.

    Attributes:
        kept_indices: rows of the input cache, strictly increasing
        kept_positions: original sequence positions of those rows
        tau_red: the redundancy threshold used, None when every historical token
            passes the gate
        extent: length of the original sequence the input cache was cut from
    """

    layer_index: int
    policy: PolicyKind
    budget: int
    kept_indices: Tuple[int, ...]
    kept_positions: Tuple[int, ...]
    tau_red: Union[float, None]
    scores: TokenScores
    extent: Union[int, None] = None

    def __post_init__(self):
        self.kept_indices = tuple(int(i) for i in self.kept_indices)
        self.kept_positions = tuple(int(p) for p in self.kept_positions)
        if len(self.kept_indices) != self.budget:
            raise ValueError(
                f"layer {self.layer_index}: kept {len(self.kept_indices)} tokens, "
                f"budget is {self.budget}"
            )
        if any(b <= a for a, b in zip(self.kept_indices, self.kept_indices[1:])):
            raise ValueError(f"layer {self.layer_index}: kept indices must increase")
        if self.kept_indices and not (
            0 <= self.kept_indices[0] and self.kept_indices[-1] < len(self.scores)
        ):
            raise ValueError(f"layer {self.layer_index}: kept index out of range")

    def apply(self, cache: LayerCache) -> LayerCache:
        """The compressed cache: kept rows in their original order"""
        return cache.select(self.kept_indices)

    def to_json(self, full: bool = False) -> Dict:
        entry = {
            "layer_index": self.layer_index,
            "policy": str(self.policy),
            "budget": self.budget,
            "seq_len": len(self.scores),
            "kept_indices": list(self.kept_indices),
            "kept_positions": list(self.kept_positions),
            "tau_red": RETAIN_ALL if self.tau_red is None else self.tau_red,
            "score_quartiles": self.scores.quartiles(),
        }
        if full:
            entry["scores"] = self.scores.to_json()
        return entry


def top_b_select(scores: Sequence[float], budget_b: int) -> List[int]:
    """Indices of the `budget_b` largest scores, ties toward the smaller index,
    returned ascending."""
    if budget_b < 1:
        raise ValueError(f"budget must be at least 1, got {budget_b}")
    scores = torch.as_tensor(scores, dtype=torch.float64)
    order = torch.sort(scores, descending=True, stable=True).indices
    return sorted(int(i) for i in order[:budget_b])


def window_rows(cache: LayerCache, config: BudgetConfig, budget_b: int) -> List[int]:
    """The always-retained rows: the last delta positions, cut to the most recent
    `budget_b` when the window is larger than the budget."""
    if not config.retain_window:
        return []
    width = min(config.delta, budget_b, cache.seq_len)
    return list(range(cache.seq_len - width, cache.seq_len))


def _check(cache: LayerCache, config: BudgetConfig):
    if cache.seq_len == 0:
        raise ValueError(f"layer {cache.layer_index}: empty cache")
    if config.delta > cache.seq_len:
        raise ValueError(
            f"layer {cache.layer_index}: delta={config.delta} exceeds L={cache.seq_len}"
        )


def attention_prior(cache: LayerCache, config: BudgetConfig) -> torch.Tensor:
    """A_base of every token of `cache`, pooled if the config asks for it"""
    window = AttentionWindow.for_cache(cache, config.delta)
    a_base = base_attention_prior(cache.stacked_keys(), window)
    if config.pooling is not None:
        a_base = pool_prior(a_base, config.pooling, config.kernel_size)
    return a_base


def _finish(
    cache: LayerCache,
    config: BudgetConfig,
    kind: PolicyKind,
    budget_b: int,
    ranking: torch.Tensor,
    scores: TokenScores,
    tau_red: Union[float, None] = None,
) -> EvictionResult:
    priority = ranking.clone()
    window = window_rows(cache, config, budget_b)
    if window:
        priority[window] = math.inf
    kept = top_b_select(priority, budget_b)
    logger.info(
        "layer %d: %s kept %d/%d tokens",
        cache.layer_index,
        kind,
        budget_b,
        cache.seq_len,
    )
    return EvictionResult(
        layer_index=cache.layer_index,
        policy=kind,
        budget=budget_b,
        kept_indices=tuple(kept),
        kept_positions=tuple(cache.position(i) for i in kept),
        tau_red=tau_red,
        scores=scores,
        extent=max(
            [cache.position(cache.seq_len - 1) + 1]
            + [layout.span_end for layout in cache.layouts]
        ),
    )


def _plain_ledger(a_base: torch.Tensor, s_final: torch.Tensor) -> TokenScores:
    n = len(a_base)
    return TokenScores(
        a_base=a_base,
        phi_space=torch.zeros(n, dtype=torch.float64),
        rho=torch.full((n,), math.nan, dtype=torch.float64),
        m_time=torch.ones(n, dtype=torch.bool),
        s_final=s_final,
    )


def st_lite_compress(
    cache: LayerCache, config: BudgetConfig, kind: PolicyKind = PolicyKind.ST_LITE
) -> EvictionResult:
    """Compress one layer with spatial saliency and trajectory gating.

    1. attention prior from the observation window
    2. per-frame spatial saliency of visual tokens
    3. redundancy of historical visual tokens against the current frame, thresholded
       at the budget-th smallest value
    4. modality-aware integration
    5. the window is always kept, the rest is filled by score

    Args:
        cache (LayerCache): the layer to compress
        config (BudgetConfig): budget and switches
        kind (PolicyKind): label recorded in the result

    Raises:
        ValueError: on an empty cache or a window longer than the cache
    """
    _check(cache, config)
    budget_b = config.budget(cache.seq_len)
    vectors = cache.token_vectors(config.vector_source)
    a_base = attention_prior(cache, config)

    if config.enable_css:
        phi = spatial_saliency(cache, vectors)
    else:
        phi = torch.zeros(cache.seq_len, dtype=torch.float64)

    m_time = torch.ones(cache.seq_len, dtype=torch.bool)
    rho = torch.full((cache.seq_len,), math.nan, dtype=torch.float64)
    tau_red = None
    if config.enable_tsg:
        trajectory = trajectory_stats(cache, vectors)
        rho = trajectory.rho
        historical = trajectory.historical_rows
        if historical:
            pool = rho[historical]
            if budget_b < len(historical):
                tau_red = redundancy_threshold(pool, budget_b)
            if config.strict_gate_ties:
                gate = strict_gate(pool, budget_b) & (pool < config.duplicate_cutoff)
            else:
                gate = temporal_gate(pool, tau_red, config.duplicate_cutoff)
            m_time[historical] = gate
            logger.debug(
                "layer %d: tau_red=%s, %d/%d historical tokens pass the gate",
                cache.layer_index,
                RETAIN_ALL if tau_red is None else f"{tau_red:.6f}",
                int(gate.sum()),
                len(historical),
            )
        else:
            logger.debug("layer %d: no historical frames to gate", cache.layer_index)

    s_final = integrate_scores(a_base, phi, m_time, cache.meta, config)
    scores = TokenScores(a_base, phi, rho, m_time, s_final)
    return _finish(cache, config, kind, budget_b, s_final, scores, tau_red)


def css_only_compress(cache: LayerCache, config: BudgetConfig) -> EvictionResult:
    return st_lite_compress(
        cache, replace(config, enable_tsg=False), PolicyKind.ST_LITE_CSS_ONLY
    )


def tsg_only_compress(cache: LayerCache, config: BudgetConfig) -> EvictionResult:
    return st_lite_compress(
        cache, replace(config, enable_css=False), PolicyKind.ST_LITE_TSG_ONLY
    )


def snapkv_compress(cache: LayerCache, config: BudgetConfig) -> EvictionResult:
    """Keep the window and the tokens it attends to most"""
    _check(cache, config)
    budget_b = config.budget(cache.seq_len)
    a_base = attention_prior(cache, config)
    scores = _plain_ledger(a_base, a_base.clone())
    return _finish(cache, config, PolicyKind.SNAPKV, budget_b, a_base, scores)


def l2norm_compress(cache: LayerCache, config: BudgetConfig) -> EvictionResult:
    """Keep the window and the keys with the smallest L2 norm (mean over heads)"""
    _check(cache, config)
    budget_b = config.budget(cache.seq_len)
    a_base = attention_prior(cache, config)
    ranking = -cache.stacked_keys().norm(dim=-1).mean(dim=0)
    scores = _plain_ledger(a_base, ranking)
    return _finish(cache, config, PolicyKind.L2NORM, budget_b, ranking, scores)


def layer_seed(seed: int, layer_index: int) -> int:
    """A per-layer seed that does not depend on execution order"""
    return int(np.random.SeedSequence([seed, layer_index]).generate_state(1)[0])


def random_compress(cache: LayerCache, config: BudgetConfig) -> EvictionResult:
    """Keep the window, then a uniform sample of the remaining rows"""
    _check(cache, config)
    budget_b = config.budget(cache.seq_len)
    a_base = attention_prior(cache, config)
    window = window_rows(cache, config, budget_b)
    seed = layer_seed(config.seed, cache.layer_index)
    generator = torch.Generator().manual_seed(seed)
    # the window is the tail, so the candidates are the leading rows
    candidates = cache.seq_len - len(window)
    draw = torch.randperm(candidates, generator=generator)[: budget_b - len(window)]
    ranking = torch.zeros(cache.seq_len, dtype=torch.float64)
    ranking[draw] = 1.0
    if window:
        ranking[window] = 1.0
    scores = _plain_ledger(a_base, ranking)
    return _finish(cache, config, PolicyKind.RANDOM, budget_b, ranking, scores)


def full_cache_compress(cache: LayerCache, config: BudgetConfig) -> EvictionResult:
    """The reference arm: every row is kept whatever the budget"""
    _check(cache, config)
    a_base = attention_prior(cache, config)
    scores = _plain_ledger(a_base, a_base.clone())
    return _finish(cache, config, PolicyKind.FULL_CACHE, cache.seq_len, a_base, scores)


def pyramid_allocate(
    attn_mass_per_layer: Sequence[float], total_budget: int
) -> List[int]:
    """Split `total_budget` across layers in proportion to their attention mass,
    rounding by largest remainder (ties to the lower layer) and giving every layer at
    least one token.

    Raises:
        ValueError: on negative or all-zero masses, or fewer tokens than layers
    """
    masses = torch.as_tensor(attn_mass_per_layer, dtype=torch.float64)
    layers = masses.numel()
    if layers == 0:
        raise ValueError("no layers to allocate")
    if bool((masses < 0).any()):
        raise ValueError("attention masses must be nonnegative")
    if float(masses.sum()) == 0:
        raise ValueError("all-zero masses")
    if total_budget < layers:
        raise ValueError(f"total budget {total_budget} is below {layers} layers")

    shares = (masses / masses.sum() * total_budget).tolist()
    budgets = [math.floor(s) for s in shares]
    leftover = total_budget - sum(budgets)
    by_remainder = sorted(range(layers), key=lambda n: (-(shares[n] - budgets[n]), n))
    for n in by_remainder[:leftover]:
        budgets[n] += 1
    for n in range(layers):
        if budgets[n] == 0:
            donor = max(range(layers), key=lambda k: (budgets[k], -k))
            budgets[donor] -= 1
            budgets[n] = 1
    return budgets


def _cap_budgets(
    budgets: List[int], capacity: List[int], masses: Sequence[float]
) -> List[int]:
    budgets = list(budgets)
    excess = 0
    for n, cap in enumerate(capacity):
        if budgets[n] > cap:
            excess += budgets[n] - cap
            budgets[n] = cap
    order = sorted(range(len(budgets)), key=lambda n: (-masses[n], n))
    while excess > 0:
        for n in order:
            if excess == 0:
                break
            if budgets[n] < capacity[n]:
                budgets[n] += 1
                excess -= 1
    return budgets


def attention_mass(cache: LayerCache, config: BudgetConfig, a_base: torch.Tensor):
    """Concentration proxy for a layer: how many tokens draw more than the uniform share
    of each window query. The raw summed attention is the window size for every layer.
    """
    # a_base sums delta query rows, so the uniform share of a token is delta / L
    return int((a_base > config.delta / cache.seq_len).sum())


def pyramid_compress(
    caches: Sequence[LayerCache], config: BudgetConfig
) -> List[EvictionResult]:
    """Layer-adaptive budgets from attention concentration, then attention-prior
    selection within each layer. The total kept equals the sum of per-layer budgets.
    """
    if len(caches) == 0:
        raise ValueError("pyramid allocation needs at least one layer")
    for cache in caches:
        _check(cache, config)
    priors = [attention_prior(cache, config) for cache in caches]
    masses = [attention_mass(c, config, a) for c, a in zip(caches, priors, strict=True)]
    if sum(masses) == 0:
        logger.warning("attention is perfectly flat in every layer, allocating evenly")
        masses = [1] * len(caches)
    total = sum(config.budget(cache.seq_len) for cache in caches)
    budgets = pyramid_allocate(masses, total)
    budgets = _cap_budgets(budgets, [cache.seq_len for cache in caches], masses)
    logger.info("pyramid budgets %s from masses %s", budgets, masses)

    results = []
    for cache, a_base, budget_b in zip(caches, priors, budgets, strict=True):
        scores = _plain_ledger(a_base, a_base.clone())
        results.append(
            _finish(cache, config, PolicyKind.PYRAMIDKV, budget_b, a_base, scores)
        )
    return results


LayerPolicy = Callable[[LayerCache, BudgetConfig], EvictionResult]

LAYER_POLICIES: Dict[PolicyKind, LayerPolicy] = {
    PolicyKind.ST_LITE: st_lite_compress,
    PolicyKind.ST_LITE_CSS_ONLY: css_only_compress,
    PolicyKind.ST_LITE_TSG_ONLY: tsg_only_compress,
    PolicyKind.SNAPKV: snapkv_compress,
    PolicyKind.L2NORM: l2norm_compress,
    PolicyKind.RANDOM: random_compress,
    PolicyKind.FULL_CACHE: full_cache_compress,
}


def compress_caches(
    caches: Sequence[LayerCache],
    config: BudgetConfig,
    kind: PolicyKind,
    threads: int = 1,
) -> List[EvictionResult]:
    """Run policy `kind` over every layer. Layer-local policies run in a pool of
    `threads` workers (0 = one per CPU); results keep layer order.
    """
    kind = PolicyKind(kind)
    if kind == PolicyKind.PYRAMIDKV:
        return pyramid_compress(caches, config)
    compress = LAYER_POLICIES[kind]
    workers = threads if threads > 0 else (os.cpu_count() or 1)
    if workers == 1 or len(caches) < 2:
        return [compress(cache, config) for cache in caches]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda cache: compress(cache, config), caches))
