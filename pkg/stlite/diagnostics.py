"""Checks of the assumptions the baselines rely on: how sparse attention is at each
depth, how tightly a logit gap caps attention, and how noisy mass-proportional layer
budgets become when the masses are nearly equal.
"""

from dataclasses import dataclass
import logging
import math
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import torch

from stlite.cache import LayerCache, Matrix
from stlite.config import DEFAULT_COVERAGE, DEFAULT_EPSILON, BudgetConfig
from stlite.policy import pyramid_allocate
from stlite.scoring import AttentionWindow, window_attention

logger = logging.getLogger(__name__)


ROW_SUM_TOLERANCE = 1e-4
COUNT_TOLERANCE = 1e-9
BOUND_TOLERANCE = 1e-9


def _rows(attn: Union[Matrix, torch.Tensor]) -> torch.Tensor:
    data = attn.data if isinstance(attn, Matrix) else torch.as_tensor(attn)
    data = data.double()
    if data.dim() == 1:
        data = data[None]
    return data


def layer_sparsity(
    attn: Union[Matrix, torch.Tensor], coverage: float = DEFAULT_COVERAGE
) -> float:
    """One minus the mean fraction of keys needed to cover `coverage` of each row's
    attention mass.

    Args:
        attn (Matrix | torch.Tensor): rows x L attention, each row summing to 1
        coverage (float): mass to cover, in (0, 1]

    Returns:
        sparsity in [0, 1)

    Raises:
        ValueError: if a row does not sum to 1 within 1e-4, or has negative entries
    """
    if not 0 < coverage <= 1:
        raise ValueError(f"coverage must be in (0, 1], got {coverage}")
    rows = _rows(attn)
    if rows.shape[0] < 1 or rows.shape[1] < 1:
        raise ValueError("attention must have at least one row and one column")
    if bool((rows < 0).any()):
        raise ValueError("attention has negative entries")
    sums = rows.sum(dim=1)
    bad = torch.nonzero((sums - 1).abs() > ROW_SUM_TOLERANCE)
    if bad.numel() > 0:
        row = int(bad[0, 0])
        raise ValueError(f"attention row {row} sums to {float(sums[row]):.6f}, not 1")

    rows = rows / sums[:, None]
    mass = rows.sort(dim=1, descending=True).values.cumsum(dim=1)
    counts = (mass < coverage - COUNT_TOLERANCE).sum(dim=1) + 1
    counts = counts.clamp(max=rows.shape[1])
    return 1.0 - float(counts.double().mean()) / rows.shape[1]


@dataclass
class SparsityProfile:
    """Per-layer sparsity and whether it is flat across depth: every adjacent pair of
    layers differs by less than `epsilon`."""

    per_layer_sparsity: List[float]
    epsilon: float
    is_uniform: bool

    def __post_init__(self):
        if self.is_uniform != (self.max_gradient < self.epsilon):
            raise ValueError("is_uniform disagrees with the per-layer sparsity")

    @property
    def max_gradient(self) -> float:
        s = self.per_layer_sparsity
        return max((abs(b - a) for a, b in zip(s, s[1:])), default=0.0)

    def to_json(self) -> Dict:
        return {
            "per_layer_sparsity": self.per_layer_sparsity,
            "epsilon": self.epsilon,
            "is_uniform": self.is_uniform,
            "max_gradient": self.max_gradient,
        }


def sparsity_profile(
    attns: Sequence[Union[Matrix, torch.Tensor]],
    epsilon: float = DEFAULT_EPSILON,
    coverage: float = DEFAULT_COVERAGE,
) -> SparsityProfile:
    """Sparsity of every layer and the uniformity verdict.

    Raises:
        ValueError: with fewer than two layers, or on a malformed layer
    """
    if len(attns) < 2:
        raise ValueError(
            f"a sparsity profile needs at least 2 layers, got {len(attns)}"
        )
    per_layer = []
    for n, attn in enumerate(attns):
        try:
            per_layer.append(layer_sparsity(attn, coverage))
        except ValueError as e:
            raise ValueError(f"layer {n}: {e}") from e
    gradient = max(abs(b - a) for a, b in zip(per_layer, per_layer[1:]))
    logger.info("sparsity per layer %s, max gradient %.4f", per_layer, gradient)
    return SparsityProfile(per_layer, epsilon, gradient < epsilon)


def softmax_gap_bound(delta_gap: float) -> float:
    """Upper bound on the attention a key gets when some competitor's logit exceeds its
    own by `delta_gap`: 1 / (1 + e^delta_gap)."""
    return float(torch.sigmoid(torch.tensor(-float(delta_gap), dtype=torch.float64)))


def verify_gap_bound(
    raw_scores: Sequence[float], target_index: int, competitor_index: int
) -> Tuple[float, float, bool]:
    """Check the gap bound on one logit vector.

    Returns:
        (softmax probability of the target, the bound, whether it holds within 1e-9)

    Raises:
        ValueError: if an index is out of range or the two indices coincide
    """
    scores = torch.as_tensor(raw_scores, dtype=torch.float64)
    n = scores.numel()
    for name, index in (("target", target_index), ("competitor", competitor_index)):
        if not 0 <= index < n:
            raise ValueError(f"{name} index {index} out of range for {n} scores")
    if target_index == competitor_index:
        raise ValueError("target and competitor must differ")
    attn = float(torch.softmax(scores, dim=0)[target_index])
    bound = softmax_gap_bound(float(scores[competitor_index] - scores[target_index]))
    return attn, bound, attn <= bound + BOUND_TOLERANCE


def gap_bound_trials(
    trials: int, seed: int = 0, min_len: int = 2, max_len: int = 512
) -> int:
    """Number of violations over `trials` random logit vectors"""
    rng = np.random.default_rng(seed)
    violations = 0
    for _ in range(trials):
        n = int(rng.integers(min_len, max_len + 1))
        scores = rng.normal(0.0, rng.uniform(0.1, 10.0), size=n)
        target, competitor = rng.choice(n, size=2, replace=False)
        _, _, holds = verify_gap_bound(scores, int(target), int(competitor))
        violations += not holds
    return violations


def audit_attention_rows(attn: Union[Matrix, torch.Tensor]) -> int:
    """Gap-bound violations over the rows of a recorded attention matrix.

    Per row, the least attended positive entry is the target and the most attended
    entry the competitor; log-probabilities stand in for the raw logits.
    """
    violations = 0
    for row in _rows(attn):
        positive = torch.nonzero(row > 0).flatten()
        if positive.numel() < 2:
            continue
        target = int(positive[torch.argmin(row[positive])])
        competitor = int(torch.argmax(row))
        if target == competitor:
            continue
        logits = torch.full_like(row, -math.inf)
        logits[positive] = row[positive].log()
        attn_target = float(torch.softmax(logits, dim=0)[target])
        bound = softmax_gap_bound(float(logits[competitor] - logits[target]))
        violations += attn_target > bound + BOUND_TOLERANCE
    return violations


def layer_attention(cache: LayerCache, config: BudgetConfig) -> torch.Tensor:
    """Head-averaged softmax rows of a layer's observation window, delta x L"""
    window = AttentionWindow.for_cache(cache, config.delta)
    return window_attention(cache.stacked_keys(), window)


def allocation_chaos(
    attn_masses: Sequence[float],
    noise_scale: float,
    trials: int,
    total_budget: int,
    seed: int = 0,
) -> float:
    """Mean absolute per-layer deviation of noisy pyramid budgets from the allocation
    of the uniform masses.

    Noise is zero-mean uniform in [-noise_scale, noise_scale], added to every mass and
    clipped at 0, so scaling masses and noise together leaves the result unchanged.
    """
    masses = np.asarray(attn_masses, dtype=np.float64)
    if trials < 1:
        raise ValueError(f"trials must be at least 1, got {trials}")
    if noise_scale < 0:
        raise ValueError(f"noise_scale must be nonnegative, got {noise_scale}")
    reference = np.asarray(pyramid_allocate([1.0] * len(masses), total_budget))
    rng = np.random.default_rng(seed)
    deviations = []
    for _ in range(trials):
        noise = rng.uniform(-noise_scale, noise_scale, size=len(masses))
        noisy = np.clip(masses + noise, 0.0, None)
        if noisy.sum() == 0:
            noisy = np.ones_like(noisy)
        budgets = np.asarray(pyramid_allocate(noisy.tolist(), total_budget))
        deviations.append(np.abs(budgets - reference).mean())
    chaos = float(np.mean(deviations))
    logger.info(
        "allocation chaos %.4f tokens/layer at noise %.3g over %d trials",
        chaos,
        noise_scale,
        trials,
    )
    return chaos
