from dataclasses import dataclass
from enum import StrEnum
from fractions import Fraction
import math
from typing import Tuple, Union


class PolicyKind(StrEnum):
    """Eviction policies. The two ablations are StLite with one component switched
    off."""

    ST_LITE = "st-lite"
    ST_LITE_CSS_ONLY = "st-lite-css-only"
    ST_LITE_TSG_ONLY = "st-lite-tsg-only"
    SNAPKV = "snapkv"
    PYRAMIDKV = "pyramidkv"
    L2NORM = "l2norm"
    RANDOM = "random"
    FULL_CACHE = "full-cache"


DEFAULT_DELTA = 32
"""observation window size used when none is given"""

POOLING_KINDS = ("avgpool", "maxpool")
VECTOR_SOURCES = ("keys", "hidden")


@dataclass(frozen=True)
class BudgetConfig:
    """Every knob of one compression run.

    Args:
        beta (float): retained fraction in (0, 1]
        delta (int): observation window size, the last `delta` positions
        enable_css (bool): add spatial saliency to visual scores
        enable_tsg (bool): gate historical visual tokens by trajectory redundancy
        normalize_terms (bool): min-max normalise A_base and Phi over visual tokens
        seed (int): seed for randomized baselines
        pooling (str | None): optional "avgpool"/"maxpool" smoothing of A_base
        kernel_size (int): pooling kernel width
        retain_window (bool): always keep the observation window inside the budget
        duplicate_cutoff (float): historical tokens with redundancy at or above this
            are gated out regardless of the rank threshold; above 1 disables it
        strict_gate_ties (bool): admit exactly min(B, M) tokens through the gate,
            breaking ties at the threshold by ascending index
        vector_source (str): "keys" or "hidden" vectors for CSS and TSG
    """

    beta: float
    delta: int = DEFAULT_DELTA
    enable_css: bool = True
    enable_tsg: bool = True
    normalize_terms: bool = False
    seed: int = 0
    pooling: Union[str, None] = None
    kernel_size: int = 7
    retain_window: bool = True
    duplicate_cutoff: float = 1.0
    strict_gate_ties: bool = False
    vector_source: str = "keys"

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise ValueError(f"beta must be in (0, 1], got {self.beta}")
        if self.delta < 1:
            raise ValueError(f"delta must be at least 1, got {self.delta}")
        if self.seed < 0:
            raise ValueError(f"seed must be nonnegative, got {self.seed}")
        if self.pooling is not None and self.pooling not in POOLING_KINDS:
            raise ValueError(f"pooling must be one of {POOLING_KINDS} or None")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(
                f"kernel_size must be odd and positive, got {self.kernel_size}"
            )
        if self.vector_source not in VECTOR_SOURCES:
            raise ValueError(f"vector_source must be one of {VECTOR_SOURCES}")

    def budget(self, seq_len: int) -> int:
        """B = floor(beta * L) clamped to [1, L], computed on the literal beta so that
        binary rounding never drops a token (0.29 * 100 is 29, not 28)."""
        if seq_len < 1:
            raise ValueError("cannot budget an empty cache")
        b = math.floor(Fraction(str(self.beta)) * seq_len)
        return min(max(b, 1), seq_len)


class Command(StrEnum):
    COMPRESS = "compress"
    SIMULATE = "simulate"
    DIAGNOSE = "diagnose"
    REPORT = "report"


DEFAULT_COVERAGE = 0.95
DEFAULT_EPSILON = 0.05

_REQUIRED_PATHS = {
    Command.COMPRESS: ("input_path", "output_path"),
    Command.SIMULATE: (),
    Command.DIAGNOSE: ("input_path",),
    Command.REPORT: ("input_path",),
}


@dataclass(frozen=True)
class RunConfig:
    """One command-line invocation, resolved. The budget fields mirror BudgetConfig;
    `simulate` sweeps `policies` x `betas` instead of the single policy and beta."""

    command: Command
    input_path: Union[str, None] = None
    output_path: Union[str, None] = None
    policy: PolicyKind = PolicyKind.ST_LITE
    beta: float = 1.0
    delta: int = DEFAULT_DELTA
    enable_css: bool = True
    enable_tsg: bool = True
    normalize_terms: bool = False
    coverage: float = DEFAULT_COVERAGE
    epsilon: float = DEFAULT_EPSILON
    seed: int = 0
    emit_maps: bool = False
    pooling: Union[str, None] = None
    kernel_size: int = 7
    retain_window: bool = True
    duplicate_cutoff: float = 1.0
    strict_gate_ties: bool = False
    vector_source: str = "keys"
    full_ledger: bool = False
    threads: int = 1
    policies: Tuple[PolicyKind, ...] = ()
    betas: Tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "command", Command(self.command))
        object.__setattr__(self, "policy", PolicyKind(self.policy))
        object.__setattr__(
            self, "policies", tuple(PolicyKind(p) for p in self.policies)
        )
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        for name in _REQUIRED_PATHS[self.command]:
            if not getattr(self, name):
                label = name.replace("_", " ")
                raise ValueError(f"{self.command}: {label} is required")
        if not 0 < self.coverage <= 1:
            raise ValueError(f"coverage must be in (0, 1], got {self.coverage}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.threads < 0:
            raise ValueError(f"threads must be nonnegative, got {self.threads}")
        for beta in self.betas or (self.beta,):
            self.budget_config(beta)

    def budget_config(self, beta: Union[float, None] = None) -> BudgetConfig:
        """The BudgetConfig these flags describe, at `beta` if given"""
        return BudgetConfig(
            beta=self.beta if beta is None else beta,
            delta=self.delta,
            enable_css=self.enable_css,
            enable_tsg=self.enable_tsg,
            normalize_terms=self.normalize_terms,
            seed=self.seed,
            pooling=self.pooling,
            kernel_size=self.kernel_size,
            retain_window=self.retain_window,
            duplicate_cutoff=self.duplicate_cutoff,
            strict_gate_ties=self.strict_gate_ties,
            vector_source=self.vector_source,
        )
