"""Self-supervised feature distortions that manufacture pseudo-anomalies.

Three strategies corrupt a patch-feature grid and report exactly which rows
they touched; the resulting boolean mask is the discriminator's per-patch
training target.

* noise on all patches: additive Gaussian noise everywhere.
* noise on random patches: additive Gaussian noise on a random fraction of
  rows, the rest left bitwise untouched.
* attention shuffle: the rows most attended by one randomly chosen backbone
  head are permuted among themselves with a fixed-point-free permutation,
  preserving the multiset of rows while breaking their spatial arrangement.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from padkit.errors import ConfigError, ShapeError
from padkit.records import FeatureRecord
from padkit.rng import CounterRng


class Strategy(enum.Enum):
    NOISE_ALL = "noise_all"
    NOISE_RANDOM = "noise_random"
    ATTN_SHUFFLE = "attn_shuffle"


def parse_strategies(spec: str) -> tuple[Strategy, ...]:
    """Parse a '+'-separated strategy list, e.g. ``noise_random+attn_shuffle``."""
    names = [s.strip() for s in spec.split("+") if s.strip()]
    if not names:
        raise ConfigError("empty strategy list")
    out = []
    for name in names:
        try:
            out.append(Strategy(name))
        except ValueError:
            valid = ", ".join(s.value for s in Strategy)
            raise ConfigError(f"unknown strategy {name!r}, expected one of: {valid}") from None
    return _canonical(out)


def _canonical(strategies) -> tuple[Strategy, ...]:
    # Deduplicate and order by enum value so strategy sampling is reproducible
    # regardless of how the caller assembled the set.
    uniq = sorted(set(strategies), key=lambda s: s.value)
    return tuple(uniq)


@dataclass
class DistortionConfig:
    """Knobs for pseudo-anomaly generation.

    ``epsilon`` is the per-component standard deviation of the additive
    Gaussian noise.  ``fraction_low``/``fraction_high`` bound the uniformly
    drawn fraction of patches corrupted by the random-patch strategy.
    """

    epsilon: float = 0.25
    fraction_low: float = 0.05
    fraction_high: float = 0.5
    strategies: tuple[Strategy, ...] = field(
        default_factory=lambda: (Strategy.NOISE_RANDOM,)
    )

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.fraction_low <= self.fraction_high <= 1:
            raise ConfigError(
                f"need 0 < fraction_low <= fraction_high <= 1, got "
                f"[{self.fraction_low}, {self.fraction_high}]"
            )
        if not self.strategies:
            raise ConfigError("strategy set must be nonempty")
        self.strategies = _canonical(self.strategies)


@dataclass
class DistortionOutcome:
    """Distorted feature grid plus the per-patch corruption mask."""

    features: np.ndarray  # [N, dim], same dtype as input
    mask: np.ndarray  # bool [N]; True exactly where a row was rewritten
    strategy_used: Strategy


def _check_finite(features: np.ndarray) -> np.ndarray:
    features = np.asarray(features)
    if features.ndim != 2:
        raise ShapeError(f"features must be [N, dim], got shape {features.shape}")
    if not np.all(np.isfinite(features)):
        raise ShapeError("features contain NaN or Inf")
    return features


def noise_all(features: np.ndarray, epsilon: float, rng: CounterRng) -> DistortionOutcome:
    """Add zero-mean Gaussian noise with std ``epsilon`` to every row."""
    features = _check_finite(features)
    noise = rng.gaussian_matrix(features.shape, scale=epsilon).astype(features.dtype, copy=False)
    out = features + noise
    mask = np.ones(features.shape[0], dtype=bool)
    return DistortionOutcome(features=out, mask=mask, strategy_used=Strategy.NOISE_ALL)


def noise_random(
    features: np.ndarray, config: DistortionConfig, rng: CounterRng
) -> DistortionOutcome:
    """Add Gaussian noise to a uniformly drawn fraction of rows.

    The fraction f is uniform on [fraction_low, fraction_high]; the number of
    corrupted rows is max(1, round(f*N)); indices are drawn uniformly without
    replacement.  Untouched rows are returned bitwise unchanged.
    """
    features = _check_finite(features)
    n = features.shape[0]
    if n < 1:
        raise ShapeError("need at least one patch")
    f = rng.uniform_in(config.fraction_low, config.fraction_high)
    m = max(1, int(round(f * n)))
    m = min(m, n)
    picked = np.sort(rng.choose(n, m))
    out = features.copy()
    noise = rng.gaussian_matrix((m, features.shape[1]), scale=config.epsilon)
    out[picked] = out[picked] + noise.astype(features.dtype, copy=False)
    mask = np.zeros(n, dtype=bool)
    mask[picked] = True
    return DistortionOutcome(features=out, mask=mask, strategy_used=Strategy.NOISE_RANDOM)


def attention_shuffle(
    features: np.ndarray, attention: np.ndarray, rng: CounterRng
) -> DistortionOutcome:
    """Permute the most-attended rows with a fixed-point-free permutation.

    One attention head is sampled uniformly, a count n uniformly from
    {1..N}, and the n rows with the highest attention under that head are
    selected (ties resolved toward the lower index).  n = 1 degenerates to a
    no-op with an all-false mask since a single row cannot move.
    """
    features = _check_finite(features)
    n_patches = features.shape[0]
    attention = np.asarray(attention)
    if attention.ndim != 2 or attention.shape[0] < 1:
        raise ShapeError(f"attention must be [heads, N] with >= 1 head, got {attention.shape}")
    if attention.shape[1] != n_patches:
        raise ShapeError(
            f"attention row length {attention.shape[1]} != patch count {n_patches}"
        )
    head = rng.integer(attention.shape[0])
    count = 1 + rng.integer(n_patches)
    # Stable argsort of the negated row: descending by attention, ties by index.
    order = np.argsort(-attention[head].astype(np.float64), kind="stable")
    selected = np.sort(order[:count])
    mask = np.zeros(n_patches, dtype=bool)
    if count == 1:
        return DistortionOutcome(
            features=features.copy(), mask=mask, strategy_used=Strategy.ATTN_SHUFFLE
        )
    perm = rng.derangement(count)
    out = features.copy()
    out[selected] = features[selected[perm]]
    mask[selected] = True
    return DistortionOutcome(features=out, mask=mask, strategy_used=Strategy.ATTN_SHUFFLE)


def distort(
    record: FeatureRecord, config: DistortionConfig, rng: CounterRng
) -> DistortionOutcome:
    """Apply one uniformly sampled strategy from the configured set."""
    strategies = config.strategies
    if not strategies:
        raise ConfigError("strategy set must be nonempty")
    choice = strategies[rng.integer(len(strategies))]
    if choice is Strategy.NOISE_ALL:
        return noise_all(record.features, config.epsilon, rng)
    if choice is Strategy.NOISE_RANDOM:
        return noise_random(record.features, config, rng)
    if record.n_heads < 1:
        raise ConfigError("attention shuffle requested but record has no attention heads")
    return attention_shuffle(record.features, record.attention, rng)
