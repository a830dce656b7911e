"""Truncated (top-p) and Gumbel-softmax sparse attention transforms.

Truncation aggregates each key's attention mass over all queries, keeps the
smallest set of keys covering the top-p fraction of that mass, and zeroes
the rest of the attention matrix (the selection mask is a constant w.r.t.
gradients). The soft variant perturbs attention logits with Gumbel noise at
temperature tau during training; evaluation always uses the plain softmax.

Noise comes from counter-based Philox streams keyed by
(run seed, layer, head, step), so every sampling site is reproducible and
independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DegenerateRowError, DimensionError
from .masks import AttentionDesign

SOFTSA_VARIANTS = ("row_gumbel", "cell_bernoulli")


@dataclass(frozen=True)
class SparsityConfig:
    """Thresholds and temperatures for the sparse attention designs."""

    top_p: float = 0.95
    tau_trunc: float = 1.0
    tau_soft: float = 1.0
    renormalize_after_mask: bool = False
    softsa_variant: str = "row_gumbel"

    def __post_init__(self):
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.tau_trunc <= 0.0 or self.tau_soft <= 0.0:
            raise ConfigError("temperatures must be positive")
        if self.softsa_variant not in SOFTSA_VARIANTS:
            raise ConfigError(f"softsa_variant must be one of {SOFTSA_VARIANTS}")


def key_impact(attn: np.ndarray) -> np.ndarray:
    """Aggregate attention mass per key, normalized across keys.

    ``attn`` is row-stochastic with shape [..., T, K]; the result has shape
    [..., K], is non-negative, and sums to 1 over the key axis.
    """
    attn = np.asarray(attn, dtype=np.float64)
    if attn.ndim < 2:
        raise DimensionError("key_impact expects at least a [T, K] matrix")
    col = attn.sum(axis=-2)
    total = col.sum(axis=-1, keepdims=True)
    if np.any(total <= 0.0):
        raise DegenerateRowError("key_impact: attention matrix has no mass")
    return col / total


def top_p_mask(impact: np.ndarray, p: float) -> np.ndarray:
    """Binary key mask keeping the smallest top set covering mass >= p.

    Keys are ranked by impact descending with ties broken by lower index;
    the shortest prefix of that ranking whose cumulative mass reaches p is
    selected. Applies along the last axis.
    """
    if not 0.0 < p <= 1.0:
        raise ConfigError(f"p must be in (0, 1], got {p}")
    impact = np.asarray(impact, dtype=np.float64)
    # stable sort on -impact keeps lower indices first among ties
    order = np.argsort(-impact, axis=-1, kind="stable")
    sorted_mass = np.take_along_axis(impact, order, axis=-1)
    cum = np.cumsum(sorted_mass, axis=-1)
    keep_sorted = np.zeros_like(impact)
    # number kept = first position where cumulative mass reaches p
    reached = cum + 1e-12 >= p
    n_keep = reached.argmax(axis=-1) + 1
    n_keep = np.where(reached.any(axis=-1), n_keep, impact.shape[-1])
    ranks = np.arange(impact.shape[-1])
    keep_sorted[..., :] = (ranks < n_keep[..., None]).astype(np.float64)
    mask = np.zeros_like(impact)
    np.put_along_axis(mask, order, keep_sorted, axis=-1)
    return mask


def apply_truncation(attn: np.ndarray, mask: np.ndarray,
                     renormalize: bool = False) -> np.ndarray:
    """Point-wise product of a key mask broadcast across query rows.

    With ``renormalize`` each surviving row is rescaled to sum to 1; a row
    losing all of its mass is then an error.
    """
    attn = np.asarray(attn, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    out = attn * mask[..., None, :] if mask.ndim == attn.ndim - 1 else attn * mask
    if renormalize:
        sums = out.sum(axis=-1, keepdims=True)
        if np.any(sums <= 0.0):
            raise DegenerateRowError("truncation removed all mass from a row")
        out = out / sums
    return out


def gumbel_noise(u) -> np.ndarray:
    """Inverse-transform Gumbel(0,1) sample: g = -log(-log(u)), u in (0,1)."""
    u = np.clip(np.asarray(u, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def gumbel_softmax_row(logits: np.ndarray, tau: float,
                       rng: np.random.Generator | None = None,
                       noise: np.ndarray | None = None) -> np.ndarray:
    """Sample a Gumbel-softmax relaxation of the categorical softmax(logits).

    The logits are treated as log-probabilities after log-softmax
    stabilization; the output is softmax((log pi + g) / tau) where g is
    Gumbel(0,1) noise. Pass ``noise`` to freeze the perturbation (zeros
    reduce the op to a plain softmax at tau=1).
    """
    if tau <= 0.0:
        raise ConfigError("tau must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    if noise is None:
        if rng is None:
            raise ConfigError("either an rng or frozen noise is required")
        noise = gumbel_noise(rng.random(size=logits.shape))
    logp = logits - _logsumexp(logits)
    z = (logp + noise) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _logsumexp(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


class NoiseStream:
    """Splittable counter-based noise, keyed by (run seed, layer, head, step)."""

    def __init__(self, run_seed: int):
        self.run_seed = int(run_seed)

    def _generator(self, layer: int, head: int, step: int) -> np.random.Generator:
        if not (0 <= layer < 2 ** 20 and 0 <= head < 2 ** 12 and 0 <= step < 2 ** 32):
            raise ConfigError("noise stream key out of range")
        site = (layer << 44) | (head << 32) | step
        return np.random.Generator(np.random.Philox(key=[self.run_seed, site]))

    def gumbel(self, layer: int, head: int, step: int, shape) -> np.ndarray:
        return gumbel_noise(self._generator(layer, head, step).random(size=shape))

    def logistic(self, layer: int, head: int, step: int, shape) -> np.ndarray:
        u = np.clip(self._generator(layer, head, step).random(size=shape),
                    1e-12, 1.0 - 1e-12)
        return np.log(u) - np.log1p(-u)


@dataclass
class AttentionTransform:
    """Effective per-layer attention behaviour after composing a design.

    ``attend`` maps pre-softmax scores to the attention matrix, applying the
    blocking mask, the pre-softmax logit temperature of the truncation
    designs, and the configured sparsity (truncation or Gumbel-softmax).
    """

    mask: np.ndarray
    sparse: str | None  # None | "trunc" | "soft"
    config: SparsityConfig
    phase: str  # train | eval
    layer: int

    @property
    def softmax_inv_temperature(self) -> float:
        """Pre-softmax 1/tau: truncation temperature or the Gumbel one."""
        if self.sparse == "trunc" and self.config.tau_trunc != 1.0:
            return 1.0 / self.config.tau_trunc
        if self.wants_noise and self.config.softsa_variant == "row_gumbel":
            return 1.0 / self.config.tau_soft
        return 1.0

    def softmax_noise(self, noise: np.ndarray | None) -> np.ndarray | None:
        """Noise added to pre-softmax scores (row_gumbel variant only)."""
        if self.wants_noise and self.config.softsa_variant == "row_gumbel":
            if noise is None:
                raise ConfigError("soft sparse attention needs noise during training")
            return noise
        return None

    def post_softmax(self, attn: ad.Tensor, noise: np.ndarray | None = None,
                     trunc_cache: dict | None = None, cache_key=None) -> ad.Tensor:
        """Gating applied on top of the attention probabilities."""
        if self.wants_noise and self.config.softsa_variant == "cell_bernoulli":
            if noise is None:
                raise ConfigError("soft sparse attention needs noise during training")
            attn = ad.soft_bernoulli_gate(attn, noise, self.config.tau_soft)
        return self._truncate(attn, trunc_cache, cache_key)

    def attend(self, scores: ad.Tensor, noise: np.ndarray | None = None,
               trunc_cache: dict | None = None, cache_key=None) -> ad.Tensor:
        """Blocked (and possibly sparse) attention from pre-softmax scores.

        ``trunc_cache`` freezes the top-p key selection across repeated
        forwards (used by gradient checks): the mask is computed on first
        use of ``cache_key`` and reused afterwards.
        """
        pre = self.softmax_noise(noise)
        if pre is not None:
            scores = ad.add_const(scores, pre)
        inv_tau = self.softmax_inv_temperature
        if inv_tau != 1.0:
            scores = ad.scale(scores, inv_tau)
        attn = ad.masked_softmax(scores, self.mask)
        return self.post_softmax(attn, noise, trunc_cache, cache_key)

    def _truncate(self, attn: ad.Tensor, trunc_cache: dict | None,
                  cache_key) -> ad.Tensor:
        if self.sparse != "trunc":
            return attn
        key_mask = None
        if trunc_cache is not None:
            key_mask = trunc_cache.get(cache_key)
        if key_mask is None:
            key_mask = top_p_mask(key_impact(attn.data), self.config.top_p)
            if trunc_cache is not None:
                trunc_cache[cache_key] = key_mask
        attn = ad.mul_const(attn, key_mask[..., None, :])
        if self.config.renormalize_after_mask:
            attn = ad.normalize_rows(attn)
        return attn

    @property
    def wants_noise(self) -> bool:
        return self.sparse == "soft" and self.phase == "train"

    @property
    def noise_kind(self) -> str | None:
        if not self.wants_noise:
            return None
        return "gumbel" if self.config.softsa_variant == "row_gumbel" else "logistic"


def compose_design(
    design: AttentionDesign,
    layer: int,
    n_layers: int,
    block_mask: np.ndarray,
    sparsity: SparsityConfig,
    lower_band_layers: int,
    phase: str,
) -> AttentionTransform:
    """Build the effective attention transform for one encoder layer (1-based)."""
    if phase not in ("train", "eval"):
        raise ConfigError(f"phase must be train or eval, got {phase!r}")
    if not 1 <= layer <= n_layers:
        raise ConfigError(f"layer {layer} outside [1, {n_layers}]")
    if not 0 <= lower_band_layers <= n_layers:
        raise ConfigError(f"lower band {lower_band_layers} conflicts with "
                          f"{n_layers}-layer stack")
    in_lower_band = layer <= lower_band_layers
    sparse: str | None = None
    if design is AttentionDesign.TRUNCSA:
        sparse = "trunc"
    elif design is AttentionDesign.SOFTSA:
        sparse = "soft"
    elif design is AttentionDesign.HTRUNCSA and in_lower_band:
        sparse = "trunc"
    elif design in (AttentionDesign.HSOFTSA, AttentionDesign.HIERBLOCK_SOFTSA) \
            and in_lower_band:
        sparse = "soft"
    return AttentionTransform(mask=block_mask, sparse=sparse, config=sparsity,
                              phase=phase, layer=layer)
