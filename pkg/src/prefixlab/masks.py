"""Attention-mask construction: prefix blocking, causal masks, layer schedules.

Masks are [T, P+T] float arrays over (query x (prefix + input-key)) cells.
Blocking only ever removes prefix columns; input-key columns stay fully
visible on the encoder side. All builders are pure functions.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError


class AttentionDesign(enum.Enum):
    DENSE = "dense"
    UNIBLOCK = "uniblock"
    HIERBLOCK = "hierblock"
    TRUNCSA = "truncsa"
    SOFTSA = "softsa"
    HTRUNCSA = "htruncsa"
    HSOFTSA = "hsoftsa"
    HIERBLOCK_SOFTSA = "hierblock+softsa"

    @classmethod
    def parse(cls, name: str) -> "AttentionDesign":
        key = name.strip().lower().replace("-", "+").replace("_", "+")
        for design in cls:
            if design.value.replace("+", "") == key.replace("+", ""):
                return design
        raise ConfigError(f"unknown attention design {name!r}")


BLOCKING_DESIGNS = {AttentionDesign.UNIBLOCK, AttentionDesign.HIERBLOCK,
                    AttentionDesign.HIERBLOCK_SOFTSA}
SPARSE_DESIGNS = {AttentionDesign.TRUNCSA, AttentionDesign.SOFTSA,
                  AttentionDesign.HTRUNCSA, AttentionDesign.HSOFTSA,
                  AttentionDesign.HIERBLOCK_SOFTSA}


def default_lower_band(n_layers: int) -> int:
    """Lower-band depth: 7 of 12 layers, scaled and rounded up."""
    return math.ceil(7 * n_layers / 12)


@dataclass(frozen=True)
class BlockSpec:
    """Segment counts for blocking and the depth of the lower layer band."""

    enc_segments: int = 2
    dec_segments: int = 1
    lower_band_layers: int | None = None  # None: default_lower_band per stack

    def __post_init__(self):
        if self.enc_segments not in (1, 2, 3):
            raise ConfigError(f"enc_segments must be in {{1,2,3}}, got {self.enc_segments}")
        if self.dec_segments not in (1, 2):
            raise ConfigError(f"dec_segments must be in {{1,2}}, got {self.dec_segments}")
        if self.lower_band_layers is not None and self.lower_band_layers < 0:
            raise ConfigError("lower_band_layers must be >= 0")

    def band(self, n_layers: int) -> int:
        if self.lower_band_layers is None:
            return default_lower_band(n_layers)
        if self.lower_band_layers > n_layers:
            raise ConfigError(f"lower_band_layers {self.lower_band_layers} exceeds "
                              f"stack depth {n_layers}")
        return self.lower_band_layers


@dataclass(frozen=True)
class SegmentMap:
    """Token position -> segment id, as contiguous non-decreasing spans."""

    ids: tuple[int, ...]
    n_segments: int

    def __post_init__(self):
        for a, b in zip(self.ids, self.ids[1:]):
            if b < a:
                raise ConfigError("segment ids must be non-decreasing")
        if self.ids and (min(self.ids) < 0 or max(self.ids) >= self.n_segments):
            raise ConfigError("segment id out of range")

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def equal_split(cls, n_tokens: int, n_segments: int) -> "SegmentMap":
        """Contiguous spans whose lengths differ by at most one (larger first)."""
        sizes = balanced_sizes(n_tokens, n_segments)
        ids: list[int] = []
        for seg, size in enumerate(sizes):
            ids.extend([seg] * size)
        return cls(tuple(ids), n_segments)

    @classmethod
    def from_spans(cls, span_lengths: list[int], n_segments: int | None = None) -> "SegmentMap":
        ids: list[int] = []
        for seg, size in enumerate(span_lengths):
            ids.extend([seg] * size)
        return cls(tuple(ids), n_segments or len(span_lengths))


def balanced_sizes(total: int, parts: int) -> list[int]:
    if parts < 1:
        raise ConfigError("parts must be >= 1")
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def allocate_prefixes(prefix_length: int, segments: int) -> list[range]:
    """Split [0, P) into ``segments`` contiguous ranges with sizes differing <= 1."""
    if segments < 1:
        raise ConfigError("segments must be >= 1")
    if prefix_length < segments:
        raise ConfigError(f"prefix length {prefix_length} cannot cover {segments} segments")
    sizes = balanced_sizes(prefix_length, segments)
    ranges, start = [], 0
    for size in sizes:
        ranges.append(range(start, start + size))
        start += size
    return ranges


@dataclass(frozen=True)
class AttentionMask:
    """Binary mask over (query x (prefix + input-key)) cells at one layer."""

    data: np.ndarray = field(repr=False)
    layer: int = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


def dense_mask(n_queries: int, prefix_length: int, n_keys: int, layer: int = 0) -> AttentionMask:
    return AttentionMask(np.ones((n_queries, prefix_length + n_keys)), layer)


def uniform_block_mask(
    seg_map: SegmentMap,
    alloc: list[range],
    n_keys: int,
    prefix_length: int,
    layer: int = 0,
) -> AttentionMask:
    """Each query sees only its segment's prefix range plus every input key."""
    if sum(len(r) for r in alloc) != prefix_length:
        raise DimensionError("prefix allocation does not cover the prefix length")
    t = len(seg_map)
    m = np.zeros((t, prefix_length + n_keys))
    m[:, prefix_length:] = 1.0
    for q, seg in enumerate(seg_map.ids):
        r = alloc[seg]
        m[q, r.start:r.stop] = 1.0
    return AttentionMask(m, layer)


def hierarchical_block_mask(
    layer: int,
    n_layers: int,
    lower_band_layers: int,
    seg_map: SegmentMap,
    alloc: list[range],
    n_keys: int,
    prefix_length: int,
) -> AttentionMask:
    """Uniform blocking on layers <= lower_band_layers, dense above (1-based)."""
    if not 1 <= layer <= n_layers:
        raise ConfigError(f"layer {layer} outside [1, {n_layers}]")
    if layer <= lower_band_layers:
        return uniform_block_mask(seg_map, alloc, n_keys, prefix_length, layer)
    return dense_mask(len(seg_map), prefix_length, n_keys, layer)


def causal_mask(n_queries: int, prefix_length: int) -> np.ndarray:
    """Decoder self-attention: prefix columns always visible, input region causal."""
    m = np.zeros((n_queries, prefix_length + n_queries))
    m[:, :prefix_length] = 1.0
    m[:, prefix_length:] = np.tril(np.ones((n_queries, n_queries)))
    return m


def restrict_prefix_columns(mask: np.ndarray, seg_map: SegmentMap,
                            alloc: list[range], prefix_length: int) -> np.ndarray:
    """Zero the prefix columns a query's segment was not allocated."""
    if prefix_length == 0:
        return mask
    out = mask.copy()
    block = np.zeros((len(seg_map), prefix_length))
    for q, seg in enumerate(seg_map.ids):
        r = alloc[seg]
        block[q, r.start:r.stop] = 1.0
    out[:, :prefix_length] *= block
    return out


class ScheduleMode(enum.Enum):
    ALL = "all"
    TOP = "top"
    LOW = "low"
    SINGLE = "single"


@dataclass(frozen=True)
class LayerSchedule:
    """Which layers carry a non-empty prefix (layer indices are 1-based)."""

    mode: ScheduleMode = ScheduleMode.ALL
    k: int | None = None

    @classmethod
    def all_layers(cls) -> "LayerSchedule":
        return cls(ScheduleMode.ALL)

    @classmethod
    def top(cls, k: int) -> "LayerSchedule":
        return cls(ScheduleMode.TOP, k)

    @classmethod
    def low(cls, k: int) -> "LayerSchedule":
        return cls(ScheduleMode.LOW, k)

    @classmethod
    def single(cls, layer: int) -> "LayerSchedule":
        return cls(ScheduleMode.SINGLE, layer)

    @classmethod
    def parse(cls, text: str) -> "LayerSchedule":
        text = text.strip().lower()
        if text == "all":
            return cls.all_layers()
        for mode in ("top", "low", "single"):
            if text.startswith(mode + ":"):
                try:
                    k = int(text.split(":", 1)[1])
                except ValueError as exc:
                    raise ConfigError(f"bad schedule {text!r}") from exc
                return cls(ScheduleMode(mode), k)
        raise ConfigError(f"bad schedule {text!r} (use all|top:K|low:K|single:L)")

    def selected(self, n_layers: int) -> list[bool]:
        if self.mode is ScheduleMode.ALL:
            out = [True] * n_layers
        elif self.mode is ScheduleMode.TOP:
            if not 1 <= self.k <= n_layers:
                raise ConfigError(f"top({self.k}) outside [1, {n_layers}]")
            out = [layer > n_layers - self.k for layer in range(1, n_layers + 1)]
        elif self.mode is ScheduleMode.LOW:
            if not 1 <= self.k <= n_layers:
                raise ConfigError(f"low({self.k}) outside [1, {n_layers}]")
            out = [layer <= self.k for layer in range(1, n_layers + 1)]
        else:
            if not 1 <= self.k <= n_layers:
                raise ConfigError(f"single({self.k}) outside [1, {n_layers}]")
            out = [layer == self.k for layer in range(1, n_layers + 1)]
        if not any(out):
            raise ConfigError("schedule selects no layers")
        return out


def layer_subset_schedule(mode: str, n_layers: int, k: int | None = None) -> list[bool]:
    """Convenience wrapper: per-layer selection flags for a named schedule."""
    mode = mode.lower()
    if mode == "all":
        sched = LayerSchedule.all_layers()
    elif mode == "top":
        sched = LayerSchedule.top(k)
    elif mode == "low":
        sched = LayerSchedule.low(k)
    elif mode == "single":
        sched = LayerSchedule.single(k)
    else:
        raise ConfigError(f"unknown schedule mode {mode!r}")
    return sched.selected(n_layers)
