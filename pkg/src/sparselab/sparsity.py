"""Binary weight masks, magnitude pruning and the gradual sparsity ramp."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .params import Layout, ParamVector, check_layouts


@dataclass(frozen=True)
class Exclusions:
    """Which weight layers are protected from pruning, and per-layer caps.

    Defaults mirror common practice for sensitive layers: the first layer is
    never pruned and the final classifier layer is capped at 80% sparsity.
    """

    skip_first: bool = True
    final_cap: float | None = 0.8
    caps: Mapping[int, float] = field(default_factory=dict)

    def cap_for(self, layer: int, n_layers: int) -> float | None:
        cap = self.caps.get(layer)
        if layer == n_layers - 1 and self.final_cap is not None:
            cap = self.final_cap if cap is None else min(cap, self.final_cap)
        return cap

    def is_prunable(self, layer: int) -> bool:
        return not (self.skip_first and layer == 0)

    def to_dict(self) -> dict:
        return {
            "skip_first": self.skip_first,
            "final_cap": self.final_cap,
            "caps": {str(k): v for k, v in self.caps.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Exclusions":
        return cls(
            skip_first=bool(d.get("skip_first", True)),
            final_cap=d.get("final_cap", 0.8),
            caps={int(k): float(v) for k, v in d.get("caps", {}).items()},
        )


NO_EXCLUSIONS = Exclusions(skip_first=False, final_cap=None)


class SparsityMask:
    """Boolean keep-mask aligned with a ParamVector layout (True = keep)."""

    __slots__ = ("bits", "layout", "exclusions")

    def __init__(self, bits: np.ndarray, layout: Layout, exclusions: Exclusions = NO_EXCLUSIONS):
        bits = np.asarray(bits, dtype=bool)
        if bits.shape != (layout.size,):
            raise ValueError(f"mask length {bits.shape} does not match layout size {layout.size}")
        self.bits = bits
        self.layout = layout
        self.exclusions = exclusions
        fixed = ~bits & ~self.prunable_selector()
        if fixed.any():
            names = sorted({s.name for s in layout.segments if fixed[s.slice].any()})
            raise ValueError(f"mask drops entries of non-prunable segments: {', '.join(names)}")

    @classmethod
    def ones(cls, layout: Layout, exclusions: Exclusions = NO_EXCLUSIONS) -> "SparsityMask":
        return cls(np.ones(layout.size, dtype=bool), layout, exclusions)

    def prunable_selector(self) -> np.ndarray:
        sel = np.zeros(self.layout.size, dtype=bool)
        for seg in self.layout.weight_segments():
            if self.exclusions.is_prunable(seg.layer):
                sel[seg.slice] = True
        return sel

    @property
    def per_layer_sparsity(self) -> list[float]:
        """Fraction of zero bits in each weight segment, in layer order."""
        return [1.0 - float(self.bits[s.slice].mean()) for s in self.layout.weight_segments()]

    def __and__(self, other: "SparsityMask") -> "SparsityMask":
        check_layouts(self.layout, other.layout)
        return SparsityMask(self.bits & other.bits, self.layout, self.exclusions)

    def bitwise_equal(self, other: "SparsityMask") -> bool:
        return self.layout == other.layout and np.array_equal(self.bits, other.bits)

    def __repr__(self) -> str:
        return f"SparsityMask(per_layer={[round(s, 4) for s in self.per_layer_sparsity]})"


@dataclass(frozen=True)
class PruningSchedule:
    start_step: int
    end_step: int
    frequency: int
    final_sparsity: float
    initial_sparsity: float = 0.0
    exponent: int = 3
    exclusions: Exclusions = field(default_factory=Exclusions)
    monotone: bool = True

    def __post_init__(self):
        errors = []
        if not self.start_step < self.end_step:
            errors.append(f"start_step ({self.start_step}) must be < end_step ({self.end_step})")
        if self.frequency < 1:
            errors.append(f"frequency must be >= 1, got {self.frequency}")
        if not 0.0 <= self.final_sparsity < 1.0:
            errors.append(f"final_sparsity must lie in [0, 1), got {self.final_sparsity}")
        if not 0.0 <= self.initial_sparsity <= self.final_sparsity:
            errors.append("initial_sparsity must lie in [0, final_sparsity]")
        if self.exponent < 1:
            errors.append(f"exponent must be a positive integer, got {self.exponent}")
        if errors:
            raise ValueError("; ".join(errors))

    def event_steps(self) -> list[int]:
        """Steps at which the mask is recomputed; always ends on ``end_step``."""
        steps = list(range(self.start_step, self.end_step, self.frequency))
        steps.append(self.end_step)
        return steps

    def to_dict(self) -> dict:
        return {
            "start_step": self.start_step,
            "end_step": self.end_step,
            "frequency": self.frequency,
            "final_sparsity": self.final_sparsity,
            "initial_sparsity": self.initial_sparsity,
            "exponent": self.exponent,
            "exclusions": self.exclusions.to_dict(),
            "monotone": self.monotone,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PruningSchedule":
        d = dict(d)
        d["exclusions"] = Exclusions.from_dict(d.get("exclusions", {}))
        return cls(**d)


def target_sparsity(sched: PruningSchedule, step: int) -> float:
    """Cubic (by default) ramp from initial to final sparsity."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < sched.start_step:
        return 0.0
    if step >= sched.end_step:
        return sched.final_sparsity
    frac = (step - sched.start_step) / (sched.end_step - sched.start_step)
    s_f, s_i = sched.final_sparsity, sched.initial_sparsity
    return s_f + (s_i - s_f) * (1.0 - frac) ** sched.exponent


def _layer_targets(layout: Layout, sparsity, exclusions: Exclusions) -> dict[int, float]:
    weights = layout.weight_segments()
    n_layers = layout.arch.n_layers
    if isinstance(sparsity, Mapping):
        raw = {int(k): float(v) for k, v in sparsity.items()}
    elif isinstance(sparsity, Sequence) or isinstance(sparsity, np.ndarray):
        if len(sparsity) != len(weights):
            raise ValueError(f"need {len(weights)} per-layer sparsities, got {len(sparsity)}")
        raw = {seg.layer: float(s) for seg, s in zip(weights, sparsity)}
    else:
        raw = {seg.layer: float(sparsity) for seg in weights}
    targets = {}
    for seg in weights:
        if not exclusions.is_prunable(seg.layer):
            continue
        s = raw.get(seg.layer, 0.0)
        if not 0.0 <= s < 1.0:
            raise ValueError(f"sparsity for layer {seg.layer} must lie in [0, 1), got {s}")
        cap = exclusions.cap_for(seg.layer, n_layers)
        targets[seg.layer] = s if cap is None else min(s, cap)
    return targets


def _smallest(scores: np.ndarray, count: int) -> np.ndarray:
    # stable sort: equal magnitudes are pruned lowest index first
    return np.argsort(scores, kind="stable")[:count]


def magnitude_mask(
    params: ParamVector,
    sparsity,
    exclusions: Exclusions = NO_EXCLUSIONS,
    scope: str = "per_layer",
    previous: SparsityMask | None = None,
) -> SparsityMask:
    """Drop the smallest-magnitude weights.

    ``sparsity`` is a single fraction, a list with one fraction per weight
    layer, or a ``{layer: fraction}`` dict.  With ``scope="per_layer"`` each
    prunable segment loses exactly ``floor(s * len)`` entries.  With
    ``scope="global"`` one threshold is shared by all prunable layers
    (``sparsity`` must be a scalar) and caps are enforced afterwards by
    restoring the largest dropped weights of any over-pruned layer.

    When ``previous`` is given, coordinates it already pruned are ranked
    first, so pruning never un-prunes (monotone masks).
    """
    layout = params.layout
    bits = np.ones(layout.size, dtype=bool)
    mags = np.abs(params.values)
    if previous is not None:
        check_layouts(layout, previous.layout)
        mags = np.where(previous.bits, mags, -1.0)
    targets = _layer_targets(layout, sparsity, exclusions)

    if scope == "per_layer":
        for seg in layout.weight_segments():
            if seg.layer not in targets:
                continue
            count = math.floor(targets[seg.layer] * seg.size)
            drop = _smallest(mags[seg.slice], count)
            bits[seg.offset + drop] = False
    elif scope == "global":
        if isinstance(sparsity, (Mapping, Sequence, np.ndarray)):
            raise ValueError("global scope takes a single sparsity fraction")
        segs = [s for s in layout.weight_segments() if s.layer in targets]
        if segs:
            idx = np.concatenate([np.arange(s.offset, s.offset + s.size) for s in segs])
            count = math.floor(float(sparsity) * idx.size)
            bits[idx[_smallest(mags[idx], count)]] = False
            n_layers = layout.arch.n_layers
            for seg in segs:
                cap = exclusions.cap_for(seg.layer, n_layers)
                if cap is None:
                    continue
                allowed = math.floor(cap * seg.size)
                local = bits[seg.slice]
                dropped = np.flatnonzero(~local)
                if dropped.size > allowed:
                    order = np.argsort(-mags[seg.offset + dropped], kind="stable")
                    local[dropped[order[: dropped.size - allowed]]] = True
    else:
        raise ValueError(f"scope must be 'per_layer' or 'global', got {scope!r}")
    return SparsityMask(bits, layout, exclusions)


def apply_mask(params: ParamVector, mask: SparsityMask) -> ParamVector:
    """Zero the masked coordinates (always +0.0, so re-application is bitwise stable)."""
    check_layouts(params.layout, mask.layout)
    return ParamVector(np.where(mask.bits, params.values, 0.0), params.layout)


def mask_sparsity(mask: SparsityMask, scope: str = "global"):
    """Fraction of zero bits: over the whole vector (``global``), per weight
    layer (``per_layer``, a list) or over prunable weights only (``prunable_only``)."""
    if scope == "global":
        return 1.0 - float(mask.bits.mean()) if mask.bits.size else 0.0
    if scope == "per_layer":
        return mask.per_layer_sparsity
    if scope == "prunable_only":
        sel = mask.prunable_selector()
        if not sel.any():
            return 0.0
        return 1.0 - float(mask.bits[sel].mean())
    raise ValueError(f"unknown scope {scope!r}")
