"""Flat parameter vectors with per-segment layout metadata."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

SEGMENT_KINDS = ("weight", "bias", "bn_gamma", "bn_beta")


class LayoutMismatch(ValueError):
    """Two parameter-aligned objects do not share a layout."""


@dataclass(frozen=True)
class Architecture:
    """MLP shape: ``layer_sizes`` runs input -> hidden... -> output.

    ``use_batchnorm`` holds one flag per hidden layer; a single bool is
    broadcast.  ReLU is the only supported hidden activation and the output
    layer is linear (softmax is folded into the loss).
    """

    layer_sizes: tuple[int, ...]
    use_batchnorm: tuple[bool, ...] = ()
    activation: str = "relu"

    def __init__(self, layer_sizes: Sequence[int], use_batchnorm=False, activation: str = "relu"):
        sizes = tuple(int(s) for s in layer_sizes)
        if len(sizes) < 2:
            raise ValueError(f"need at least 2 layer sizes, got {sizes}")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be >= 1, got {sizes}")
        n_hidden = len(sizes) - 2
        if isinstance(use_batchnorm, (bool, np.bool_)):
            bn = (bool(use_batchnorm),) * n_hidden
        else:
            bn = tuple(bool(b) for b in use_batchnorm)
            if len(bn) != n_hidden:
                raise ValueError(f"use_batchnorm needs {n_hidden} flags, got {len(bn)}")
        if activation != "relu":
            raise ValueError(f"unsupported activation {activation!r}")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "use_batchnorm", bn)
        object.__setattr__(self, "activation", activation)

    @property
    def n_layers(self) -> int:
        """Number of linear layers."""
        return len(self.layer_sizes) - 1

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def has_batchnorm(self) -> bool:
        return any(self.use_batchnorm)

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "use_batchnorm": list(self.use_batchnorm),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(d["layer_sizes"], d.get("use_batchnorm", False), d.get("activation", "relu"))


@dataclass(frozen=True)
class Segment:
    layer: int
    kind: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.size)

    @property
    def name(self) -> str:
        return f"layer{self.layer}.{self.kind}"


@dataclass(frozen=True)
class Layout:
    arch: Architecture
    segments: tuple[Segment, ...] = field(default=())

    @classmethod
    def for_arch(cls, arch: Architecture) -> "Layout":
        segs = []
        offset = 0
        sizes = arch.layer_sizes
        for layer in range(arch.n_layers):
            fan_in, fan_out = sizes[layer], sizes[layer + 1]
            shapes = [("weight", (fan_in, fan_out)), ("bias", (fan_out,))]
            if layer < arch.n_layers - 1 and arch.use_batchnorm[layer]:
                shapes += [("bn_gamma", (fan_out,)), ("bn_beta", (fan_out,))]
            for kind, shape in shapes:
                seg = Segment(layer, kind, offset, shape)
                segs.append(seg)
                offset += seg.size
        return cls(arch, tuple(segs))

    @property
    def size(self) -> int:
        if not self.segments:
            return 0
        last = self.segments[-1]
        return last.offset + last.size

    def get(self, layer: int, kind: str) -> Segment | None:
        for seg in self.segments:
            if seg.layer == layer and seg.kind == kind:
                return seg
        return None

    def weight_segments(self) -> list[Segment]:
        return [s for s in self.segments if s.kind == "weight"]

    def kind_mask(self, kinds: Sequence[str]) -> np.ndarray:
        """Boolean vector selecting coordinates that belong to ``kinds``."""
        out = np.zeros(self.size, dtype=bool)
        for seg in self.segments:
            if seg.kind in kinds:
                out[seg.slice] = True
        return out

    def describe_difference(self, other: "Layout") -> str:
        """Names of the segments whose shape or position differ."""
        mine = {(s.layer, s.kind): s for s in self.segments}
        theirs = {(s.layer, s.kind): s for s in other.segments}
        names = []
        for key in sorted(mine.keys() | theirs.keys()):
            a, b = mine.get(key), theirs.get(key)
            if a is None or b is None or a.shape != b.shape:
                shape_a = a.shape if a else "missing"
                shape_b = b.shape if b else "missing"
                names.append(f"layer {key[0]} {key[1]} {shape_a} vs {shape_b}")
            elif a.offset != b.offset:
                names.append(f"layer {key[0]} {key[1]} offset {a.offset} vs {b.offset}")
        if not names and self.arch != other.arch:
            return f"architectures differ: {self.arch.to_dict()} vs {other.arch.to_dict()}"
        return "segments differ: " + "; ".join(names) if names else "layouts equal"


def check_layouts(a: Layout, b: Layout) -> None:
    if a is not b and a != b:
        raise LayoutMismatch(a.describe_difference(b))


class ParamVector:
    """All trainable parameters of a network packed into one f64 array."""

    __slots__ = ("values", "layout")

    def __init__(self, values: np.ndarray, layout: Layout):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] != layout.size:
            raise LayoutMismatch(f"expected flat vector of length {layout.size}, got shape {values.shape}")
        self.values = values
        self.layout = layout

    @classmethod
    def zeros(cls, layout: Layout) -> "ParamVector":
        return cls(np.zeros(layout.size), layout)

    @property
    def arch(self) -> Architecture:
        return self.layout.arch

    def __len__(self) -> int:
        return self.values.shape[0]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def segment(self, layer: int, kind: str) -> np.ndarray:
        """Shaped view into one segment (writes go through)."""
        seg = self.layout.get(layer, kind)
        if seg is None:
            raise KeyError(f"no segment layer{layer}.{kind}")
        return self.values[seg.slice].reshape(seg.shape)

    def iter_segments(self) -> Iterator[tuple[Segment, np.ndarray]]:
        for seg in self.layout.segments:
            yield seg, self.values[seg.slice].reshape(seg.shape)

    def bitwise_equal(self, other: "ParamVector") -> bool:
        return self.layout == other.layout and self.values.tobytes() == other.values.tobytes()

    def _coerce(self, other) -> np.ndarray:
        if isinstance(other, ParamVector):
            check_layouts(self.layout, other.layout)
            return other.values
        return other

    def __add__(self, other) -> "ParamVector":
        return ParamVector(self.values + self._coerce(other), self.layout)

    def __sub__(self, other) -> "ParamVector":
        return ParamVector(self.values - self._coerce(other), self.layout)

    def __mul__(self, scalar: float) -> "ParamVector":
        if isinstance(scalar, ParamVector):
            raise TypeError("use apply_mask or .values for elementwise products")
        return ParamVector(self.values * float(scalar), self.layout)

    __rmul__ = __mul__

    def __neg__(self) -> "ParamVector":
        return ParamVector(-self.values, self.layout)

    def __repr__(self) -> str:
        return f"ParamVector(n={len(self)}, layers={self.arch.layer_sizes})"
