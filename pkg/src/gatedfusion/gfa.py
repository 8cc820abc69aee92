"""Gated feature aggregation: amplitude scaling plus two gating variants.

Two fixed-length features arrive per segment: a clip feature ``v`` from the
video branch and an aggregated object feature ``o`` from the detection
branch.  The two banks can carry wildly different amplitudes, which makes
naive concatenation hard to train, so variant A first rescales ``o`` to
match ``v`` and then self-gates the concatenation:

    F = sigmoid(W [v, scale(o)] + b) * [v, scale(o)]

Variant B sidesteps concatenation entirely and gates the clip feature
elementwise by a sigmoid computed from the object feature alone:

    F = sigmoid(W o + b) * v

Because the gate is strictly inside (0, 1), no output coordinate can exceed
the corresponding input coordinate in magnitude, which is what keeps
training stable even when one modality misbehaves.

Scaling modes for variant A:

* ``none``       -- use ``o`` as is.
* ``scalar``     -- divide by a fixed positive constant ``s``.
* ``norm``       -- rescale ``o`` to the amplitude of ``v``:
                    ``o / max(|o|, eps) * |v|``.
* ``norm-scalar`` -- ``norm`` followed by division by ``s``.

Forward passes return a cache holding the intermediates the backward pass
needs; ``gfa_backward`` produces exact analytic gradients for both inputs
and both parameters, including the paths through the scaling (under
``norm`` the amplitude of ``v`` feeds the scaled object feature, and that
path is differentiated too, not dropped).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError, ValidationError
from .tensor import affine, concat, hadamard, l2_norm, sigmoid

__all__ = [
    "SCALE_KINDS",
    "ScaleMode",
    "GfaParams",
    "GfaCache",
    "scale_object_feature",
    "scale_vjp",
    "gfa_a_forward",
    "gfa_b_forward",
    "gfa_forward",
    "gfa_backward",
    "init_gfa_params",
    "estimate_scalar_divisor",
]

SCALE_KINDS = ("none", "scalar", "norm", "norm-scalar")


@dataclass(frozen=True)
class ScaleMode:
    """How to rescale the object feature before gating.

    ``s`` is the scalar divisor (used by ``scalar`` and ``norm-scalar``);
    ``epsilon`` guards the division by ``|o|`` so a zero object feature
    degrades continuously to zero instead of blowing up.
    """

    kind: str = "none"
    s: float = 1.0
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if self.kind not in SCALE_KINDS:
            raise ValidationError(
                f"scale kind {self.kind!r} not one of {SCALE_KINDS}")
        if not self.s > 0:
            raise ValidationError(f"scale divisor must be positive, got {self.s}")
        if not self.epsilon > 0:
            raise ValidationError(f"scale epsilon must be positive, got {self.epsilon}")

    @classmethod
    def none(cls) -> "ScaleMode":
        return cls("none")

    @classmethod
    def scalar(cls, s: float) -> "ScaleMode":
        return cls("scalar", s=s)

    @classmethod
    def norm(cls, epsilon: float = 1e-8) -> "ScaleMode":
        return cls("norm", epsilon=epsilon)

    @classmethod
    def norm_scalar(cls, s: float, epsilon: float = 1e-8) -> "ScaleMode":
        return cls("norm-scalar", s=s, epsilon=epsilon)


@dataclass
class GfaParams:
    """Gate parameters.  Variant ``a`` needs a square W over the concatenated
    dims and gates the concatenation; variant ``b`` maps the object feature
    to a gate over the clip feature, so W is (dim_v x dim_o).

    The scale mode only participates in variant ``a``; variant ``b`` consumes
    the object feature unscaled (its gate is bounded regardless of amplitude).
    """

    variant: str
    W: np.ndarray
    b: np.ndarray
    scale: ScaleMode = field(default_factory=ScaleMode.none)

    def __post_init__(self) -> None:
        if self.variant not in ("a", "b"):
            raise ValidationError(f"gfa variant must be 'a' or 'b', got {self.variant!r}")
        if self.W.ndim != 2 or self.b.ndim != 1:
            raise ShapeError("gfa params: W must be 2-D and b 1-D")
        if self.W.shape[0] != self.b.shape[0]:
            raise ShapeError(
                f"gfa params: W has {self.W.shape[0]} rows but b has dim {self.b.shape[0]}")
        if self.variant == "a" and self.W.shape[0] != self.W.shape[1]:
            raise ShapeError(
                f"gfa variant a: W must be square, got {self.W.shape[0]}x{self.W.shape[1]}")


@dataclass
class GfaCache:
    """Intermediates saved by a forward pass for the matching backward pass."""

    variant: str
    v: np.ndarray
    o: np.ndarray
    gate: np.ndarray
    scaled_o: np.ndarray | None = None
    concat_in: np.ndarray | None = None


def scale_object_feature(o: np.ndarray, v: np.ndarray, mode: ScaleMode) -> np.ndarray:
    """Rescale the object feature ``o`` according to ``mode`` (see module doc)."""
    if mode.kind == "none":
        return o.copy()
    if mode.kind == "scalar":
        return o / mode.s
    # norm / norm-scalar: bring |o| to |v|, with an epsilon floor on |o|.
    m = max(l2_norm(o), mode.epsilon)
    factor = l2_norm(v) / m
    if mode.kind == "norm-scalar":
        factor /= mode.s
    return o * factor


def scale_vjp(o: np.ndarray, v: np.ndarray, mode: ScaleMode,
              upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``scale_object_feature`` w.r.t. ``o`` and ``v``."""
    if upstream.shape != o.shape:
        raise ShapeError(
            f"scale_vjp: upstream dim {upstream.shape[0]}, expected {o.shape[0]}")
    if mode.kind == "none":
        return upstream.copy(), np.zeros_like(v)
    if mode.kind == "scalar":
        return upstream / mode.s, np.zeros_like(v)

    inv_s = 1.0 / mode.s if mode.kind == "norm-scalar" else 1.0
    no = l2_norm(o)
    nv = l2_norm(v)
    m = max(no, mode.epsilon)
    o_dot_u = float(np.dot(o, upstream))

    do = (inv_s * nv / m) * upstream
    if no > mode.epsilon:
        # Below the epsilon floor the scaling is linear in o and this
        # normalization term vanishes.
        do = do - (inv_s * nv / (no * m * m)) * o_dot_u * o
    if nv == 0.0:
        dv = np.zeros_like(v)
    else:
        dv = (inv_s * o_dot_u / (m * nv)) * v
    return do, dv


def _check_a_shapes(v: np.ndarray, o: np.ndarray, p: GfaParams) -> None:
    total = v.shape[0] + o.shape[0]
    if p.W.shape != (total, total):
        raise ShapeError(
            f"gfa variant a: W must be {total}x{total} for dim_v={v.shape[0]}, "
            f"dim_o={o.shape[0]}, got {p.W.shape[0]}x{p.W.shape[1]}")


def gfa_a_forward(v: np.ndarray, o: np.ndarray,
                  p: GfaParams) -> tuple[np.ndarray, GfaCache]:
    """Variant A: gate the concatenation of ``v`` and the scaled ``o``."""
    if p.variant != "a":
        raise ValidationError(f"gfa_a_forward called with variant {p.variant!r} params")
    _check_a_shapes(v, o, p)
    scaled = scale_object_feature(o, v, p.scale)
    c = concat(v, scaled)
    gate = sigmoid(affine(c, p.W, p.b))
    fused = hadamard(gate, c)
    cache = GfaCache(variant="a", v=v, o=o, gate=gate, scaled_o=scaled, concat_in=c)
    return fused, cache


def gfa_b_forward(v: np.ndarray, o: np.ndarray,
                  p: GfaParams) -> tuple[np.ndarray, GfaCache]:
    """Variant B: gate ``v`` elementwise by a sigmoid of an affine map of ``o``."""
    if p.variant != "b":
        raise ValidationError(f"gfa_b_forward called with variant {p.variant!r} params")
    if p.W.shape[1] != o.shape[0]:
        raise ShapeError(
            f"gfa variant b: W expects dim_o {p.W.shape[1]}, got {o.shape[0]}")
    if p.W.shape[0] != v.shape[0]:
        raise ShapeError(
            f"gfa variant b: W produces dim {p.W.shape[0]}, but v has dim {v.shape[0]}")
    gate = sigmoid(affine(o, p.W, p.b))
    fused = hadamard(gate, v)
    return fused, GfaCache(variant="b", v=v, o=o, gate=gate)


def gfa_forward(v: np.ndarray, o: np.ndarray,
                p: GfaParams) -> tuple[np.ndarray, GfaCache]:
    if p.variant == "a":
        return gfa_a_forward(v, o, p)
    return gfa_b_forward(v, o, p)


def gfa_backward(cache: GfaCache, p: GfaParams,
                 dF: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of the fused output w.r.t. ``(v, o, W, b)``.

    ``cache`` must come from the forward pass that used ``p``.  Gradients
    that reach a value through several paths (e.g. ``v`` through both the
    concatenation and, under ``norm`` scaling, the amplitude) are summed.
    """
    if cache.variant != p.variant:
        raise ValidationError(
            f"gfa_backward: cache is variant {cache.variant!r}, params are {p.variant!r}")
    gate = cache.gate
    if dF.shape != gate.shape:
        raise ShapeError(
            f"gfa_backward: dF has dim {dF.shape[0]}, expected {gate.shape[0]}")

    if p.variant == "a":
        c = cache.concat_in
        dgate = dF * c
        dc = dF * gate
        dz = dgate * gate * (1.0 - gate)
        dW = np.outer(dz, c)
        db = dz.copy()
        dc = dc + p.W.T @ dz
        dim_v = cache.v.shape[0]
        dv_cat, dscaled = dc[:dim_v], dc[dim_v:]
        do, dv_scale = scale_vjp(cache.o, cache.v, p.scale, dscaled)
        return dv_cat + dv_scale, do, dW, db

    dgate = dF * cache.v
    dv = dF * gate
    dz = dgate * gate * (1.0 - gate)
    dW = np.outer(dz, cache.o)
    db = dz.copy()
    do = p.W.T @ dz
    return dv, do, dW, db


def init_gfa_params(dim_v: int, dim_o: int, variant: str,
                    scale: ScaleMode | None = None,
                    rng: np.random.Generator | None = None) -> GfaParams:
    """Fresh parameters: W uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], b zero."""
    rng = rng if rng is not None else np.random.default_rng()
    scale = scale if scale is not None else ScaleMode.none()
    if variant == "a":
        n = dim_v + dim_o
        rows, cols = n, n
    elif variant == "b":
        rows, cols = dim_v, dim_o
    else:
        raise ValidationError(f"gfa variant must be 'a' or 'b', got {variant!r}")
    bound = 1.0 / np.sqrt(cols)
    W = rng.uniform(-bound, bound, size=(rows, cols))
    return GfaParams(variant=variant, W=W, b=np.zeros(rows), scale=scale)


def estimate_scalar_divisor(clip_features: Iterable[np.ndarray] | Sequence[np.ndarray],
                            object_features: Iterable[np.ndarray] | Sequence[np.ndarray]) -> float:
    """Calibrate the scalar divisor as mean(|o|) / mean(|v|) over a batch, so
    dividing by it brings the object amplitudes near the clip amplitudes."""
    v_norms = [l2_norm(v) for v in clip_features]
    o_norms = [l2_norm(o) for o in object_features]
    if not v_norms or not o_norms:
        raise ValidationError("estimate_scalar_divisor: empty calibration batch")
    mean_v = float(np.mean(v_norms))
    mean_o = float(np.mean(o_norms))
    if mean_v == 0.0:
        raise ValidationError("estimate_scalar_divisor: clip features all zero")
    if mean_o == 0.0:
        raise ValidationError("estimate_scalar_divisor: object features all zero")
    return mean_o / mean_v
