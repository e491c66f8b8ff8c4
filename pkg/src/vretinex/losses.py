"""Non-reference losses over network outputs.

All four losses are means of squared quantities, so their values do not
scale with resolution, and all are differentiable with respect to the
planes they consume. Planes are torch tensors (numpy arrays are
converted) whose last two dimensions are spatial; any leading batch
dimensions are averaged into the result, which makes a batched
evaluation equal the mean of per-sample evaluations.

The four components:

- reflectance consistency: MSE between the reflectances of the original
  and the disturbed brightness, which should describe the same scene.
- exposure control: local n x n mean brightness of the reflectance is
  pulled toward a well-exposed target value.
- spatial structure: signed forward differences of the m x m pooled
  reflectance must match those of the pooled input brightness.
- illumination smoothness: squared-total-variation penalty on both
  inverse-illumination planes.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .network import ForwardOutput

DEFAULT_W_IS = 10.0


@dataclass(frozen=True)
class PoolSpec:
    """Pooling windows and exposure target used by the losses."""

    n_exposure: int = 16
    m_structure: int = 4
    e_target: float = 0.7


@dataclass
class LossBreakdown:
    """The four loss scalars and their weighted total.

    Fields are 0-dim torch tensors; `total` retains the autograd graph
    when the inputs do, so it can drive an optimizer step directly.
    """

    l_rc: Tensor
    l_ec: Tensor
    l_ss: Tensor
    l_is: Tensor
    total: Tensor
    w_is: float = DEFAULT_W_IS

    def floats(self) -> dict[str, float]:
        return {
            "l_rc": float(self.l_rc),
            "l_ec": float(self.l_ec),
            "l_ss": float(self.l_ss),
            "l_is": float(self.l_is),
            "total": float(self.total),
        }


def _as_tensor(p) -> Tensor:
    t = torch.as_tensor(p)
    if t.ndim < 2:
        raise ValueError(f"expected a plane with >= 2 dims, got shape {tuple(t.shape)}")
    return t


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def avg_pool(p, k: int) -> Tensor:
    """Non-overlapping k x k window means over the last two dims.

    Trailing rows/columns that do not fill a window are dropped; k larger
    than either spatial dim is an error.
    """
    p = _as_tensor(p)
    if k < 1:
        raise ValueError(f"window size must be >= 1, got {k}")
    h, w = p.shape[-2:]
    if k > min(h, w):
        raise ValueError(f"window size {k} exceeds plane dims {h}x{w}")
    hk, wk = h // k, w // k
    trimmed = p[..., : hk * k, : wk * k]
    blocks = trimmed.reshape(*p.shape[:-2], hk, k, wk, k)
    return blocks.mean(dim=(-3, -1))


def grad_xy(p) -> tuple[Tensor, Tensor]:
    """Forward differences along x (horizontal) and y (vertical).

    Output shapes are H x (W-1) and (H-1) x W; a single-row or
    single-column plane yields an empty gradient in that direction.
    """
    p = _as_tensor(p)
    gx = p[..., :, 1:] - p[..., :, :-1]
    gy = p[..., 1:, :] - p[..., :-1, :]
    return gx, gy


def gradient_energy(p) -> Tensor:
    """Mean squared forward differences (squared total variation)."""
    p = _as_tensor(p)
    gx, gy = grad_xy(p)
    zero = p.sum() * 0.0  # keeps dtype/device and a graph edge
    ex = gx.pow(2).mean() if gx.numel() else zero
    ey = gy.pow(2).mean() if gy.numel() else zero
    return ex + ey


def reflectance_consistency(r, r_prime) -> Tensor:
    """MSE between the two generated reflectances."""
    r, r_prime = _as_tensor(r), _as_tensor(r_prime)
    _check_same_shape(r, r_prime, "reflectance_consistency")
    return (r - r_prime).pow(2).mean()


def exposure_control(r, spec: PoolSpec = PoolSpec()) -> Tensor:
    """Squared distance of pooled reflectance means from the exposure target."""
    pooled = avg_pool(r, spec.n_exposure)
    return (pooled - spec.e_target).pow(2).mean()


def spatial_structure(r, v, spec: PoolSpec = PoolSpec()) -> Tensor:
    """MSE between signed pooled gradients of reflectance and input.

    Both planes are pooled with the structure window, then the x and y
    forward-difference maps are compared; each direction is averaged over
    its own element count and the two are summed. Comparing signed
    gradients preserves gradient direction, not just magnitude.
    """
    r, v = _as_tensor(r), _as_tensor(v)
    _check_same_shape(r, v, "spatial_structure")
    rm = avg_pool(r, spec.m_structure)
    vm = avg_pool(v, spec.m_structure)
    rx, ry = grad_xy(rm)
    vx, vy = grad_xy(vm)
    zero = rm.sum() * 0.0
    ex = (rx - vx).pow(2).mean() if rx.numel() else zero
    ey = (ry - vy).pow(2).mean() if ry.numel() else zero
    return ex + ey


def illumination_smoothness(l, l_prime) -> Tensor:
    """Squared-TV smoothness penalty over both inverse-illumination planes."""
    l, l_prime = _as_tensor(l), _as_tensor(l_prime)
    _check_same_shape(l, l_prime, "illumination_smoothness")
    return gradient_energy(l) + gradient_energy(l_prime)


def total_loss(
    outputs: tuple[ForwardOutput, ForwardOutput],
    v,
    spec: PoolSpec = PoolSpec(),
    w_is: float = DEFAULT_W_IS,
) -> LossBreakdown:
    """Weighted sum of the four losses for an (original, disturbed) pair.

    Exposure control and spatial structure are evaluated on the original
    reflectance only; the consistency term already ties the disturbed
    reflectance to it.
    """
    out, out_prime = outputs
    v = _as_tensor(v)
    l_rc = reflectance_consistency(out.reflectance, out_prime.reflectance)
    l_ec = exposure_control(out.reflectance, spec)
    l_ss = spatial_structure(out.reflectance, v, spec)
    l_is = illumination_smoothness(
        out.inverse_illumination, out_prime.inverse_illumination
    )
    total = l_rc + l_ec + l_ss + w_is * l_is
    return LossBreakdown(
        l_rc=l_rc, l_ec=l_ec, l_ss=l_ss, l_is=l_is, total=total, w_is=w_is
    )
