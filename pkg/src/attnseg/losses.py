"""Training losses: pixelwise binary cross-entropy, soft Jaccard, and their sum."""

from __future__ import annotations

from attnseg.tensor import ShapeError, Tensor, log, tmean, tsum

CLAMP_EPS = 1e-7


def _check_shapes(pred: Tensor, target: Tensor, op: str) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"{op}: prediction {pred.shape} vs target {target.shape}")


def bce_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped to [1e-7, 1-1e-7]."""
    _check_shapes(pred, target, "bce_loss")
    p = pred.clip(CLAMP_EPS, 1.0 - CLAMP_EPS)
    term = target * log(p) + (1.0 - target) * log(1.0 - p)
    return -tmean(term)


def jaccard_loss(pred: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    """Soft intersection-over-union loss: 1 - (|P.G|+s)/(|P|+|G|-|P.G|+s).

    With smooth=0 and two empty masks the ratio is 0/0; that degenerate
    perfect-agreement case returns loss 0.
    """
    _check_shapes(pred, target, "jaccard_loss")
    inter = tsum(pred * target)
    union = tsum(pred) + tsum(target) - inter
    if smooth == 0.0 and float(union.data) == 0.0:
        return Tensor(0.0)
    return 1.0 - (inter + smooth) / (union + smooth)


def combined_loss(pred: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    """Sum of BCE and soft Jaccard losses."""
    return bce_loss(pred, target) + jaccard_loss(pred, target, smooth=smooth)
