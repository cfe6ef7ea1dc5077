"""Bounding-box regression losses with analytic gradients.

Box losses differentiate with respect to the predicted box corners in the
order ``[x_min, y_min, x_max, y_max]``. ``smooth_l1_loss`` differentiates with
respect to the predicted regression target instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .geometry import Box, RegressionTarget, area, center_distance_sq, enclosing_box, iou

V_SCALE_SQUARED = 4.0 / math.pi**2
V_SCALE_PRINTED = 4.0 / math.pi
V_FORMS = ("squared", "printed")


@dataclass(frozen=True)
class CIoUTerms:
    iou: float
    center_penalty: float
    v: float
    alpha: float


@dataclass(frozen=True)
class LossEval:
    value: float
    gradient: np.ndarray
    terms: CIoUTerms | None = None


def smooth_l1_loss(t: RegressionTarget, t_star: RegressionTarget) -> LossEval:
    d = np.asarray(t, dtype=float) - np.asarray(t_star, dtype=float)
    ad = np.abs(d)
    small = ad < 1.0
    value = np.where(small, 0.5 * d * d, ad - 0.5).sum()
    grad = np.where(small, d, np.sign(d))
    return LossEval(float(value), grad)


def _overlap(pred: Box, gt: Box) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Intersection, union and their gradients w.r.t. the predicted corners."""
    x0, y0, x1, y1 = pred.as_tuple()
    gx0, gy0, gx1, gy1 = gt.as_tuple()
    pw, ph = x1 - x0, y1 - y0
    d_area_p = np.array([-ph, -pw, ph, pw])

    iw = min(x1, gx1) - max(x0, gx0)
    ih = min(y1, gy1) - max(y0, gy0)
    if iw >= 0 and ih >= 0 and (iw > 0 or ih > 0):
        # edge contact counts as the limit of overlap (one-sided from the interior)
        inter = iw * ih
        # at an exact edge tie the intersection edge follows the prediction
        d_iw = np.array([-1.0 if x0 >= gx0 else 0.0, 0.0, 1.0 if x1 <= gx1 else 0.0, 0.0])
        d_ih = np.array([0.0, -1.0 if y0 >= gy0 else 0.0, 0.0, 1.0 if y1 <= gy1 else 0.0])
        d_inter = d_iw * ih + d_ih * iw
    else:
        inter = 0.0
        d_inter = np.zeros(4)
    union = area(pred) + area(gt) - inter
    return inter, union, d_inter, d_area_p - d_inter


def _iou_and_grad(pred: Box, gt: Box) -> tuple[float, np.ndarray, float, np.ndarray]:
    inter, union, d_inter, d_union = _overlap(pred, gt)
    value = inter / union
    grad = (d_inter * union - inter * d_union) / (union * union)
    return value, grad, union, d_union


def _enclosure(pred: Box, gt: Box) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Enclosing width/height and their gradients w.r.t. the predicted corners."""
    c = enclosing_box(pred, gt)
    # at an exact edge tie the enclosure edge follows the ground truth
    d_cw = np.array([-1.0 if pred.x_min < gt.x_min else 0.0, 0.0, 1.0 if pred.x_max > gt.x_max else 0.0, 0.0])
    d_ch = np.array([0.0, -1.0 if pred.y_min < gt.y_min else 0.0, 0.0, 1.0 if pred.y_max > gt.y_max else 0.0])
    return c.w, c.h, d_cw, d_ch


def _require_gt(gt: Box) -> None:
    if area(gt) <= 0:
        raise ValueError(f"ground truth must have positive area: {gt}")


def iou_loss(pred: Box, gt: Box) -> LossEval:
    """``1 - IoU``. Zero gradient whenever the boxes do not overlap."""
    _require_gt(gt)
    value, grad, _, _ = _iou_and_grad(pred, gt)
    return LossEval(1.0 - value, -grad)


def giou_loss(pred: Box, gt: Box) -> LossEval:
    _require_gt(gt)
    value, grad, union, d_union = _iou_and_grad(pred, gt)
    cw, ch, d_cw, d_ch = _enclosure(pred, gt)
    c_area = cw * ch
    d_c_area = d_cw * ch + d_ch * cw
    # GIoU = IoU - (C - U)/C = IoU - 1 + U/C
    giou = value - 1.0 + union / c_area
    d_giou = grad + (d_union * c_area - union * d_c_area) / (c_area * c_area)
    return LossEval(1.0 - giou, -d_giou)


def aspect_consistency(pred: Box, gt: Box, v_form: str = "squared") -> tuple[float, np.ndarray]:
    """Aspect-ratio penalty ``v`` and its gradient w.r.t. the predicted corners."""
    w, h = pred.w, pred.h
    diff = math.atan(gt.w / gt.h) - math.atan(w / h)
    # d/dw atan(w/h) = h/(w^2+h^2), d/dh atan(w/h) = -w/(w^2+h^2)
    r2 = w * w + h * h
    d_atan = np.array([-h / r2, w / r2, h / r2, -w / r2])
    if v_form == "squared":
        return V_SCALE_SQUARED * diff * diff, -2.0 * V_SCALE_SQUARED * diff * d_atan
    if v_form == "printed":
        return V_SCALE_PRINTED * diff, -V_SCALE_PRINTED * d_atan
    raise ValueError(f"unknown v_form {v_form!r}; expected one of {V_FORMS}")


def ciou_alpha(iou_value: float, v: float) -> float:
    den = (1.0 - iou_value) + v
    return v / den if den != 0 else 0.0


def ciou_loss(pred: Box, gt: Box, *, alpha: float | None = None, v_form: str = "squared") -> LossEval:
    """``1 - IoU + rho^2/c^2 + alpha * v``.

    The trade-off weight ``alpha`` is treated as a constant when
    differentiating. Pass ``alpha`` to freeze it at a given value instead of
    deriving it from the current boxes. ``v_form="printed"`` swaps in the
    unsquared ``4/pi`` aspect term for comparison runs; it can go negative.
    """
    _require_gt(gt)
    if pred.w <= 0 or pred.h <= 0:
        raise ValueError(f"prediction must have positive width and height: {pred}")
    iou_value, d_iou, _, _ = _iou_and_grad(pred, gt)

    cw, ch, d_cw, d_ch = _enclosure(pred, gt)
    c2 = cw * cw + ch * ch
    d_c2 = 2.0 * cw * d_cw + 2.0 * ch * d_ch
    rho2 = center_distance_sq(pred, gt)
    dx, dy = pred.x - gt.x, pred.y - gt.y
    d_rho2 = np.array([dx, dy, dx, dy])
    penalty = rho2 / c2
    d_penalty = (d_rho2 * c2 - rho2 * d_c2) / (c2 * c2)

    v, d_v = aspect_consistency(pred, gt, v_form)
    a = ciou_alpha(iou_value, v) if alpha is None else alpha

    value = 1.0 - iou_value + penalty + a * v
    grad = -d_iou + d_penalty + a * d_v
    return LossEval(value, grad, CIoUTerms(iou_value, penalty, v, a))


BOX_LOSSES: dict[str, Callable[[Box, Box], LossEval]] = {
    "iou": iou_loss,
    "giou": giou_loss,
    "ciou": ciou_loss,
}
LOSS_KINDS = ("smooth-l1", *BOX_LOSSES)


def loss_value(loss_kind: str, pred: Sequence[float], gt: Sequence[float], **kw) -> float:
    if loss_kind == "smooth-l1":
        return smooth_l1_loss(RegressionTarget(*pred), RegressionTarget(*gt)).value
    return BOX_LOSSES[loss_kind](Box(*pred), Box(*gt), **kw).value


def _form_kw(loss_kind: str, v_form: str) -> dict:
    return {"v_form": v_form} if loss_kind == "ciou" else {}


def analytic_gradient(
    loss_kind: str, pred: Sequence[float], gt: Sequence[float], v_form: str = "squared"
) -> np.ndarray:
    if loss_kind == "smooth-l1":
        return smooth_l1_loss(RegressionTarget(*pred), RegressionTarget(*gt)).gradient
    return BOX_LOSSES[loss_kind](Box(*pred), Box(*gt), **_form_kw(loss_kind, v_form)).gradient


def finite_difference_gradient(
    loss_kind: str, pred: Sequence[float], gt: Sequence[float], epsilon: float = 1e-6, v_form: str = "squared"
) -> np.ndarray:
    """Central-difference gradient of the named loss w.r.t. the prediction.

    For ``ciou`` the trade-off weight is frozen at its value at ``pred`` so the
    result is comparable with the analytic gradient.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss {loss_kind!r}; expected one of {LOSS_KINDS}")
    kw = _form_kw(loss_kind, v_form)
    if loss_kind == "ciou":
        kw["alpha"] = ciou_loss(Box(*pred), Box(*gt), v_form=v_form).terms.alpha
    base = np.asarray(pred, dtype=float)
    grad = np.zeros(4)
    for i in range(4):
        plus, minus = base.copy(), base.copy()
        plus[i] += epsilon
        minus[i] -= epsilon
        grad[i] = (loss_value(loss_kind, plus, gt, **kw) - loss_value(loss_kind, minus, gt, **kw)) / (2 * epsilon)
    return grad


def gradient_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error; pairs with both gradients below ``floor`` count as exact."""
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    diff = float(np.linalg.norm(analytic - numeric))
    if scale < floor:
        return 0.0 if diff < floor else math.inf
    return diff / scale


def near_kink(pred: Sequence[float], gt: Sequence[float], margin: float) -> bool:
    """True if any predicted edge lies within ``margin`` of a ground-truth edge on the same axis."""
    px0, py0, px1, py1 = pred
    gx0, gy0, gx1, gy1 = gt
    return any(abs(p - g) < margin for p in (px0, px1) for g in (gx0, gx1)) or any(
        abs(p - g) < margin for p in (py0, py1) for g in (gy0, gy1)
    )


_MIN_MOVE_RTOL = 1e-13
_KINK_RTOL = 1e-9
_PROBE_RTOL = 1e-6


@dataclass(frozen=True)
class BoxFit:
    box: Box
    steps: int
    final_iou: float
    converged: bool


def _on_kink(coords: np.ndarray, target: Box) -> np.ndarray:
    """Which predicted corners sit on a same-axis ground-truth edge."""
    tol = _KINK_RTOL * max(1.0, float(np.abs(coords).max()))
    gx = np.array([target.x_min, target.x_max])
    gy = np.array([target.y_min, target.y_max])
    return np.array([np.abs((gx if i % 2 == 0 else gy) - c).min() < tol for i, c in enumerate(coords)])


def _snap(coords: np.ndarray, trial: np.ndarray, target: Box) -> np.ndarray:
    """Stop any corner that would cross a same-axis ground-truth edge on that edge."""
    out = trial.copy()
    edges = ((target.x_min, target.x_max), (target.y_min, target.y_max))
    for i in range(4):
        for e in edges[i % 2]:
            if (coords[i] - e) * (out[i] - e) < 0:
                out[i] = e
    return out


def fit_box(
    loss_kind: str,
    init: Box,
    target: Box,
    *,
    lr: float | None = None,
    max_steps: int = 2000,
    stop_iou: float = 0.99,
    min_size: float = 1e-3,
) -> BoxFit:
    """Gradient descent on the predicted corners until ``iou >= stop_iou``.

    Steps follow the gradient scaled so that the corner moving furthest moves
    by the current step length. A step is halved until the loss decreases
    (backtracking), and the next step starts at twice the accepted length (but
    never below the initial step), so
    the descent neither oscillates nor stalls when gradients shrink as the
    box grows. The loss has kinks where a corner meets a same-axis
    ground-truth edge: a step that would carry a corner across such an edge
    stops it on the edge, and when the full step fails, corners on an edge
    whose own gradient move does not help are held fixed. A zero gradient leaves the box
    where it is. The default initial step is a tenth of the target's
    geometric size and steps never grow past that size, which keeps the
    descent scale invariant.
    """
    if lr is None:
        lr = 0.1 * math.sqrt(area(target))
    if not lr > 0:
        raise ValueError("lr must be positive")
    max_step = max(lr, math.sqrt(area(target)))
    loss_fn = BOX_LOSSES[loss_kind]
    coords = np.array(init.as_tuple(), dtype=float)
    box = init
    current = loss_fn(box, target)
    step = lr
    steps = 0
    for steps in range(max_steps + 1):
        overlap = iou(box, target)
        if overlap >= stop_iou:
            return BoxFit(box, steps, overlap, True)
        if steps == max_steps:
            break
        kink = _on_kink(coords, target)
        if kink.any():
            # a kink corner may still move if a small move along its own gradient helps
            probe = _PROBE_RTOL * max(1.0, float(np.abs(coords).max()))
            for i in np.flatnonzero(kink):
                g_i = current.gradient[i]
                if g_i != 0.0:
                    trial = coords.copy()
                    trial[i] -= probe * math.copysign(1.0, g_i)
                    if trial[2] > trial[0] and trial[3] > trial[1]:
                        kink[i] = not loss_fn(Box(*trial.tolist()), target).value < current.value
        held = np.where(kink, 0.0, current.gradient)
        directions = (current.gradient, held) if kink.any() else (current.gradient,)
        floor = _MIN_MOVE_RTOL * max(1.0, float(np.abs(coords).max()))
        moved = False
        for g in directions:
            g_max = float(np.abs(g).max())
            if g_max == 0.0:
                continue
            direction = g / g_max
            step_size = step
            while step_size > floor:
                trial = _snap(coords, coords - step_size * direction, target)
                # keep the box non-degenerate so aspect terms stay defined
                trial[2] = max(trial[2], trial[0] + min_size)
                trial[3] = max(trial[3], trial[1] + min_size)
                trial_box = Box(*trial.tolist())
                trial_eval = loss_fn(trial_box, target)
                if trial_eval.value < current.value:
                    coords, box, current = trial, trial_box, trial_eval
                    step = min(max(2.0 * step_size, lr), max_step)
                    moved = True
                    break
                step_size *= 0.5
            if moved:
                break
        if not moved:
            break
    overlap = iou(box, target)
    return BoxFit(box, steps, overlap, overlap >= stop_iou)


def random_box_pair(rng: np.random.Generator, extent: float = 10.0, size: tuple[float, float] = (0.5, 5.0)) -> tuple[np.ndarray, np.ndarray]:
    """Two positive-area boxes with centres in ``[0, extent]^2`` and sides drawn from ``size``."""
    boxes = []
    for _ in range(2):
        cx, cy = rng.uniform(0.0, extent, 2)
        w, h = rng.uniform(*size, 2)
        boxes.append(np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2]))
    return boxes[0], boxes[1]


@dataclass(frozen=True)
class GradCheck:
    loss_kind: str
    checked: int
    skipped: int
    worst: float
    failures: tuple[tuple[np.ndarray, np.ndarray, float], ...]

    @property
    def ok(self) -> bool:
        return not self.failures


def gradient_check(
    loss_kind: str,
    trials: int,
    seed: int = 0,
    epsilon: float = 1e-6,
    tolerance: float = 1e-4,
    margin: float = 1e-3,
    analytic: Callable[..., np.ndarray] = analytic_gradient,
    v_form: str = "squared",
) -> GradCheck:
    """Compare ``analytic`` with central differences on ``trials`` seeded box pairs.

    Pairs with an edge within ``margin`` of a same-axis ground-truth edge are
    skipped (counted in ``skipped``), since the losses have kinks there.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    rng = np.random.default_rng([seed, LOSS_KINDS.index(loss_kind)])
    checked = skipped = 0
    worst = 0.0
    failures = []
    for _ in range(trials):
        pred, gt = random_box_pair(rng)
        if near_kink(pred, gt, margin):
            skipped += 1
            continue
        err = gradient_relative_error(
            analytic(loss_kind, pred, gt, v_form=v_form),
            finite_difference_gradient(loss_kind, pred, gt, epsilon, v_form=v_form),
        )
        checked += 1
        worst = max(worst, err)
        if not err <= tolerance:
            failures.append((pred, gt, err))
    return GradCheck(loss_kind, checked, skipped, worst, tuple(failures))
