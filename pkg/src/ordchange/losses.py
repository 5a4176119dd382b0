"""Training losses over class distributions and their analytic logit gradients.

Three building blocks and one composition:

  cross_entropy   -sum_i y_i log(max(p_i, eps))
  focal_loss      -alpha * sum_i y_i (1 - p_i)^gamma log(max(p_i, eps))
  emd_loss        sqrt( (1/C) * sum_i (CDF_y(i) - CDF_p(i))^2 )
  combined_loss   focal_weight * focal + emd_weight * emd

The EMD term compares cumulative distributions, so it is only meaningful when
class indices are ordinal; configuration for the 4-class pair task therefore
rejects it (see ``validate_loss_for_task``).

Public forward functions take single probability vectors. The ``*_rows``
helpers used by the training loop evaluate whole batches with the same
formulas; ``loss_gradient`` and ``batch_loss_gradient`` are thin wrappers
around one shared gradient path, chained through softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Task, as_logits, as_prob_vector, softmax
from .errors import ConfigError, InvalidInputError

LOSS_KINDS: tuple[str, ...] = ("ce", "focal", "emd", "combined")

# Relative-error floor for gradient checking; below this magnitude the
# denominator saturates instead of amplifying finite-difference noise.
_REL_FLOOR = 1e-8


@dataclass(frozen=True)
class LossConfig:
    """Hyperparameters for the focal and combined objectives.

    gamma = 0 with alpha = 1 makes the focal term collapse to cross-entropy.
    epsilon clamps the log argument and must stay in (0, 1e-3].
    """

    alpha: float = 1.0
    gamma: float = 2.0
    focal_weight: float = 1.0
    emd_weight: float = 1.0
    epsilon: float = 1e-12

    def __post_init__(self) -> None:
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ConfigError(f"alpha must be finite and >= 0, got {self.alpha}")
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ConfigError(f"gamma must be finite and >= 0, got {self.gamma}")
        for name in ("focal_weight", "emd_weight"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        if not (0.0 < self.epsilon <= 1e-3):
            raise ConfigError(f"epsilon must lie in (0, 1e-3], got {self.epsilon}")


@dataclass(frozen=True)
class LossResult:
    """A loss value with its gradient with respect to the logits."""

    value: float
    grad_logits: np.ndarray


def validate_loss_for_task(loss_kind: str, task: Task) -> None:
    """Reject loss kinds that are undefined for a task's label set.

    The 4-class pair task includes a class without an ordinal rank, so any
    objective with an EMD term is a configuration error there.
    """
    if loss_kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss kind {loss_kind!r}, expected one of {LOSS_KINDS}")
    if task is Task.T1 and loss_kind in ("emd", "combined"):
        raise ConfigError(
            f"loss {loss_kind!r} needs ordinal classes and is not valid for task t1"
        )


def _check_pair(p_hat: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = as_prob_vector(p_hat)
    t = as_prob_vector(y)
    if p.shape != t.shape:
        raise InvalidInputError(f"prediction and target lengths differ: {p.shape[0]} vs {t.shape[0]}")
    return p, t


def cross_entropy(p_hat: np.ndarray, y: np.ndarray, eps: float = 1e-12) -> float:
    """Cross-entropy of a predicted distribution against a target distribution."""
    if not (0.0 < eps <= 1e-3):
        raise InvalidInputError(f"eps must lie in (0, 1e-3], got {eps}")
    p, t = _check_pair(p_hat, y)
    return float(-np.sum(t * np.log(np.maximum(p, eps))))


def focal_loss(p_hat: np.ndarray, y: np.ndarray, cfg: LossConfig | None = None) -> float:
    """Focal loss: cross-entropy with easy samples down-weighted by (1-p)^gamma."""
    cfg = cfg or LossConfig()
    p, t = _check_pair(p_hat, y)
    return float(_focal_rows(p[None, :], t[None, :], cfg)[0])


def emd_loss(p_hat: np.ndarray, y: np.ndarray) -> float:
    """Squared earth mover's distance between class distributions, square-rooted.

    Symmetric in its arguments and zero exactly when the cumulative
    distributions coincide. Values stay within [0, 1].
    """
    p, t = _check_pair(p_hat, y)
    return float(_emd_rows(p[None, :], t[None, :])[0])


def combined_loss(p_hat: np.ndarray, y: np.ndarray, cfg: LossConfig | None = None) -> float:
    """Weighted sum of the focal and EMD terms (default weights 1:1)."""
    cfg = cfg or LossConfig()
    p, t = _check_pair(p_hat, y)
    return float(
        cfg.focal_weight * _focal_rows(p[None, :], t[None, :], cfg)[0]
        + cfg.emd_weight * _emd_rows(p[None, :], t[None, :])[0]
    )


# --- row-vectorized internals -------------------------------------------------
# P and Y are (N, C) with each row a probability vector. These carry the only
# copies of the formulas; the scalar API and the training loop both call them.


def _ce_rows(P: np.ndarray, Y: np.ndarray, eps: float) -> np.ndarray:
    return -np.sum(Y * np.log(np.maximum(P, eps)), axis=1)


def _focal_rows(P: np.ndarray, Y: np.ndarray, cfg: LossConfig) -> np.ndarray:
    log_pc = np.log(np.maximum(P, cfg.epsilon))
    return -cfg.alpha * np.sum(Y * (1.0 - P) ** cfg.gamma * log_pc, axis=1)


def _emd_rows(P: np.ndarray, Y: np.ndarray) -> np.ndarray:
    diff = np.cumsum(Y, axis=1) - np.cumsum(P, axis=1)
    return np.sqrt(np.mean(diff * diff, axis=1))


def _loss_rows(kind: str, P: np.ndarray, Y: np.ndarray, cfg: LossConfig) -> np.ndarray:
    if kind == "ce":
        return _ce_rows(P, Y, cfg.epsilon)
    if kind == "focal":
        return _focal_rows(P, Y, cfg)
    if kind == "emd":
        return _emd_rows(P, Y)
    if kind == "combined":
        return cfg.focal_weight * _focal_rows(P, Y, cfg) + cfg.emd_weight * _emd_rows(P, Y)
    raise ConfigError(f"unknown loss kind {kind!r}, expected one of {LOSS_KINDS}")


def _ce_grad_p(P: np.ndarray, Y: np.ndarray, eps: float) -> np.ndarray:
    # d/dp of -y log(max(p, eps)): the clamp region contributes zero slope.
    return np.where(P > eps, -Y / np.maximum(P, eps), 0.0)


def _focal_grad_p(P: np.ndarray, Y: np.ndarray, cfg: LossConfig) -> np.ndarray:
    log_pc = np.log(np.maximum(P, cfg.epsilon))
    one_minus = 1.0 - P
    d_log = np.where(P > cfg.epsilon, one_minus**cfg.gamma / np.maximum(P, cfg.epsilon), 0.0)
    if cfg.gamma > 0:
        # Guarded so gamma < 1 does not produce 0^(negative) at p == 1; the
        # true limit of the product there is 0. The base is substituted before
        # the power because where() evaluates both branches.
        safe_base = np.where(one_minus > 0, one_minus, 1.0)
        d_pow = np.where(
            one_minus > 0, cfg.gamma * safe_base ** (cfg.gamma - 1.0) * log_pc, 0.0
        )
    else:
        d_pow = np.zeros_like(P)
    return -cfg.alpha * Y * (d_log - d_pow)


def _emd_grad_p(P: np.ndarray, Y: np.ndarray) -> np.ndarray:
    n_classes = P.shape[1]
    diff = np.cumsum(Y, axis=1) - np.cumsum(P, axis=1)
    value = np.sqrt(np.mean(diff * diff, axis=1))
    # dL/dCDF_p(i) = -diff_i / (C * L); dCDF_p(i)/dp_k = 1 for i >= k, so the
    # per-probability gradient is the suffix sum. Defined as zero at L == 0.
    suffix = np.cumsum(diff[:, ::-1], axis=1)[:, ::-1]
    safe = np.where(value > 0, value, 1.0)
    grad = -suffix / (n_classes * safe[:, None])
    return np.where(value[:, None] > 0, grad, 0.0)


def _grad_p_rows(kind: str, P: np.ndarray, Y: np.ndarray, cfg: LossConfig) -> np.ndarray:
    if kind == "ce":
        return _ce_grad_p(P, Y, cfg.epsilon)
    if kind == "focal":
        return _focal_grad_p(P, Y, cfg)
    if kind == "emd":
        return _emd_grad_p(P, Y)
    if kind == "combined":
        return cfg.focal_weight * _focal_grad_p(P, Y, cfg) + cfg.emd_weight * _emd_grad_p(P, Y)
    raise ConfigError(f"unknown loss kind {kind!r}, expected one of {LOSS_KINDS}")


def _chain_softmax(P: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    # Softmax Jacobian applied rowwise: dL/dz = p * (g - <g, p>). Entries of
    # each output row sum to zero by construction.
    inner = np.sum(grad_p * P, axis=1, keepdims=True)
    return P * (grad_p - inner)


def loss_gradient(loss_kind: str, z: np.ndarray, y: np.ndarray, cfg: LossConfig | None = None) -> LossResult:
    """Evaluate a loss at softmax(z) and its analytic gradient in logit space.

    Args:
        loss_kind: one of "ce", "focal", "emd", "combined".
        z: logit vector.
        y: target probability vector (usually one-hot), same length.
        cfg: loss hyperparameters; defaults apply when omitted.

    Returns:
        LossResult with the scalar value and d(value)/d(z).
    """
    cfg = cfg or LossConfig()
    if loss_kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss kind {loss_kind!r}, expected one of {LOSS_KINDS}")
    zv = as_logits(z)
    t = as_prob_vector(y)
    if zv.shape != t.shape:
        raise InvalidInputError(f"logit and target lengths differ: {zv.shape[0]} vs {t.shape[0]}")
    P = softmax(zv)[None, :]
    Y = t[None, :]
    value = float(_loss_rows(loss_kind, P, Y, cfg)[0])
    grad = _chain_softmax(P, _grad_p_rows(loss_kind, P, Y, cfg))[0]
    return LossResult(value=value, grad_logits=grad)


def batch_loss_gradient(
    loss_kind: str, logits: np.ndarray, targets: np.ndarray, cfg: LossConfig | None = None
) -> tuple[float, np.ndarray]:
    """Mean loss over rows and its gradient with respect to every logit row.

    Same math as ``loss_gradient`` applied to an (N, C) batch; the returned
    gradient already carries the 1/N factor of the mean.
    """
    cfg = cfg or LossConfig()
    Z = np.asarray(logits, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if Z.ndim != 2 or Z.shape != Y.shape:
        raise InvalidInputError(f"expected matching (N, C) arrays, got {Z.shape} and {Y.shape}")
    P = softmax(Z)
    values = _loss_rows(loss_kind, P, Y, cfg)
    grad = _chain_softmax(P, _grad_p_rows(loss_kind, P, Y, cfg)) / Z.shape[0]
    return float(np.mean(values)), grad


def finite_difference_check(
    loss_kind: str,
    z: np.ndarray,
    y: np.ndarray,
    cfg: LossConfig | None = None,
    h: float = 1e-5,
) -> float:
    """Compare the analytic logit gradient against central differences.

    Args:
        h: step size, restricted to [1e-7, 1e-3].

    Returns:
        Max over coordinates of |numeric - analytic| / max(|analytic|, 1e-8).
    """
    if not (1e-7 <= h <= 1e-3):
        raise InvalidInputError(f"step size h must lie in [1e-7, 1e-3], got {h}")
    cfg = cfg or LossConfig()
    result = loss_gradient(loss_kind, z, y, cfg)
    zv = as_logits(z)
    t = as_prob_vector(y)
    worst = 0.0
    for i in range(zv.shape[0]):
        bump = np.zeros_like(zv)
        bump[i] = h
        up = float(_loss_rows(loss_kind, softmax(zv + bump)[None, :], t[None, :], cfg)[0])
        down = float(_loss_rows(loss_kind, softmax(zv - bump)[None, :], t[None, :], cfg)[0])
        numeric = (up - down) / (2.0 * h)
        analytic = result.grad_logits[i]
        rel = abs(numeric - analytic) / max(abs(analytic), _REL_FLOOR)
        worst = max(worst, rel)
    return worst
