"""Dense float64 numeric core: layer forward/backward pairs, Adam, RNG helpers
and a central-difference gradient checker.

Every layer here works on numpy arrays in float64. Backward functions take the
upstream gradient plus whatever the forward pass cached and return gradients
with respect to their inputs; nothing is recorded on a tape. The three losses
of the model (masked prediction, sequence matching, fine-tuning) are each a
fixed composition of these layers.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

Tensor = np.ndarray

NORM_GUARD = 1e-12


class NumkitError(Exception):
    pass


class ShapeError(NumkitError, ValueError):
    def __init__(self, op: str, a_name: str, a_shape, b_name: str, b_shape):
        self.op = op
        self.operands = ((a_name, tuple(a_shape)), (b_name, tuple(b_shape)))
        super().__init__(
            f"{op}: shape mismatch between {a_name}{tuple(a_shape)} and {b_name}{tuple(b_shape)}"
        )


class NonFiniteError(NumkitError, FloatingPointError):
    def __init__(self, layer: str):
        self.layer = layer
        super().__init__(f"non-finite value produced in layer '{layer}'")


class ConfigError(ValueError):
    """Invalid configuration or contract violation in the caller's setup."""


def check_finite(layer: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NonFiniteError(layer)


def check_same_shape(op: str, a: np.ndarray, b: np.ndarray, a_name="a", b_name="b") -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a_name, a.shape, b_name, b.shape)


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------


def make_rng(seed: int, *stream: int | str) -> np.random.Generator:
    """PCG64 generator for ``seed``, optionally forked into a named substream.

    String stream keys are hashed with CRC32 so the derivation does not depend
    on Python's per-process hash salt.
    """
    keys = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for s in stream:
        keys.append(zlib.crc32(s.encode("utf-8")) if isinstance(s, str) else int(s))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(keys)))


# ---------------------------------------------------------------------------
# Parameters and optimizer
# ---------------------------------------------------------------------------


@dataclass
class ParamGroup:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]
    adam_m: np.ndarray = field(default=None)  # type: ignore[assignment]
    adam_v: np.ndarray = field(default=None)  # type: ignore[assignment]
    step_count: int = 0
    trainable: bool = True

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        for attr in ("grad", "adam_m", "adam_v"):
            arr = getattr(self, attr)
            if arr is None:
                setattr(self, attr, np.zeros_like(self.value))
            else:
                check_same_shape("ParamGroup", self.value, arr, "value", attr)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def adam_step(
    groups: Mapping[str, ParamGroup] | list[ParamGroup],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update on every trainable group; grads are zeroed after."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    items = groups.values() if isinstance(groups, Mapping) else groups
    for g in items:
        if not g.trainable:
            g.zero_grad()
            continue
        check_finite(f"adam:{g.name}", g.grad)
        g.step_count += 1
        t = g.step_count
        g.adam_m *= beta1
        g.adam_m += (1.0 - beta1) * g.grad
        g.adam_v *= beta2
        g.adam_v += (1.0 - beta2) * (g.grad * g.grad)
        m_hat = g.adam_m / (1.0 - beta1**t)
        v_hat = g.adam_v / (1.0 - beta2**t)
        g.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        g.zero_grad()


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    if x.shape[-1] != w.shape[0]:
        raise ShapeError("matmul", "x", x.shape, "w", w.shape)
    return x @ w


def matmul_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (dx, dw) for y = x @ w with x of any leading shape."""
    d_in, d_out = w.shape
    dw = x.reshape(-1, d_in).T @ dy.reshape(-1, d_out)
    dx = dy @ w.T
    return dx, dw


def tanh_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dy * (1.0 - y * y)


def masked_softmax(scores: np.ndarray, mask: np.ndarray | None = None, *, inplace: bool = False) -> np.ndarray:
    """Softmax over the last axis; positions where ``mask`` is False get weight 0.

    Every row must keep at least one unmasked entry. With ``inplace`` the
    input buffer is reused for the output.
    """
    out = scores if inplace else np.array(scores, dtype=np.float64, copy=True)
    if mask is not None:
        out += np.where(mask, 0.0, -np.inf)
    out -= out.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)
    return out


def softmax_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    out = y * dy
    s = out.sum(axis=-1, keepdims=True)
    out -= y * s
    return out


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over rows; returns (loss, probs)."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError("cross_entropy", "logits", logits.shape, "labels", labels.shape)
    z = logits - logits.max(axis=1, keepdims=True)
    # sorted summation: the loss is bitwise invariant to the column order
    logsumexp = np.log(np.sort(np.exp(z), axis=1).sum(axis=1))
    rows = np.arange(logits.shape[0])
    nll = logsumexp - z[rows, labels]
    probs = np.exp(z - logsumexp[:, None])
    loss = float(nll.mean())
    if not math.isfinite(loss):
        raise NonFiniteError("cross_entropy")
    return loss, probs


def cross_entropy_backward(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return d / n


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy on sigmoid(logits); returns (loss, sigmoid)."""
    check_same_shape("bce_with_logits", logits, labels.astype(np.float64), "logits", "labels")
    # softplus(s) - y*s, computed stably
    sp = np.logaddexp(0.0, logits)
    loss = float((sp - labels * logits).mean())
    if not math.isfinite(loss):
        raise NonFiniteError("bce_with_logits")
    sig = np.exp(logits - sp)
    return loss, sig


def bce_backward(sig: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return (sig - labels) / sig.size


def dot(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise dot product over the last axis."""
    if x.shape[-1] != y.shape[-1]:
        raise ShapeError("dot", "x", x.shape, "y", y.shape)
    return (x * y).sum(axis=-1)


def dot_backward(ds: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ds = np.asarray(ds)[..., None]
    return ds * y, ds * x


def cosine(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Cosine similarity over the last axis with each norm guarded by +1e-12."""
    if x.shape[-1] != y.shape[-1]:
        raise ShapeError("cosine", "x", x.shape, "y", y.shape)
    nx = np.sqrt((x * x).sum(axis=-1)) + NORM_GUARD
    ny = np.sqrt((y * y).sum(axis=-1)) + NORM_GUARD
    return (x * y).sum(axis=-1) / (nx * ny)


def cosine_backward(dc: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dc = np.asarray(dc, dtype=np.float64)
    rx = np.sqrt((x * x).sum(axis=-1))
    ry = np.sqrt((y * y).sum(axis=-1))
    nx, ny = rx + NORM_GUARD, ry + NORM_GUARD
    xy = (x * y).sum(axis=-1)
    c = xy / (nx * ny)
    # d nx / dx = x / rx (zero at the origin)
    ux = np.divide(x, rx[..., None], out=np.zeros_like(x), where=rx[..., None] > 0)
    uy = np.divide(y, ry[..., None], out=np.zeros_like(y), where=ry[..., None] > 0)
    dx = (y / (nx * ny)[..., None] - (c / nx)[..., None] * ux) * dc[..., None]
    dy = (x / (nx * ny)[..., None] - (c / ny)[..., None] * uy) * dc[..., None]
    return dx, dy


def cosine_matrix(q: np.ndarray, c: np.ndarray) -> np.ndarray:
    """All-pairs cosine between rows of ``q`` (n, d) and ``c`` (m, d)."""
    qn = q / (np.sqrt((q * q).sum(axis=-1, keepdims=True)) + NORM_GUARD)
    cn = c / (np.sqrt((c * c).sum(axis=-1, keepdims=True)) + NORM_GUARD)
    return qn @ cn.T


def masked_mean(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean over axis -2 of ``x`` (..., L, d) restricted to rows where ``mask`` (..., L)."""
    w = mask.astype(np.float64)
    return (x * w[..., None]).sum(axis=-2) / w.sum(axis=-1, keepdims=True)


def masked_mean_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    w = mask.astype(np.float64)
    w = w / w.sum(axis=-1, keepdims=True)
    return w[..., None] * dy[..., None, :]


def embedding_backward(dy: np.ndarray, ids: np.ndarray, n_rows: int) -> np.ndarray:
    """Scatter-add rows of ``dy`` (..., d) into an (n_rows, d) table at ``ids``."""
    d = dy.shape[-1]
    flat = (ids.reshape(-1, 1) * d + np.arange(d)).reshape(-1)
    return np.bincount(flat, weights=dy.reshape(-1), minlength=n_rows * d).reshape(n_rows, d)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

LossFn = Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]]


def forward_backward(loss_fn: LossFn, groups: Mapping[str, ParamGroup]) -> float:
    """Run ``loss_fn`` on the current values and accumulate its grads into the groups."""
    values = {k: g.value for k, g in groups.items()}
    loss, grads = loss_fn(values)
    for k, gr in grads.items():
        check_finite(f"grad:{k}", gr)
        check_same_shape("forward_backward", groups[k].grad, gr, f"{k}.grad", "computed")
        groups[k].grad += gr
    return loss


def finite_diff_check(
    loss_fn: LossFn,
    values: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
    max_scalars: int = 10_000,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_fn(values) -> (loss, grads)`` must be deterministic. Each scalar is
    perturbed in place by +/- epsilon; the error for one scalar is
    ``|a - cd| / max(|a|, |cd|, 1e-12)``.
    """
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in values.items()}
    total = sum(v.size for v in work.values())
    if total > max_scalars:
        raise ConfigError(f"{total} scalars exceeds the finite-difference budget of {max_scalars}")
    _, analytic = loss_fn(work)
    worst = 0.0
    for name, arr in work.items():
        ga = analytic.get(name)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp, _ = loss_fn(work)
            flat[i] = orig - epsilon
            lm, _ = loss_fn(work)
            flat[i] = orig
            cd = (lp - lm) / (2.0 * epsilon)
            a = 0.0 if ga is None else float(ga.reshape(-1)[i])
            err = abs(a - cd) / max(abs(a), abs(cd), 1e-12)
            worst = max(worst, err)
    return worst
