"""Input-level non-local attention block with analytic gradients.

Forward pass for an input ``I`` of shape ``(H, W, C)``::

    X  = avgpool(I, d)                   (N = H/d * W/d positions)
    M  = (X Wt)(X Wp)^T                  N x N affinities
    S  = softmax(M)                      jointly over all N^2 entries ("global")
                                         or per row ("per_row")
    Y  = S (X Wg) Wf                     attended features at pooled resolution
    A  = bilinear_upsample(Y)            attended input, (H, W, C)
    I' = I + A

Everything runs in float64; the block is here to be checked, not to be fast.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import InvalidArgumentError, NumericError
from .resample import resize_bilinear, resize_bilinear_adjoint

SoftmaxMode = Literal["global", "per_row"]
# attention maps use corner-aligned interpolation so linear fields survive down/up resizing
ALIGN_CORNERS = True


@dataclass
class NonLocalParams:
    w_theta: np.ndarray  # (C, E)
    w_phi: np.ndarray  # (C, E)
    w_g: np.ndarray  # (C, E)
    w_f: np.ndarray  # (E, C)
    softmax_mode: SoftmaxMode = "global"

    def __post_init__(self):
        self.w_theta = np.asarray(self.w_theta, dtype=np.float64)
        self.w_phi = np.asarray(self.w_phi, dtype=np.float64)
        self.w_g = np.asarray(self.w_g, dtype=np.float64)
        self.w_f = np.asarray(self.w_f, dtype=np.float64)
        c, e = self.w_theta.shape
        if self.w_phi.shape != (c, e) or self.w_g.shape != (c, e):
            raise InvalidArgumentError("theta, phi and g kernels must share shape (C, E)")
        if self.w_f.shape != (e, c):
            raise InvalidArgumentError("f kernel must map the embedding back to the input channels")
        if self.softmax_mode not in ("global", "per_row"):
            raise InvalidArgumentError(f"unknown softmax mode {self.softmax_mode!r}")

    @property
    def in_channels(self) -> int:
        return self.w_theta.shape[0]

    @classmethod
    def random(cls, channels: int = 2, embed: int | None = None, scale: float = 0.5,
               rng: np.random.Generator | None = None, softmax_mode: SoftmaxMode = "global") -> "NonLocalParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        e = channels if embed is None else embed
        return cls(
            rng.normal(0, scale, (channels, e)), rng.normal(0, scale, (channels, e)),
            rng.normal(0, scale, (channels, e)), rng.normal(0, scale, (e, channels)),
            softmax_mode,
        )

    @classmethod
    def zeros(cls, channels: int = 2, embed: int | None = None, softmax_mode: SoftmaxMode = "global") -> "NonLocalParams":
        e = channels if embed is None else embed
        z = np.zeros((channels, e))
        return cls(z, z.copy(), z.copy(), np.zeros((e, channels)), softmax_mode)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"w_theta": self.w_theta, "w_phi": self.w_phi, "w_g": self.w_g, "w_f": self.w_f}


def softmax_affinity(m: np.ndarray, mode: SoftmaxMode = "global") -> np.ndarray:
    """Stabilized softmax of an affinity matrix, jointly (``global``) or row-wise."""
    if mode == "global":
        e = np.exp(m - m.max())
        return e / e.sum()
    if mode == "per_row":
        e = np.exp(m - m.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)
    raise InvalidArgumentError(f"unknown softmax mode {mode!r}")


def _softmax_backward(s: np.ndarray, ds: np.ndarray, mode: SoftmaxMode) -> np.ndarray:
    prod = s * ds
    if mode == "global":
        return prod - s * prod.sum()
    return prod - s * prod.sum(axis=1, keepdims=True)


def avg_pool(x: np.ndarray, d: int) -> np.ndarray:
    h, w, c = x.shape
    return x.reshape(h // d, d, w // d, d, c).mean(axis=(1, 3))


def avg_pool_adjoint(g: np.ndarray, d: int) -> np.ndarray:
    return np.repeat(np.repeat(g, d, axis=0), d, axis=1) / (d * d)


def _check_input(i: np.ndarray, p: NonLocalParams, down_factor: int) -> np.ndarray:
    x = np.asarray(i, dtype=np.float64)
    if x.ndim != 3:
        raise InvalidArgumentError("input must be (H, W, C)")
    h, w, c = x.shape
    if c != p.in_channels:
        raise InvalidArgumentError(f"input has {c} channels, parameters expect {p.in_channels}")
    if down_factor < 1 or h % down_factor or w % down_factor:
        raise InvalidArgumentError(f"down_factor {down_factor} must divide {h}x{w}")
    if not np.all(np.isfinite(x)):
        raise NumericError("input contains non-finite values")
    return x


def _forward(x: np.ndarray, p: NonLocalParams, d: int) -> dict:
    h, w, c = x.shape
    pooled = avg_pool(x, d)
    hp, wp = pooled.shape[:2]
    xf = pooled.reshape(hp * wp, c)
    theta, phi, g = xf @ p.w_theta, xf @ p.w_phi, xf @ p.w_g
    m = theta @ phi.T
    s = softmax_affinity(m, p.softmax_mode)
    o = s @ g
    y = (o @ p.w_f).reshape(hp, wp, c)
    a = resize_bilinear(y, h, w, ALIGN_CORNERS)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(a))):
        raise NumericError("non-finite values inside the attention block")
    return {"xf": xf, "theta": theta, "phi": phi, "g": g, "s": s, "o": o, "a": a, "pooled_shape": (hp, wp)}


def nl_forward(i: np.ndarray, p: NonLocalParams, down_factor: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(I_prime, A)``, both shaped like the input."""
    x = _check_input(i, p, down_factor)
    cache = _forward(x, p, down_factor)
    return x + cache["a"], cache["a"]


def attention_map(i: np.ndarray, p: NonLocalParams, down_factor: int = 4) -> np.ndarray:
    """The normalized ``N x N`` attention matrix for inspection."""
    x = _check_input(i, p, down_factor)
    return _forward(x, p, down_factor)["s"]


def nl_backward(i: np.ndarray, p: NonLocalParams, grad_out: np.ndarray, down_factor: int = 4):
    """Gradients of ``sum(grad_out * I_prime)`` w.r.t. the input and all kernels.

    Returns ``(grad_input, {"w_theta": ..., "w_phi": ..., "w_g": ..., "w_f": ...})``.
    """
    x = _check_input(i, p, down_factor)
    go = np.asarray(grad_out, dtype=np.float64)
    if go.shape != x.shape:
        raise InvalidArgumentError(f"upstream gradient shape {go.shape} != input shape {x.shape}")
    h, w, c = x.shape
    cache = _forward(x, p, down_factor)
    hp, wp = cache["pooled_shape"]
    xf, theta, phi, g, s, o = (cache[k] for k in ("xf", "theta", "phi", "g", "s", "o"))

    dy = resize_bilinear_adjoint(go, hp, wp, ALIGN_CORNERS).reshape(hp * wp, c)
    dw_f = o.T @ dy
    do = dy @ p.w_f.T
    ds = do @ g.T
    dg = s.T @ do
    dm = _softmax_backward(s, ds, p.softmax_mode)
    dtheta = dm @ phi
    dphi = dm.T @ theta
    grads = {
        "w_theta": xf.T @ dtheta,
        "w_phi": xf.T @ dphi,
        "w_g": xf.T @ dg,
        "w_f": dw_f,
    }
    dxf = dtheta @ p.w_theta.T + dphi @ p.w_phi.T + dg @ p.w_g.T
    grad_in = go + avg_pool_adjoint(dxf.reshape(hp, wp, c), down_factor)
    return grad_in, grads


def resize_attended(a: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resize of the attended input to a feature-pyramid level."""
    if target_h < 1 or target_w < 1:
        raise InvalidArgumentError("target size must be >= 1")
    arr = np.asarray(a, dtype=np.float64)
    if arr.shape[:2] == (target_h, target_w):
        return arr.copy()
    return resize_bilinear(arr, target_h, target_w, ALIGN_CORNERS)


def pyramid_inputs(a: np.ndarray, sizes=(64, 32, 16, 8)) -> list[np.ndarray]:
    return [resize_attended(a, s, s) for s in sizes]


# --- verification helpers, shared by the tests and the `nonlocal-check` command ---

def finite_difference_check(i: np.ndarray, p: NonLocalParams, down_factor: int, rng: np.random.Generator,
                            step: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    The scalar objective is ``sum(R * I_prime)`` for a random ``R``; every
    input entry and every kernel entry is perturbed.
    """
    r = rng.normal(size=i.shape)

    def loss(inp, params):
        out, _ = nl_forward(inp, params, down_factor)
        return float(np.sum(r * out))

    g_in, g_par = nl_backward(i, p, r, down_factor)
    worst = 0.0

    def rel(a_val, n_val):
        return abs(a_val - n_val) / max(abs(a_val), abs(n_val), 1e-7)

    x = np.array(i, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        lp = loss(x, p)
        x[idx] = orig - step
        lm = loss(x, p)
        x[idx] = orig
        worst = max(worst, rel(g_in[idx], (lp - lm) / (2 * step)))
    for name, kernel in p.as_dict().items():
        for idx in np.ndindex(kernel.shape):
            orig = kernel[idx]
            kernel[idx] = orig + step
            lp = loss(i, p)
            kernel[idx] = orig - step
            lm = loss(i, p)
            kernel[idx] = orig
            worst = max(worst, rel(g_par[name][idx], (lp - lm) / (2 * step)))
    return worst
