"""Effective receptive fields, Gaussian fits, and matched-filter checks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .net import SConv
from .nn import Conv2d, Module
from .optics import PsfKernel
from .tensor import Tensor, activation as apply_activation, add, backward, reduce_sum


@dataclass
class ErfMap:
    values: np.ndarray
    source: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or (v < 0).any():
            raise ValueError("ERF map must be a nonnegative 2-D array")
        total = v.sum()
        if total <= 0:
            raise ValueError("ERF map has no mass")
        self.values = v / total


def _center_selector(out_shape, center):
    n, c, h, w = out_shape
    cy, cx = center
    if not (0 <= cy < h and 0 <= cx < w):
        raise ValueError(f"center {center} outside the {h}x{w} output grid")
    sel = np.zeros((1, 1, h, w))
    sel[0, 0, cy, cx] = 1.0
    return sel


def input_gradient(netstack, images, center=None):
    """d(sum over batch and channels of output[center]) / d input, per image."""
    x = Tensor(np.asarray(images), requires_grad=True)
    out = netstack(x)
    if center is None:
        center = (out.shape[2] // 2, out.shape[3] // 2)
    sel = Tensor(_center_selector(out.shape, center).astype(out.dtype))
    backward(reduce_sum(out * sel))
    return np.zeros_like(x.data) if x.grad is None else x.grad


def probe_batch(seed, shape=(16, 1, 65, 65), dtype=np.float64):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


def measure_erf(netstack, probes, center=None, source=""):
    """Mean |input gradient| of the center output over probes and channels, sum-normalized."""
    grad = input_gradient(netstack, probes, center)
    return ErfMap(np.abs(grad).astype(np.float64).mean(axis=(0, 1)), source)


# ------------------------------------------------------------------ Gaussian fit


@dataclass
class GaussianFit:
    center: tuple  # (mu_x, mu_y)
    covariance: np.ndarray  # [[var_x, cov_xy], [cov_xy, var_y]]
    r2: float

    @property
    def sigma_x(self):
        return math.sqrt(self.covariance[0, 0])

    @property
    def sigma_y(self):
        return math.sqrt(self.covariance[1, 1])

    @property
    def rho(self):
        d = self.sigma_x * self.sigma_y
        return self.covariance[0, 1] / d if d > 0 else 0.0

    @property
    def size(self):
        return 2 * math.sqrt(max(np.linalg.eigvalsh(self.covariance).mean(), 0.0))


def gaussian_grid(shape, center, cov):
    """Sum-normalized 2-D Gaussian with (mu_x, mu_y) = center on a pixel grid."""
    yy, xx = np.mgrid[:shape[0], :shape[1]].astype(np.float64)
    d = np.stack([xx - center[0], yy - center[1]], axis=-1)
    inv = np.linalg.inv(cov)
    g = np.exp(-0.5 * np.einsum("...i,ij,...j->...", d, inv, d))
    return g / g.sum()


def fit_gaussian(erf):
    """Moment-matched Gaussian and its coefficient of determination on the grid."""
    m = erf.values if isinstance(erf, ErfMap) else ErfMap(erf).values
    yy, xx = np.mgrid[:m.shape[0], :m.shape[1]].astype(np.float64)
    mx, my = (m * xx).sum(), (m * yy).sum()
    dx, dy = xx - mx, yy - my
    cov = np.array([[(m * dx * dx).sum(), (m * dx * dy).sum()],
                    [(m * dx * dy).sum(), (m * dy * dy).sum()]])
    if np.count_nonzero(m) == 1 or np.linalg.det(cov) <= 1e-12 * max(np.trace(cov), 1e-300) ** 2:
        # point mass (or a line): no proper Gaussian, report zero spread
        if np.count_nonzero(m) == 1:
            return GaussianFit((mx, my), np.zeros((2, 2)), 1.0)
        cov_eval = cov + 1e-6 * np.eye(2)
    else:
        cov_eval = cov
    g = gaussian_grid(m.shape, (mx, my), cov_eval)
    ss_tot = ((m - m.mean()) ** 2).sum()
    ss_res = ((m - g) ** 2).sum()
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else -math.inf)
    return GaussianFit((mx, my), cov, float(r2))


# ------------------------------------------------------------------ alignment


def _values(x):
    if isinstance(x, (ErfMap, PsfKernel)):
        return np.asarray(x.values, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def pad_to(kernel, shape):
    """Zero-pad ``kernel`` so it is co-centered on a grid of ``shape``."""
    k = _values(kernel)
    h, w = shape
    kh, kw = k.shape
    if kh > h or kw > w or (h - kh) % 2 or (w - kw) % 2:
        raise ValueError(f"cannot co-center a {kh}x{kw} kernel on a {h}x{w} grid")
    ph, pw = (h - kh) // 2, (w - kw) // 2
    return np.pad(k, ((ph, ph), (pw, pw)))


def align_score(gradmap, hstar):
    g = _values(gradmap)
    h = pad_to(hstar, g.shape)
    ng, nh = np.linalg.norm(g), np.linalg.norm(h)
    if ng == 0:
        raise ValueError("gradient map has zero norm (degenerate sensitivity)")
    if nh == 0:
        raise ValueError("template has zero norm")
    return float((g * h).sum() / (ng * nh))


def erf_loss(erf, hstar):
    """Squared L2 distance on a common co-centered grid; inputs are expected sum-normalized."""
    a, b = _values(erf), _values(hstar)
    shape = (max(a.shape[0], b.shape[0]), max(a.shape[1], b.shape[1]))
    return float(((pad_to(a, shape) - pad_to(b, shape)) ** 2).sum())


def grad_variation(netstack, image, delta, center=None):
    """||d f(I + dI)/dI - d f(I)/dI||_2 for the center output."""
    image, delta = np.asarray(image), np.asarray(delta)
    if image.shape != delta.shape:
        raise ValueError(f"image {image.shape} and perturbation {delta.shape} differ")
    g0 = input_gradient(netstack, image, center)
    g1 = input_gradient(netstack, image + delta, center)
    return float(np.linalg.norm((g1 - g0).ravel()))


# ------------------------------------------------------------------ matched filtering


def unit_energy(h):
    h = _values(h)
    n = np.linalg.norm(h)
    if n == 0:
        raise ValueError("filter has zero energy")
    return h / n


@dataclass
class FilterBank:
    filters: list  # [(name, 2-D array)], each with L2 norm 1

    def __post_init__(self):
        for name, f in self.filters:
            if abs(np.linalg.norm(f) - 1.0) > 1e-9:
                raise ValueError(f"filter {name!r} is not unit-energy")

    @classmethod
    def from_arrays(cls, arrays, names=None):
        names = names or [f"h{i}" for i in range(len(arrays))]
        return cls([(n, unit_energy(a)) for n, a in zip(names, arrays)])

    def __len__(self):
        return len(self.filters)


def matched_response(psf, h, amplitude=1.0):
    p, f = _values(psf), _values(h)
    if p.shape != f.shape:
        raise ValueError(f"psf {p.shape} and filter {f.shape} grids differ")
    return float(amplitude * (p * f).sum())


@dataclass
class CauchySchwarz:
    R: float
    bound: float
    gap: float


def cauchy_schwarz_gap(psf, h, amplitude=1.0):
    r = matched_response(psf, h, amplitude)
    bound = float(amplitude * np.linalg.norm(_values(psf)) * np.linalg.norm(_values(h)))
    return CauchySchwarz(r, bound, bound - r)


def best_filter(psf, bank, amplitude=1.0):
    """Index of the bank filter with the largest response; lowest index wins ties."""
    if not len(bank):
        raise ValueError("filter bank is empty")
    responses = [matched_response(psf, f, amplitude) for _, f in bank.filters]
    return int(np.argmax(responses))


# ------------------------------------------------------------------ scaling


def erf_rescale(erf, s):
    """Nearest resampling ERF_s(i, j) = ERF(i/s, j/s) about the grid center, renormalized."""
    if not s > 0:
        raise ValueError(f"scale must be positive, got {s}")
    up = s >= 1
    k = s if up else 1 / s
    if abs(k - round(k)) > 1e-9:
        raise ValueError(f"scale {s} is not grid-compatible (need s or 1/s integer)")
    m = erf.values if isinstance(erf, ErfMap) else ErfMap(erf).values
    if s == 1:
        return ErfMap(m.copy(), getattr(erf, "source", ""))
    h, w = m.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    sy = np.floor(cy + (np.arange(h) - cy) / s + 0.5).astype(int)
    sx = np.floor(cx + (np.arange(w) - cx) / s + 0.5).astype(int)
    oky, okx = (sy >= 0) & (sy < h), (sx >= 0) & (sx < w)
    out = np.zeros_like(m)
    out[np.ix_(oky, okx)] = m[np.ix_(sy[oky], sx[okx])]
    return ErfMap(out, getattr(erf, "source", ""))


# ------------------------------------------------------------------ kernel variants

VARIANTS = ("square31", "strips7", "smallstack", "sconvstack", "plainstack")


class NetStack(Module):
    """Sequential stack of layers; ``residual`` adds a skip around each layer."""

    def __init__(self, layers, residual=False, activation=None, name=""):
        self.layers, self.residual, self.activation, self.name = layers, residual, activation, name

    def forward(self, x):
        for layer in self.layers:
            y = layer(x)
            if self.activation is not None:
                y = apply_activation(y, self.activation)
            x = add(x, y) if self.residual else y
        return x


def kernel_variant(name, channels=4, depth=4, seed=0, activation=None):
    """Frozen random stacks standing in for the large-kernel designs under comparison."""
    rng = np.random.default_rng(seed)
    c = channels

    def dw(k):
        return Conv2d(c, c, k, rng, groups=c, bias=False, trainable=False)

    if name == "square31":
        layers = [dw(31)]
    elif name == "strips7":
        layers = [dw((1, 7)), dw((7, 1))]
    elif name == "smallstack":
        layers = [Conv2d(c, c, 3, rng, bias=False, trainable=False) for _ in range(depth)]
    elif name == "plainstack":
        layers = [Conv2d(c, c, 3, rng, bias=False, trainable=False) for _ in range(depth)]
    elif name == "sconvstack":
        layers = [SConv(c, rng, trainable=False) for _ in range(depth)]
    else:
        raise ValueError(f"unknown kernel variant {name!r}; expected one of {VARIANTS}")
    stack = NetStack(layers, residual=name == "smallstack", activation=activation, name=name)
    return stack.astype(np.float64)


# ------------------------------------------------------------------ output


def write_pgm(path, values):
    """8-bit binary PGM, min-max scaled."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    img = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
