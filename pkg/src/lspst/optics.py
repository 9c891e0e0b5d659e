"""Point-spread functions and synthetic infrared scenes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor import Tensor

J1_FIRST_ZERO = 3.8317059702075125

_SERIES_LIMIT = 12.0


def _j1_series(x):
    half = x / 2.0
    term = half.copy()
    total = term.copy()
    q = -half * half
    for k in range(1, 60):
        term = term * q / (k * (k + 1))
        total += term
        if np.all(np.abs(term) < 1e-17 * np.maximum(np.abs(total), 1e-300)):
            break
    return total


def _j1_asymptotic(x):
    # Hankel expansion, truncated at the smallest term.
    mu = 4.0
    p = np.ones_like(x)
    q = np.zeros_like(x)
    term = np.ones_like(x)
    prev = np.full_like(x, np.inf)
    live = np.ones(x.shape, dtype=bool)
    for k in range(1, 60):
        term = term * (mu - (2 * k - 1) ** 2) / (k * 8.0 * x)
        mag = np.abs(term)
        live &= mag < prev
        prev = mag
        if not live.any():
            break
        contrib = np.where(live, term, 0.0)
        # odd k feeds Q, even k feeds P, with alternating signs per pair
        if k % 2:
            q += contrib * (-1) ** ((k - 1) // 2)
        else:
            p += contrib * (-1) ** (k // 2)
    chi = x - 0.75 * np.pi
    return np.sqrt(2.0 / (np.pi * x)) * (p * np.cos(chi) - q * np.sin(chi))


def bessel_j1(x):
    """First-kind Bessel function of order one (scalar or array)."""
    arr = np.asarray(x, dtype=np.float64)
    ax = np.abs(arr)
    out = np.empty_like(ax)
    small = ax <= _SERIES_LIMIT
    if small.any():
        out[small] = _j1_series(ax[small])
    if (~small).any():
        out[~small] = _j1_asymptotic(ax[~small])
    out = np.sign(arr) * out
    return float(out) if np.ndim(x) == 0 else out


# ------------------------------------------------------------------ PSF models


@dataclass(frozen=True)
class GaussianPsf:
    sigma: float

    def __post_init__(self):
        _positive(self, "sigma")

    def profile(self, r2):
        return np.exp(-r2 / (2 * self.sigma ** 2))

    def default_size(self):
        return 2 * math.ceil(3 * self.sigma) + 1

    def describe(self):
        return f"gaussian:{self.sigma!r}"


@dataclass(frozen=True)
class AiryPsf:
    D: float
    lam: float
    f: float
    pitch: float

    def __post_init__(self):
        for name in ("D", "lam", "f", "pitch"):
            _positive(self, name)

    def first_zero_px(self):
        return J1_FIRST_ZERO * self.lam * self.f / (np.pi * self.D * self.pitch)

    def profile(self, r2):
        u = np.pi * self.D * np.sqrt(r2) * self.pitch / (self.lam * self.f)
        out = np.ones_like(u)
        nz = u > 0
        out[nz] = (2 * bessel_j1(u[nz]) / u[nz]) ** 2
        return out

    def default_size(self):
        return 2 * math.ceil(2 * self.first_zero_px()) + 1

    def describe(self):
        return f"airy:{self.D!r},{self.lam!r},{self.f!r},{self.pitch!r}"


@dataclass(frozen=True)
class HeatKernelPsf:
    alpha: float
    t: float

    def __post_init__(self):
        _positive(self, "alpha")
        _positive(self, "t")

    @property
    def variance(self):
        return 2 * self.alpha * self.t

    def profile(self, r2):
        s = 4 * self.alpha * self.t
        return np.exp(-r2 / s) / (np.pi * s)

    def default_size(self):
        return 2 * math.ceil(3 * math.sqrt(self.variance)) + 1

    def describe(self):
        return f"heat:{self.alpha!r},{self.t!r}"


def _positive(obj, name):
    v = getattr(obj, name)
    if not (v > 0 and math.isfinite(v)):
        raise ValueError(f"{type(obj).__name__}.{name} must be positive, got {v}")


def parse_psf(text):
    """Inverse of ``describe()``: ``gaussian:1.0``, ``airy:D,lam,f,pitch``, ``heat:alpha,t``."""
    kind, _, rest = text.partition(":")
    try:
        vals = [float(v) for v in rest.split(",")] if rest else []
        if kind == "gaussian" and len(vals) == 1:
            return GaussianPsf(*vals)
        if kind == "airy" and len(vals) == 4:
            return AiryPsf(*vals)
        if kind == "heat" and len(vals) == 2:
            return HeatKernelPsf(*vals)
    except ValueError as e:
        raise ValueError(f"bad psf {text!r}: {e}") from None
    raise ValueError(f"bad psf {text!r}; expected gaussian:s | airy:D,lam,f,pitch | heat:alpha,t")


@dataclass
class PsfKernel:
    values: np.ndarray

    @property
    def size(self):
        return self.values.shape[0]

    @property
    def half(self):
        return self.size // 2


def psf_grid(size):
    c = np.arange(size) - size // 2
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return yy, xx


def make_psf(model, size=None):
    size = model.default_size() if size is None else int(size)
    if size < 1 or size % 2 == 0:
        raise ValueError(f"PSF size must be a positive odd integer, got {size}")
    yy, xx = psf_grid(size)
    vals = model.profile((xx * xx + yy * yy).astype(np.float64))
    return PsfKernel(vals / vals.sum())


# ------------------------------------------------------------------ rendering


def _splat_origin(psf, center, shape):
    x, y = center
    x0, y0 = math.floor(x), math.floor(y)
    fx, fy = x - x0, y - y0
    h, w = shape
    hk = psf.half
    ok = (x0 - hk >= 0 and y0 - hk >= 0
          and x0 + (fx > 0) + hk <= w - 1 and y0 + (fy > 0) + hk <= h - 1)
    if not ok:
        raise ValueError(f"target center {center} violates the {hk}px margin of a {h}x{w} image")
    return x0, y0, fx, fy


def render_target(amplitude, psf, center, canvas):
    """Add ``amplitude * psf`` at subpixel ``center=(x, y)`` by bilinear splatting."""
    x0, y0, fx, fy = _splat_origin(psf, center, canvas.shape)
    hk, k = psf.half, psf.size
    patch = amplitude * psf.values
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            if wx * wy == 0:
                continue
            top, left = y0 + dy - hk, x0 + dx - hk
            canvas[top:top + k, left:left + k] += wx * wy * patch
    return canvas


def synth_clutter(seed, size, correlation_length, strength):
    """Gaussian-blurred white noise, standardized and scaled to ``strength``."""
    if strength < 0:
        raise ValueError("clutter strength must be >= 0")
    h, w = size
    if strength == 0:
        return np.zeros((h, w))
    field_ = np.random.default_rng(seed).standard_normal((h, w))
    if correlation_length > 0:
        field_ = gaussian_filter(field_, correlation_length, mode="wrap")
    field_ = (field_ - field_.mean()) / field_.std()
    return strength * field_


# ------------------------------------------------------------------ scenes


@dataclass(frozen=True)
class Target:
    x: float
    y: float
    amplitude: float


@dataclass(frozen=True)
class Clutter:
    correlation_length: float = 4.0
    strength: float = 0.5


@dataclass
class SceneSpec:
    size: tuple
    targets: list
    psf: object = field(default_factory=lambda: GaussianPsf(1.0))
    clutter: Clutter = field(default_factory=Clutter)
    noise_sigma: float = 0.1
    tau: float = 0.5
    seed: int = 0
    psf_size: int | None = None

    def kernel(self):
        return make_psf(self.psf, self.psf_size)


@dataclass
class Scene:
    image: Tensor
    mask: Tensor
    targets: list


def make_scene(spec):
    if not 0 < spec.tau < 1:
        raise ValueError(f"mask threshold tau must be in (0, 1), got {spec.tau}")
    h, w = spec.size
    psf = spec.kernel()
    for t in spec.targets:
        if t.amplitude <= 0:
            raise ValueError(f"target amplitude must be positive: {t}")
    for i, a in enumerate(spec.targets):
        for b in spec.targets[i + 1:]:
            if math.hypot(a.x - b.x, a.y - b.y) < psf.size / 2:
                raise ValueError(f"targets {a} and {b} closer than {psf.size / 2}px")

    signal = np.zeros((h, w))
    mask = np.zeros((h, w), dtype=bool)
    for t in spec.targets:
        patch = render_target(t.amplitude, psf, (t.x, t.y), np.zeros((h, w)))
        mask |= patch >= spec.tau * patch.max()
        signal += patch
    clutter = synth_clutter(spec.seed, (h, w), spec.clutter.correlation_length, spec.clutter.strength)
    noise = np.random.default_rng([spec.seed, 1]).standard_normal((h, w)) * spec.noise_sigma
    image = clutter + signal + noise
    return Scene(Tensor(image[None, None].astype(np.float32)),
                 Tensor(mask[None, None].astype(np.float32)),
                 list(spec.targets))


def random_scene_spec(seed, size=64, n_targets=3, psf=None, amplitude=(8.0, 20.0),
                      clutter=None, noise_sigma=0.1, tau=0.5, psf_size=None):
    """Draw target positions/amplitudes for one scene from ``seed``."""
    psf = GaussianPsf(1.0) if psf is None else psf
    h, w = (size, size) if isinstance(size, int) else size
    k = make_psf(psf, psf_size).size
    half = k // 2
    rng = np.random.default_rng([seed, 2])
    targets = []
    for _ in range(1000 * max(n_targets, 1)):
        if len(targets) == n_targets:
            break
        x = rng.uniform(half, w - 2 - half)
        y = rng.uniform(half, h - 2 - half)
        if all(math.hypot(x - t.x, y - t.y) >= max(k / 2, 4.0) for t in targets):
            targets.append(Target(float(x), float(y), float(rng.uniform(*amplitude))))
    if len(targets) < n_targets:
        raise ValueError(f"could not place {n_targets} targets in a {h}x{w} scene")
    return SceneSpec((h, w), targets, psf, clutter or Clutter(), noise_sigma, tau, int(seed), psf_size)
