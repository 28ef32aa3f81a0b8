"""Coarse-to-fine variational optical flow and the HSV encoding fed to the network.

The solver minimizes a Charbonnier-penalized brightness-constancy plus
smoothness energy on an image pyramid.  Each pyramid level runs a fixed
number of warp iterations; each warp iteration linearizes the data term and
solves the resulting system by iteratively reweighted least squares with a
fixed number of Jacobi relaxation sweeps.  Respiration motion is sub-pixel,
so defaults favor accuracy on small displacements.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

FLOW_SIZE = 96
FLOW_RATE_HZ = 5.0

_CACHE_MAGIC = b"AFLW"
_CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sHHHIf")  # magic, version, width, height, count, rate_hz


@dataclass(frozen=True)
class FlowParams:
    """Solver and preprocessing knobs; defaults suit 96x96 intensities in [0,1]."""

    alpha: float = 0.02              # smoothness weight
    charbonnier_eps: float = 1e-3
    pyramid_scale: float = 0.5
    min_side: int = 16
    warp_iters: int = 3
    irls_iters: int = 3
    relax_sweeps: int = 10           # Jacobi sweeps per IRLS reweighting
    boundary: str = "clamp"          # "clamp" or "wrap"
    low_texture_rms: float = 1e-6
    mag_ref: float = 1.0             # HSV value saturates at this magnitude (px)

    def __post_init__(self):
        if not 0 < self.pyramid_scale < 1:
            raise ValueError("pyramid_scale must lie in (0, 1)")
        if self.boundary not in ("clamp", "wrap"):
            raise ValueError("boundary must be 'clamp' or 'wrap'")


@dataclass
class FlowField:
    """Dense per-pixel displacement in pixels per frame step."""

    u: np.ndarray
    v: np.ndarray
    low_confidence: bool = False

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError("u and v must be 2-D arrays of equal shape")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ValueError("flow must be finite")

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


@dataclass
class FlowClip:
    """Flow fields at 5 Hz plus their HSV encoding, shaped [n, 3, 96, 96]."""

    fields: list[FlowField]
    hsv: np.ndarray
    rate_hz: float = FLOW_RATE_HZ

    def __len__(self) -> int:
        return len(self.fields)


def _check_frame(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=float)
    if frame.ndim != 2:
        raise ValueError("frame must be a 2-D grayscale array")
    if not np.all(np.isfinite(frame)):
        raise ValueError("frame intensities must be finite")
    if frame.min() < -1e-9 or frame.max() > 1 + 1e-9:
        raise ValueError("frame intensities must lie in [0, 1]")
    return frame


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling."""
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.linspace(0, h - 1, out_h)
    xs = np.linspace(0, w - 1, out_w)
    grid = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img, grid, order=1, mode="nearest")


def build_pyramid(frame: np.ndarray, scale: float = 0.5, min_side: int = 16) -> list[np.ndarray]:
    """Image pyramid: level 0 is the input, each next level low-passed then
    bilinearly downsampled by ``scale``; stops before any side drops below
    ``min_side``."""
    if not 0 < scale < 1:
        raise ValueError("scale must lie in (0, 1)")
    frame = _check_frame(frame)
    kernel = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
    levels = [frame]
    while True:
        h, w = levels[-1].shape
        nh, nw = round(h * scale), round(w * scale)
        if min(nh, nw) < min_side:
            break
        smooth = ndimage.correlate1d(levels[-1], kernel, axis=0, mode="nearest")
        smooth = ndimage.correlate1d(smooth, kernel, axis=1, mode="nearest")
        levels.append(resize_bilinear(smooth, nh, nw))
    return levels


def _grad_x(img: np.ndarray, wrap: bool) -> np.ndarray:
    if wrap:
        return (np.roll(img, -1, axis=1) - np.roll(img, 1, axis=1)) / 2.0
    return np.gradient(img, axis=1)


def _grad_y(img: np.ndarray, wrap: bool) -> np.ndarray:
    if wrap:
        return (np.roll(img, -1, axis=0) - np.roll(img, 1, axis=0)) / 2.0
    return np.gradient(img, axis=0)


def _warp(img: np.ndarray, u: np.ndarray, v: np.ndarray, wrap: bool) -> np.ndarray:
    h, w = img.shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    mode = "grid-wrap" if wrap else "nearest"
    return ndimage.map_coordinates(img, [yy + v, xx + u], order=1, mode=mode)


def _neighbor_sum(x: np.ndarray, wrap: bool) -> list[np.ndarray]:
    """Shifted copies of x from its four neighbors (N, S, W, E)."""
    if wrap:
        return [np.roll(x, 1, 0), np.roll(x, -1, 0), np.roll(x, 1, 1), np.roll(x, -1, 1)]
    pad = np.pad(x, 1, mode="edge")
    return [pad[:-2, 1:-1], pad[2:, 1:-1], pad[1:-1, :-2], pad[1:-1, 2:]]


def _solve_level(a, b, u, v, params: FlowParams):
    """Refine (u, v) on one pyramid level via warping + IRLS + Jacobi sweeps."""
    wrap = params.boundary == "wrap"
    eps2 = params.charbonnier_eps**2
    alpha = params.alpha
    for _ in range(params.warp_iters):
        b_w = _warp(b, u, v, wrap)
        ix = 0.5 * (_grad_x(a, wrap) + _grad_x(b_w, wrap))
        iy = 0.5 * (_grad_y(a, wrap) + _grad_y(b_w, wrap))
        it = b_w - a
        du = np.zeros_like(u)
        dv = np.zeros_like(v)
        for _ in range(params.irls_iters):
            r = it + ix * du + iy * dv
            wd = 1.0 / np.sqrt(r**2 + eps2)
            uu, vv = u + du, v + dv
            grad2 = (
                _grad_x(uu, wrap) ** 2 + _grad_y(uu, wrap) ** 2
                + _grad_x(vv, wrap) ** 2 + _grad_y(vv, wrap) ** 2
            )
            ws = 1.0 / np.sqrt(grad2 + eps2)
            # Edge weight between p and q = mean of the pixel weights.
            wn = [(ws + nb) / 2.0 for nb in _neighbor_sum(ws, wrap)]
            w_sum = sum(wn)
            den_u = wd * ix**2 + alpha * w_sum
            den_v = wd * iy**2 + alpha * w_sum
            for _ in range(params.relax_sweeps):
                nb_u = sum(w * nb for w, nb in zip(wn, _neighbor_sum(u + du, wrap)))
                du = (alpha * (nb_u - w_sum * u) - wd * ix * (it + iy * dv)) / den_u
                nb_v = sum(w * nb for w, nb in zip(wn, _neighbor_sum(v + dv, wrap)))
                dv = (alpha * (nb_v - w_sum * v) - wd * iy * (it + ix * du)) / den_v
        u = u + du
        v = v + dv
    return u, v


def estimate_flow(a: np.ndarray, b: np.ndarray, params: FlowParams | None = None) -> FlowField:
    """Dense flow from frame ``a`` to frame ``b``.

    Returns a zero field flagged ``low_confidence`` when ``a`` carries no
    texture (gradient RMS below ``params.low_texture_rms``).
    """
    params = params or FlowParams()
    a = _check_frame(a)
    b = _check_frame(b)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")

    wrap = params.boundary == "wrap"
    grad_rms = math.sqrt(float(np.mean(_grad_x(a, wrap) ** 2 + _grad_y(a, wrap) ** 2)))
    if grad_rms < params.low_texture_rms:
        zero = np.zeros_like(a)
        return FlowField(zero, zero.copy(), low_confidence=True)

    pyr_a = build_pyramid(a, params.pyramid_scale, params.min_side)
    pyr_b = build_pyramid(b, params.pyramid_scale, params.min_side)
    u = np.zeros_like(pyr_a[-1])
    v = np.zeros_like(pyr_a[-1])
    for level in range(len(pyr_a) - 1, -1, -1):
        la, lb = pyr_a[level], pyr_b[level]
        if u.shape != la.shape:
            factor_y = la.shape[0] / u.shape[0]
            factor_x = la.shape[1] / u.shape[1]
            u = resize_bilinear(u, *la.shape) * factor_x
            v = resize_bilinear(v, *la.shape) * factor_y
        u, v = _solve_level(la, lb, u, v, params)
    return FlowField(u, v)


def flow_to_hsv(flow: FlowField, mag_ref: float = 1.0) -> np.ndarray:
    """Encode a flow field as an HSV image, shaped (3, H, W), channels in [0, 1].

    Hue is the flow direction (atan2 mapped onto [0, 1)), saturation is 1,
    value is the magnitude clipped at ``mag_ref``.  Zero flow encodes as
    hue 0, value 0.
    """
    if mag_ref <= 0:
        raise ValueError("mag_ref must be positive")
    h = np.mod(np.arctan2(flow.v, flow.u), 2.0 * np.pi) / (2.0 * np.pi)
    s = np.ones_like(h)
    val = np.minimum(flow.magnitude / mag_ref, 1.0)
    return np.stack([h, s, val])


def select_grid_indices(n_frames: int, native_fps: float, target_hz: float = FLOW_RATE_HZ):
    """Index of the frame nearest each target-rate grid instant."""
    if native_fps < target_hz:
        raise ValueError(f"native_fps {native_fps} below target rate {target_hz}")
    last_t = (n_frames - 1) / native_fps
    count = int(math.floor(last_t * target_hz + 1e-9)) + 1
    grid_t = np.arange(count) / target_hz
    idx = np.clip(np.round(grid_t * native_fps).astype(int), 0, n_frames - 1)
    return idx


def preprocess_clip(
    frames, native_fps: float, params: FlowParams | None = None
) -> FlowClip:
    """Resample a frame sequence to 5 Hz, resize to 96x96 and compute flow.

    Returns one flow field (and HSV frame) per consecutive pair of selected
    frames: ``len(clip) == selected_count - 1``.
    """
    params = params or FlowParams()
    n = len(frames)
    idx = select_grid_indices(n, native_fps)
    if idx.size < 2:
        raise ValueError("clip too short: fewer than 2 grid frames")
    selected = [
        resize_bilinear(_check_frame(frames[i]), FLOW_SIZE, FLOW_SIZE) for i in idx
    ]
    fields = [
        estimate_flow(selected[i], selected[i + 1], params)
        for i in range(len(selected) - 1)
    ]
    hsv = np.stack([flow_to_hsv(f, params.mag_ref) for f in fields])
    return FlowClip(fields=fields, hsv=hsv, rate_hz=FLOW_RATE_HZ)


# ---------------------------------------------------------------------------
# Flow cache file: binary header (magic "AFLW", version u16, width u16,
# height u16, field count u32, rate_hz f32) followed by raw little-endian
# f32 u then v planes per field.  HSV is always recomputed, never cached.


def write_flow_cache(path, fields: list[FlowField], rate_hz: float = FLOW_RATE_HZ) -> None:
    if not fields:
        raise ValueError("refusing to cache an empty clip")
    h, w = fields[0].u.shape
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(_CACHE_MAGIC, _CACHE_VERSION, w, h, len(fields), rate_hz))
        for f in fields:
            if f.u.shape != (h, w):
                raise ValueError("inconsistent field shapes in clip")
            fh.write(f.u.astype("<f4").tobytes())
            fh.write(f.v.astype("<f4").tobytes())


def read_flow_cache(path, mag_ref: float = 1.0) -> FlowClip:
    """Load cached flow fields and recompute their HSV encoding."""
    with open(path, "rb") as fh:
        header = fh.read(_CACHE_HEADER.size)
        if len(header) < _CACHE_HEADER.size:
            raise ValueError(f"{path}: truncated flow cache header")
        magic, version, w, h, count, rate_hz = _CACHE_HEADER.unpack(header)
        if magic != _CACHE_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != _CACHE_VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        plane = h * w * 4
        body = fh.read(2 * plane * count)
        if len(body) < 2 * plane * count:
            raise ValueError(f"{path}: truncated flow cache body")
    fields = []
    for i in range(count):
        off = 2 * plane * i
        u = np.frombuffer(body, dtype="<f4", count=h * w, offset=off).reshape(h, w)
        v = np.frombuffer(body, dtype="<f4", count=h * w, offset=off + plane).reshape(h, w)
        fields.append(FlowField(u.astype(float), v.astype(float)))
    hsv = np.stack([flow_to_hsv(f, mag_ref) for f in fields])
    return FlowClip(fields=fields, hsv=hsv, rate_hz=float(rate_hz))
