"""Image fidelity and cross-frame consistency metrics.

Images are (3, h, w) floats in [-1, 1], so the PSNR peak is 2.0 and the
SSIM stabilizers use L = 2. SSIM statistics come from 11x11 Gaussian
(sigma 1.5) windows in valid mode (no padding), averaged over window
positions and channels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

PSNR_CAP = 99.0
_PEAK = 2.0
_SSIM_WIN = 11
_SSIM_SIGMA = 1.5
_C1 = (0.01 * _PEAK) ** 2
_C2 = (0.03 * _PEAK) ** 2


class TooSmall(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """Peak signal-to-noise ratio in dB, capped for (near-)identical inputs."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(_PEAK * _PEAK / mse))


def _gaussian_kernel():
    half = (_SSIM_WIN - 1) / 2.0
    x = np.arange(_SSIM_WIN) - half
    k = np.exp(-(x ** 2) / (2.0 * _SSIM_SIGMA ** 2))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


_KERNEL = _gaussian_kernel()


def _windows(img):
    # (h, w) -> (h-10, w-10) of Gaussian-weighted local means via sliding windows
    from numpy.lib.stride_tricks import sliding_window_view

    win = sliding_window_view(img, (_SSIM_WIN, _SSIM_WIN))
    return np.einsum("ijkl,kl->ij", win, _KERNEL)


def ssim(a, b):
    """Mean local structural similarity; needs at least an 11x11 image."""
    a, b = _check_pair(a, b)
    h, w = a.shape[-2:]
    if h < _SSIM_WIN or w < _SSIM_WIN:
        raise TooSmall(f"ssim needs h, w >= {_SSIM_WIN}, got {h}x{w}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    vals = []
    for ca, cb in zip(a, b):
        mu_a = _windows(ca)
        mu_b = _windows(cb)
        s_aa = _windows(ca * ca) - mu_a * mu_a
        s_bb = _windows(cb * cb) - mu_b * mu_b
        s_ab = _windows(ca * cb) - mu_a * mu_b
        num = (2 * mu_a * mu_b + _C1) * (2 * s_ab + _C2)
        den = (mu_a ** 2 + mu_b ** 2 + _C1) * (s_aa + s_bb + _C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def warp_image(img, flow):
    """Backward bilinear warp: out[:, y, x] = img sampled at (x, y) + flow[:, y, x].

    Sample positions are clamped to the image border. Zero flow reproduces
    the input exactly.
    """
    img = np.asarray(img, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    c, h, w = img.shape
    if flow.shape != (2, h, w):
        raise ValueError(f"flow must be (2, {h}, {w}), got {flow.shape}")
    ys, xs = np.mgrid[0:h, 0:w]
    sx = np.clip(xs + flow[0], 0.0, w - 1.0)
    sy = np.clip(ys + flow[1], 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    top = img[:, y0, x0] * (1 - fx) + img[:, y0, x1] * fx
    bot = img[:, y1, x0] * (1 - fx) + img[:, y1, x1] * fx
    return top * (1 - fy) + bot * fy


def flow_warp_error(frames, flows, masks):
    """Mean per-pixel L1 between each frame and its warped predecessor.

    flows[i] lives on frame i+1's grid and points into frame i; masks[i]
    marks where the correspondence is valid. The average runs over masked
    pixels of all consecutive pairs (all channels); pairs with empty masks
    contribute nothing.
    """
    if len(flows) != len(frames) - 1 or len(masks) != len(frames) - 1:
        raise LengthMismatch(
            f"{len(frames)} frames need {len(frames) - 1} flows/masks, "
            f"got {len(flows)}/{len(masks)}")
    total = 0.0
    count = 0
    for i in range(1, len(frames)):
        mask = np.asarray(masks[i - 1], dtype=bool)
        if not mask.any():
            continue
        warped = warp_image(frames[i - 1], flows[i - 1])
        diff = np.abs(np.asarray(frames[i], dtype=np.float64) - warped)
        total += float(diff[:, mask].sum())
        count += int(mask.sum()) * diff.shape[0]
    return total / count if count else 0.0


@dataclass
class EvalReport:
    """Per-frame fidelity plus sequence-level consistency."""

    psnr: list = field(default_factory=list)      # first frames, generated vs GT
    ssim: list = field(default_factory=list)
    warp_error: float = 0.0
    frames_scored: int = 0
    config_hash: str = ""

    def to_json(self):
        return json.dumps(
            {
                "psnr": self.psnr,
                "ssim": self.ssim,
                "warp_error": self.warp_error,
                "frames_scored": self.frames_scored,
                "config_hash": self.config_hash,
            },
            indent=2,
            sort_keys=True,
        )

    def table(self):
        lines = [f"{'frame':>5} {'psnr_db':>9} {'ssim':>7}"]
        for i, (p, s) in enumerate(zip(self.psnr, self.ssim)):
            lines.append(f"{i + 1:>5} {p:>9.3f} {s:>7.4f}")
        lines.append(f"warp_error {self.warp_error:.6f} over {self.frames_scored} frames")
        return "\n".join(lines)
