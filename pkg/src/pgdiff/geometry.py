"""Camera algebra and epipolar attention-weight construction.

Conventions used package-wide:
  * poses are world-to-camera maps X_cam = R @ X_world + t
  * a pixel's coordinate is its integer index (x = column, y = row); the
    back-projected ray of pixel p is K^-1 @ (x, y, 1), which has unit
    camera-space depth, so the ray parameter equals the z depth
  * distances between image points are measured after normalizing pixel
    coordinates to [-1, 1] along the longer image side,
    u = (2x - w) / max(h, w), v = (2y - h) / max(h, w); this conversion is
    exactly invariant under halving the resolution together with the
    coordinates, which is what makes attention weights agree across
    feature-pyramid levels.

The per-pixel weight map over a second view is a band around the epipolar
line: m = 1 - sigmoid(50 * (d - 0.05)) with d the normalized perpendicular
distance. 50 makes the band edge steep, 0.05 is its half width, so m is
about 0.924 on the line and drops below 1e-9 once d >= 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEPTH_EPS = 1e-6
COINCIDENT_EPS = 1e-9
# ray-sampling fallback depths, nearest first; the primary pair is (0.1, 100)
# and the rest of the ladder covers cameras displaced along the viewing axis,
# where near samples can land behind the other view
FALLBACK_DEPTHS = (0.1, 100.0, 1e-3, 1e-2, 0.5, 1.0, 2.0, 5.0, 10.0, 1e3, 1e4)
BAND_GAIN = 50.0
BAND_HALF_WIDTH = 0.05
MAX_PIXELS = 4096


class DegenerateDepth(ValueError):
    pass


class DegenerateLine(ValueError):
    pass


class ResolutionTooLarge(ValueError):
    pass


def _check_rotation(R):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {R.shape}")
    if np.abs(R.T @ R - np.eye(3)).max() > 1e-9:
        raise ValueError("rotation is not orthonormal")
    if np.linalg.det(R) < 0:
        raise ValueError("rotation has negative determinant")
    return R


def _freeze(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera pose with shared pinhole intrinsics."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        if K.shape != (3, 3):
            raise ValueError(f"K must be 3x3, got {K.shape}")
        if abs(K[2, 2] - 1.0) > 1e-12 or np.abs(K[np.tril_indices(3, -1)]).max() > 1e-12:
            raise ValueError("K must be upper triangular with K[2,2] == 1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("K needs positive focal lengths")
        R = _check_rotation(self.R)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "K", _freeze(K))
        object.__setattr__(self, "R", _freeze(R))
        object.__setattr__(self, "t", _freeze(t))

    def center(self):
        """Camera center in world coordinates."""
        return -self.R.T @ self.t


@dataclass(frozen=True)
class RelativePose:
    """Rigid map from one camera frame into another: X_b = R @ X_a + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = _check_rotation(self.R)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", _freeze(R))
        object.__setattr__(self, "t", _freeze(t))


def relative_pose(src, dst):
    """Relative pose mapping src-camera coordinates into dst-camera coordinates."""
    R = dst.R @ src.R.T
    return RelativePose(R=R, t=dst.t - R @ src.t)


def compose(a, b):
    """RelativePose applying a first, then b."""
    return RelativePose(R=b.R @ a.R, t=b.R @ a.t + b.t)


def project(point_cam, K):
    """Pinhole projection of a camera-space point to pixel coordinates."""
    p = np.asarray(point_cam, dtype=np.float64).reshape(3)
    q = K @ p
    if q[2] <= DEPTH_EPS:
        raise DegenerateDepth(f"projection depth {q[2]:.3e} <= {DEPTH_EPS}")
    return q[:2] / q[2]


@dataclass(frozen=True)
class EpipolarLine:
    """Two pixel-space points spanning the epipolar line of a target pixel.

    epipole/p_proj hold the translation projection and the depth-1 ray
    projection on the direct route; on the ray fallback route they hold the
    near- and far-depth ray projections instead (from_ray_fallback is True).
    Coincident points mean the whole ray images to a single pixel.
    """

    epipole: np.ndarray
    p_proj: np.ndarray
    from_ray_fallback: bool = False


def epipolar_endpoints(p_i, rel, K):
    """Epipolar line, in the other view, of target pixel p_i = (x, y).

    The direct construction projects the relative translation (the epipole)
    and the target ray at unit depth. If either lands at depth <= DEPTH_EPS
    the line is recovered by projecting the ray at a ladder of fixed depths
    and spanning the two valid projections farthest apart; every projection
    of the ray lies on the same image line, so any valid pair recovers it.
    Coincident survivors collapse to a single-point line. No valid
    projection at all means the geometry carries no usable constraint.
    """
    p_i = np.asarray(p_i, dtype=np.float64).reshape(2)
    Kinv = np.linalg.inv(K)
    ray = Kinv @ np.array([p_i[0], p_i[1], 1.0])
    direct = rel.R @ ray + rel.t
    try:
        p_proj = project(direct, K)
        epi = project(rel.t, K)
        return EpipolarLine(epipole=epi, p_proj=p_proj)
    except DegenerateDepth:
        pass
    valid = []
    for depth in FALLBACK_DEPTHS:
        try:
            valid.append(project(rel.R @ (depth * ray) + rel.t, K))
        except DegenerateDepth:
            continue
    if not valid:
        raise DegenerateLine(f"no valid projection for pixel {p_i}")
    pts = np.array(valid)
    diff = pts[:, None, :] - pts[None, :, :]
    sep = np.hypot(diff[..., 0], diff[..., 1])
    a, b = np.unravel_index(np.argmax(sep), sep.shape)
    if sep[a, b] <= COINCIDENT_EPS:
        return EpipolarLine(epipole=pts[0], p_proj=pts[0], from_ray_fallback=True)
    return EpipolarLine(epipole=pts[a], p_proj=pts[b], from_ray_fallback=True)


def point_to_line_distance(p_j, o, p_proj):
    """Perpendicular distance from p_j to the infinite line through o and p_proj.

    Works in whatever units the inputs share; weight-map callers pass
    normalized coordinates.
    """
    p_j = np.asarray(p_j, dtype=np.float64).reshape(2)
    o = np.asarray(o, dtype=np.float64).reshape(2)
    d = np.asarray(p_proj, dtype=np.float64).reshape(2) - o
    n = np.hypot(d[0], d[1])
    if n <= COINCIDENT_EPS:
        raise DegenerateLine("line endpoints coincide")
    r = p_j - o
    return abs(r[0] * d[1] - r[1] * d[0]) / n


def normalize_pixels(pts, h, w):
    """Map pixel coordinates (..., 2) to [-1, 1] along the longer side."""
    pts = np.asarray(pts, dtype=np.float64)
    long_side = float(max(h, w))
    out = np.empty_like(pts)
    out[..., 0] = (2.0 * pts[..., 0] - w) / long_side
    out[..., 1] = (2.0 * pts[..., 1] - h) / long_side
    return out


def pixel_grid(h, w):
    """Row-major (h*w, 2) array of (x, y) pixel coordinates."""
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def weight_from_distance(d):
    """Band profile 1 - sigmoid(gain * (d - half_width)), elementwise.

    Evaluated as sigmoid(-gain * (d - half_width)); the subtraction form
    would round to exactly 0 once the band term drops below float eps.
    """
    return 1.0 / (1.0 + np.exp(BAND_GAIN * (np.asarray(d) - BAND_HALF_WIDTH)))


def _rect_misses_line(o, direction, h, w):
    # all four pixel-grid corners strictly on one side of the line
    corners = normalize_pixels(
        np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=np.float64), h, w
    )
    r = corners - o
    s = r[:, 0] * direction[1] - r[:, 1] * direction[0]
    return bool(np.all(s > 0) or np.all(s < 0))


def _point_outside_rect(p, h, w):
    lo = normalize_pixels(np.array([0.0, 0.0]), h, w)
    hi = normalize_pixels(np.array([w - 1.0, h - 1.0]), h, w)
    return bool(p[0] < lo[0] or p[0] > hi[0] or p[1] < lo[1] or p[1] > hi[1])


def epipolar_weight_map(p_i, rel, K, h, w):
    """(h, w) map of epipolar band weights for one target pixel.

    Rows that carry no constraint are uniform 1.0 so that downstream
    Hadamard masking degrades to plain cross-view attention: that covers
    fully degenerate geometry and lines (or single points) that miss the
    image rectangle. When the line collapses to a point but stays inside
    the image, the distance to that point is used, which keeps pure
    rotations and the exact forward-motion axis pixel informative.
    """
    try:
        line = epipolar_endpoints(p_i, rel, K)
    except DegenerateLine:
        return np.ones((h, w), dtype=np.float64)

    o = normalize_pixels(line.epipole, h, w)
    q = normalize_pixels(line.p_proj, h, w)
    grid = normalize_pixels(pixel_grid(h, w), h, w)
    d_vec = q - o
    n = np.hypot(d_vec[0], d_vec[1])
    if n <= COINCIDENT_EPS:
        if _point_outside_rect(o, h, w):
            return np.ones((h, w), dtype=np.float64)
        dist = np.hypot(grid[:, 0] - o[0], grid[:, 1] - o[1])
    else:
        if _rect_misses_line(o, d_vec / n, h, w):
            return np.ones((h, w), dtype=np.float64)
        r = grid - o
        dist = np.abs(r[:, 0] * d_vec[1] - r[:, 1] * d_vec[0]) / n
    return weight_from_distance(dist).reshape(h, w)


@dataclass(frozen=True)
class EpipolarWeightMatrix:
    """Dense (h*w, h*w) weights; row r is the flattened map of target pixel r."""

    h: int
    w: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.h * self.w, self.h * self.w):
            raise ValueError(f"values must be ({self.h * self.w}, {self.h * self.w}), got {v.shape}")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("weights must lie in [0, 1]")
        object.__setattr__(self, "values", _freeze(v))


def epipolar_weight_matrix(rel, K, h, w, max_pixels=MAX_PIXELS):
    """Stack of per-target-pixel weight maps, row-major over target pixels."""
    if h * w > max_pixels:
        raise ResolutionTooLarge(f"{h}x{w} = {h * w} pixels exceeds cap {max_pixels}")
    targets = pixel_grid(h, w)
    values = np.empty((h * w, h * w), dtype=np.float64)
    for r in range(h * w):
        values[r] = epipolar_weight_map(targets[r], rel, K, h, w).ravel()
    return EpipolarWeightMatrix(h=h, w=w, values=values)


def scale_intrinsics(K, from_hw, to_hw):
    """K for the same camera at a different pixel resolution."""
    sy = to_hw[0] / from_hw[0]
    sx = to_hw[1] / from_hw[1]
    S = np.diag([sx, sy, 1.0])
    return S @ np.asarray(K, dtype=np.float64)


def save_pgm(path, weights):
    """Write a weight map as an 8-bit binary PGM (values round(255 * m))."""
    w8 = np.round(255.0 * np.asarray(weights, dtype=np.float64)).astype(np.uint8)
    if w8.ndim != 2:
        raise ValueError(f"expected a 2d map, got shape {w8.shape}")
    header = f"P5\n{w8.shape[1]} {w8.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + w8.tobytes())
