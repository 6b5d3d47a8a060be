"""Procedural multi-view scenes: textured axis-aligned quads under ray casting.

Scenes are a handful of axis-aligned rectangles with smooth procedural
textures (soft checkers and linear gradients). Smoothness is deliberate:
ground-truth flow is validated by bilinear warping, and hard texture edges
would alias at 16x16 well past the consistency tolerance.

Rendering shoots one ray per pixel through K^-1 (x, y, 1); because that
direction has unit camera depth, the ray parameter of a hit equals its z
depth. Missed pixels get the background color and a large depth sentinel.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraPose
from .imgio import save_png

DEPTH_SENTINEL = 1e9
_HIT_EPS = 1e-6
_OCCLUSION_EPS = 1e-6


class IoFailure(OSError):
    pass


@dataclass(frozen=True)
class Texture:
    kind: str                 # "checker" | "gradient"
    c0: tuple                 # colors in [-1, 1]
    c1: tuple
    cells: float = 2.0        # checker periods across the quad
    softness: float = 1.6     # checker edge softness (higher = smoother)
    direction: tuple = (1.0, 0.0)  # gradient direction in uv


@dataclass(frozen=True)
class Quad:
    """Axis-aligned rectangle: plane {axes[axis] == offset}, uv spans the rest."""

    axis: int                 # 0=x, 1=y, 2=z plane normal
    offset: float
    lo: tuple                 # (u_min, v_min) in the two in-plane axes
    hi: tuple
    texture: Texture

    def uv_axes(self):
        return [i for i in range(3) if i != self.axis]


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    quads: tuple
    background: tuple


@dataclass
class PosedFrame:
    image: np.ndarray         # (3, h, w) in [-1, 1]
    depth: np.ndarray         # (h, w), DEPTH_SENTINEL where no surface
    pose: CameraPose
    surface: np.ndarray = None  # (h, w) quad index per pixel, -1 for background


def _texture_colors(tex, u, v):
    # u, v in [0, 1] across the quad; both profiles stay smooth so bilinear
    # resampling under small viewpoint changes is nearly exact
    c0 = np.asarray(tex.c0)[:, None]
    c1 = np.asarray(tex.c1)[:, None]
    if tex.kind == "checker":
        g = np.tanh(np.sin(2.0 * np.pi * tex.cells * u) / tex.softness)
        g = g * np.tanh(np.sin(2.0 * np.pi * tex.cells * v) / tex.softness)
        m = 0.5 * (g + 1.0)
    elif tex.kind == "gradient":
        # linear in uv, no clipping crease: direction is scaled so m spans
        # a subrange of [0, 1] for any uv in the unit square
        m = 0.5 + 0.65 * (tex.direction[0] * (u - 0.5) + tex.direction[1] * (v - 0.5))
    else:
        raise ValueError(f"unknown texture kind '{tex.kind}'")
    return c0 * (1.0 - m) + c1 * m


def generate_scene(seed):
    """Random quad arrangement; always one quad across the optical axis."""
    rng = np.random.default_rng(seed)
    quads = []
    n_extra = int(rng.integers(2, 5))

    def tex():
        base = rng.uniform(-0.55, 0.35, 3)
        contrast = rng.uniform(0.35, 0.6)
        c0 = np.clip(base - contrast / 2, -0.95, 0.95)
        c1 = np.clip(base + contrast / 2, -0.95, 0.95)
        if rng.random() < 0.5:
            ang = rng.uniform(0, 2 * np.pi)
            return Texture(kind="gradient", c0=tuple(c0), c1=tuple(c1),
                           direction=(np.cos(ang), np.sin(ang)))
        return Texture(kind="checker", c0=tuple(c0), c1=tuple(c1),
                       cells=float(rng.uniform(0.9, 1.6)),
                       softness=float(rng.uniform(2.0, 3.0)))

    # anchor quad straddling the +z optical axis so the canonical view sees it
    size = rng.uniform(1.6, 2.6)
    cx, cy = rng.uniform(-0.4, 0.4, 2)
    z0 = rng.uniform(3.0, 4.5)
    quads.append(Quad(axis=2, offset=float(z0),
                      lo=(float(cx - size), float(cy - size)),
                      hi=(float(cx + size), float(cy + size)), texture=tex()))
    for _ in range(n_extra):
        z = rng.uniform(2.2, 7.5)
        w = rng.uniform(0.8, 2.2)
        h = rng.uniform(0.8, 2.2)
        ox = rng.uniform(-2.6, 2.6)
        oy = rng.uniform(-2.0, 2.0)
        quads.append(Quad(axis=2, offset=float(z),
                          lo=(float(ox - w), float(oy - h)),
                          hi=(float(ox + w), float(oy + h)), texture=tex()))
    bg = tuple(np.clip(rng.uniform(-0.75, -0.25, 3), -1, 1))
    return SceneSpec(seed=int(seed), quads=tuple(quads), background=bg)


def default_intrinsics(h, w, fov_deg=60.0):
    f = (max(h, w) / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
    return np.array([[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]])


def _ray_field(pose, h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    pix = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)], axis=0)
    dirs_cam = np.linalg.inv(pose.K) @ pix            # unit camera depth
    origin = pose.center()
    dirs_world = pose.R.T @ dirs_cam
    return origin, dirs_world                          # (3,), (3, h*w)


def _intersect(scene, origin, dirs, s_max=None):
    """Nearest hit parameter and quad index per ray (-1 where none)."""
    n = dirs.shape[1]
    best_s = np.full(n, DEPTH_SENTINEL)
    best_q = np.full(n, -1, dtype=np.int64)
    for qi, quad in enumerate(scene.quads):
        denom = dirs[quad.axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (quad.offset - origin[quad.axis]) / denom
        valid = np.isfinite(s) & (s > _HIT_EPS)
        if s_max is not None:
            valid &= s < s_max
        ua, va = quad.uv_axes()
        pu = origin[ua] + s * dirs[ua]
        pv = origin[va] + s * dirs[va]
        valid &= (pu >= quad.lo[0]) & (pu <= quad.hi[0])
        valid &= (pv >= quad.lo[1]) & (pv <= quad.hi[1])
        closer = valid & (s < best_s)
        best_s[closer] = s[closer]
        best_q[closer] = qi
    return best_s, best_q


def render_view(scene, pose, h, w):
    """Ray-cast the scene into a PosedFrame."""
    origin, dirs = _ray_field(pose, h, w)
    s, q = _intersect(scene, origin, dirs)
    img = np.tile(np.asarray(scene.background, dtype=np.float64)[:, None], (1, h * w))
    for qi, quad in enumerate(scene.quads):
        hitq = q == qi
        if not np.any(hitq):
            continue
        ua, va = quad.uv_axes()
        pu = origin[ua] + s[hitq] * dirs[ua, hitq]
        pv = origin[va] + s[hitq] * dirs[va, hitq]
        u = (pu - quad.lo[0]) / (quad.hi[0] - quad.lo[0])
        v = (pv - quad.lo[1]) / (quad.hi[1] - quad.lo[1])
        img[:, hitq] = _texture_colors(quad.texture, u, v)
    depth = np.where(q >= 0, s, DEPTH_SENTINEL)
    return PosedFrame(image=img.reshape(3, h, w), depth=depth.reshape(h, w),
                      pose=pose, surface=q.reshape(h, w))


def gt_flow(scene, pose_a, pose_b, h, w):
    """Flow from view a pixels to view b, plus a visibility mask.

    flow[:, y, x] = (dx, dy) such that the surface point seen at a's pixel
    (x, y) projects to (x + dx, y + dy) in b. Mask is true only where a
    sees a surface whose point (i) is in front of b's camera, (ii) lands
    inside b's image, (iii) is not occluded by a nearer quad, and (iv) has
    its whole bilinear sample footprint on that same surface in b, so a
    warped sample reads the surface's own texture rather than a silhouette
    blend.
    """
    frame_a = render_view(scene, pose_a, h, w)
    frame_b = render_view(scene, pose_b, h, w)
    depth = frame_a.depth.ravel()
    surf_a = frame_a.surface.ravel()
    origin_a, dirs_a = _ray_field(pose_a, h, w)
    hit = depth < DEPTH_SENTINEL

    flow = np.zeros((2, h * w))
    mask = np.zeros(h * w, dtype=bool)
    if np.any(hit):
        pts_world = origin_a[:, None] + depth[hit] * dirs_a[:, hit]
        pts_b = pose_b.R @ pts_world + pose_b.t[:, None]
        zb = pts_b[2]
        ok = zb > _HIT_EPS
        proj = np.full((2, ok.size), np.nan)
        pk = pose_b.K @ pts_b[:, ok]
        proj[:, ok] = pk[:2] / pk[2]
        inside = ok & (proj[0] >= 0) & (proj[0] <= w - 1) & (proj[1] >= 0) & (proj[1] <= h - 1)

        # occlusion: anything strictly nearer along the segment from b's center
        origin_b = pose_b.center()
        seg = pts_world - origin_b[:, None]
        occ_s, _ = _intersect(scene, origin_b, seg, s_max=1.0 - _OCCLUSION_EPS)
        visible = inside & (occ_s >= DEPTH_SENTINEL)

        # footprint check: the four sample neighbors in b share a's surface
        if np.any(visible):
            vx = np.clip(proj[0, visible], 0, w - 1)
            vy = np.clip(proj[1, visible], 0, h - 1)
            x0 = np.floor(vx).astype(np.intp)
            y0 = np.floor(vy).astype(np.intp)
            x1 = np.minimum(x0 + 1, w - 1)
            y1 = np.minimum(y0 + 1, h - 1)
            sb = frame_b.surface
            want = surf_a[hit][visible]
            same = ((sb[y0, x0] == want) & (sb[y0, x1] == want)
                    & (sb[y1, x0] == want) & (sb[y1, x1] == want))
            vis_idx = np.flatnonzero(visible)
            visible = visible.copy()
            visible[vis_idx[~same]] = False

        ys, xs = np.mgrid[0:h, 0:w]
        grid = np.stack([xs.ravel(), ys.ravel()], axis=0).astype(np.float64)
        fl = np.zeros_like(proj)
        fl[:, visible] = proj[:, visible] - grid[:, hit][:, visible]
        full_flow = np.zeros((2, h * w))
        full_mask = np.zeros(h * w, dtype=bool)
        idx = np.flatnonzero(hit)
        full_flow[:, idx[visible]] = fl[:, visible]
        full_mask[idx[visible]] = True
        flow, mask = full_flow, full_mask
    return flow.reshape(2, h, w), mask.reshape(h, w)


@dataclass(frozen=True)
class TrajectorySpec:
    forward_step: float = 0.22
    lateral_amp: float = 0.8
    vertical_amp: float = 0.2
    yaw_amp_deg: float = 3.0
    pitch_amp_deg: float = 1.5
    # steady per-frame pan; the per-path rate is drawn in [0.6, 1.4] x this
    # with a random sign. Consecutive frames must differ enough that copying
    # the previous view is a beatable baseline.
    pan_rate_deg: float = 4.0


def _rot_yaw_pitch(yaw, pitch):
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    return Rx @ Ry


def smooth_trajectory(rng, n_frames, K, spec=TrajectorySpec()):
    """Panning forward drift with smooth lateral sway and small rotations."""
    phase = rng.uniform(0, 2 * np.pi, 4)
    freq = rng.uniform(0.5, 1.1, 4)
    pan = np.deg2rad(spec.pan_rate_deg) * rng.uniform(0.6, 1.4)
    if rng.random() < 0.5:
        pan = -pan
    poses = []
    for i in range(n_frames):
        s = i / max(n_frames - 1, 1)
        cx = spec.lateral_amp * np.sin(2 * np.pi * freq[0] * s + phase[0]) * s if n_frames > 1 else 0.0
        cy = spec.vertical_amp * np.sin(2 * np.pi * freq[1] * s + phase[1]) * s if n_frames > 1 else 0.0
        cz = spec.forward_step * i
        yaw = pan * i + np.deg2rad(spec.yaw_amp_deg) * np.sin(2 * np.pi * freq[2] * s + phase[2]) * s
        pitch = np.deg2rad(spec.pitch_amp_deg) * np.sin(2 * np.pi * freq[3] * s + phase[3]) * s
        R = _rot_yaw_pitch(yaw, pitch)
        center = np.array([cx, cy, cz])
        poses.append(CameraPose(K=K, R=R, t=-R @ center))
    return poses


def save_flow(path_stub, flow, mask, pair):
    """Raw little-endian float32 flow plus a JSON sidecar and a u8 mask."""
    flow32 = np.ascontiguousarray(flow, dtype="<f4")
    with open(path_stub + ".f32", "wb") as fh:
        fh.write(flow32.tobytes())
    with open(path_stub + ".mask.u8", "wb") as fh:
        fh.write(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())
    sidecar = {
        "dtype": "<f4",
        "shape": list(flow.shape),
        "layout": "(dx_dy, row, col), row-major",
        "mask_file": os.path.basename(path_stub) + ".mask.u8",
        "pair": list(pair),
    }
    with open(path_stub + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def load_flow(path_stub):
    with open(path_stub + ".json") as fh:
        side = json.load(fh)
    shape = tuple(side["shape"])
    flow = np.frombuffer(open(path_stub + ".f32", "rb").read(), dtype="<f4").reshape(shape)
    mask = np.frombuffer(open(path_stub + ".mask.u8", "rb").read(), dtype=np.uint8)
    return flow.astype(np.float64), mask.reshape(shape[1:]).astype(bool)


def _pose_json(pose):
    return {"R": pose.R.tolist(), "t": pose.t.tolist()}


def write_scene_dir(scene_dir, scene, poses, h, w):
    """Render a scene along a trajectory and write frames, poses and flows."""
    try:
        os.makedirs(scene_dir, exist_ok=True)
        frames = [render_view(scene, p, h, w) for p in poses]
        meta = {
            "seed": scene.seed,
            "height": h,
            "width": w,
            "K": poses[0].K.tolist(),
            "frames": [],
        }
        for i, fr in enumerate(frames):
            name = f"frame_{i:03d}.png"
            save_png(os.path.join(scene_dir, name), fr.image)
            meta["frames"].append({"file": name, **_pose_json(fr.pose)})
        # flows for consecutive pairs, on the later frame's grid into the earlier
        for i in range(1, len(poses)):
            flow, mask = gt_flow(scene, poses[i], poses[i - 1], h, w)
            save_flow(os.path.join(scene_dir, f"flow_{i:03d}"), flow, mask, (i, i - 1))
        with open(os.path.join(scene_dir, "poses.json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
        return frames
    except OSError as exc:
        raise IoFailure(f"cannot write scene to {scene_dir}: {exc}") from exc


def build_dataset(out_dir, n_scenes, frames_per_scene, seed, h=16, w=16,
                  trajectory=TrajectorySpec(), threads=None):
    """Directory of procedurally generated posed sequences.

    Per-scene work is independent; `threads` parallelizes it without
    affecting any output byte (results are only ever written per scene).
    """
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(n_scenes)
    K = default_intrinsics(h, w)

    def one(idx):
        child = children[idx]
        scene_seed = int(child.generate_state(1)[0])
        scene = generate_scene(scene_seed)
        rng = np.random.default_rng(child)
        poses = smooth_trajectory(rng, frames_per_scene, K, trajectory)
        write_scene_dir(os.path.join(out_dir, f"scene_{idx:03d}"), scene, poses, h, w)

    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out_dir}: {exc}") from exc
    if threads and threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(one, range(n_scenes)))
    else:
        for i in range(n_scenes):
            one(i)


def load_scene_dir(scene_dir):
    """Frames (float arrays), poses and flows of one written scene."""
    from .imgio import load_png

    with open(os.path.join(scene_dir, "poses.json")) as fh:
        meta = json.load(fh)
    K = np.asarray(meta["K"])
    frames, poses = [], []
    for fr in meta["frames"]:
        frames.append(load_png(os.path.join(scene_dir, fr["file"])))
        poses.append(CameraPose(K=K, R=np.asarray(fr["R"]), t=np.asarray(fr["t"])))
    flows = []
    for i in range(1, len(frames)):
        stub = os.path.join(scene_dir, f"flow_{i:03d}")
        flows.append(load_flow(stub) if os.path.exists(stub + ".json") else None)
    return frames, poses, flows
