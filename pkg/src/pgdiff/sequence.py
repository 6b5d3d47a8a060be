"""Autoregressive multi-view sampling with shared noise banks.

A sequence is generated frame by frame. Every frame runs the same respaced
backward chain from the same initialization noise, and the chain noises down
to a cutoff step are shared between frames too (the bank); only the tail
below the cutoff is drawn fresh per frame. The conditioning source view is
redrawn stochastically from already-available frames, by default at every
backward step.

Noise labels follow the state they produce: the step from x_t to x_{t-1}
consumes the noise labeled t-1, so a bank with cutoff t' holds x_init plus
labels n-1 down to t', and a cutoff equal to the step count leaves only
x_init shared. Label 0 never exists (the final step adds no noise).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, backward_step, clamp_implied_x0
from .geometry import relative_pose
from .denoiser import denoise, encode_source, weight_matrices_for
from .imgio import save_png


class EmptyHistory(ValueError):
    """A source view was requested with no prior frames available."""


class PoseCountMismatch(ValueError):
    """Pose list does not describe a generatable sequence."""


class TooFewAnchors(ValueError):
    """View interpolation needs at least two anchor views."""


DISTANCE_EPS = 1e-6


@dataclass
class NoiseBank:
    """Fixed chain noises shared by all frames of one sequence.

    Regenerating with the same seed, schedule length and shape is
    bit-identical. eps holds labels n-1 down to t_prime (absent below).
    """

    seed: int
    t_prime: int
    shape: tuple
    x_init: np.ndarray
    eps: dict = field(default_factory=dict)


def make_noise_bank(seed, sched, t_prime, shape):
    n = sched.T
    if not 0 <= t_prime <= n:
        raise ValueError(f"t_prime {t_prime} outside [0, {n}]")
    rng = np.random.default_rng(seed)
    x_init = rng.standard_normal(shape)
    eps = {}
    for k in range(n - 1, max(t_prime, 1) - 1, -1):
        eps[k] = rng.standard_normal(shape)
    return NoiseBank(seed=int(seed), t_prime=int(t_prime), shape=tuple(shape),
                     x_init=x_init, eps=eps)


def window_indices(i, window):
    """1-based candidate source frames for target frame i; window 0 means all."""
    if i < 2:
        raise EmptyHistory(f"frame {i} has no prior frames")
    lo = 1 if window <= 0 else max(1, i - window)
    return list(range(lo, i))


def sample_source_view(prior_frames, rng):
    """Uniform draw from the candidate indices."""
    if len(prior_frames) == 0:
        raise EmptyHistory("no prior frames to sample from")
    return int(prior_frames[int(rng.integers(len(prior_frames)))])


@dataclass(frozen=True)
class SamplerConfig:
    """Backward-chain settings shared by sequence generation and interpolation."""

    sched: NoiseSchedule
    t_prime: int = 100
    window: int = 0
    resample_per_step: bool = True

    def __post_init__(self):
        if not 0 <= self.t_prime <= self.sched.T:
            raise ValueError(f"t_prime {self.t_prime} outside [0, {self.sched.T}]")


@dataclass
class FrameSequence:
    """Ordered frames with their poses and generation metadata."""

    frames: list
    poses: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.frames) != len(self.poses):
            raise PoseCountMismatch(
                f"{len(self.frames)} frames for {len(self.poses)} poses")


def _chain(x_init, steps_rng, cfg, bank, draw_source, predict, log):
    """One backward chain; draw_source(rng) -> source index, predict(x, t, j) -> eps."""
    sched = cfg.sched
    n = sched.T
    x = x_init.copy()
    j = None
    for t in range(n, 0, -1):
        if j is None or cfg.resample_per_step:
            j = draw_source(steps_rng)
        eps = clamp_implied_x0(x, t, predict(x, t, j), sched)
        k = t - 1
        if t == 1:
            noise = np.zeros_like(x)
        elif k >= cfg.t_prime and k in bank.eps:
            noise = bank.eps[k]
        else:
            noise = steps_rng.standard_normal(x.shape)
        x = backward_step(x, t, eps, noise, sched)
        log.append({"t": int(t), "source": int(j)})
    return np.clip(x, -1.0, 1.0)


def generate_sequence(x1, poses, cfg, predictor, seed, metadata=None):
    """Autoregressive generation of len(poses) frames from the first one.

    x1 (c, h, w) in [-1, 1] is frame 1 and is returned untouched. For each
    later frame the backward chain redraws its conditioning source uniformly
    from the window of prior frames and calls
    predictor(x_t, t, source_image, rel, (i, j)) for the noise estimate,
    where rel maps target-camera to source-camera coordinates. Output bits
    are a pure function of (x1, poses, seed, predictor).
    """
    if len(poses) == 0:
        raise PoseCountMismatch("need at least one pose (the input frame's)")
    x1 = np.asarray(x1)
    root = np.random.SeedSequence(seed)
    bank_seed = int(root.generate_state(1)[0])
    bank = make_noise_bank(bank_seed, cfg.sched, cfg.t_prime, x1.shape)
    children = root.spawn(len(poses))

    frames = [x1.copy()]
    source_log = []
    for i in range(2, len(poses) + 1):
        rng_i = np.random.default_rng(children[i - 1])
        candidates = window_indices(i, cfg.window)
        pose_i = poses[i - 1]

        def draw(rng):
            return sample_source_view(candidates, rng)

        def predict(x, t, j):
            rel = relative_pose(pose_i, poses[j - 1])
            return predictor(x, t, frames[j - 1], rel, (i, j))

        log = []
        frames.append(_chain(bank.x_init, rng_i, cfg, bank, draw, predict, log))
        source_log.append({"frame": i, "draws": log})

    meta = {"seed": int(seed), "bank_seed": bank_seed, "t_prime": cfg.t_prime,
            "window": cfg.window, "resample_per_step": cfg.resample_per_step,
            "source_log": source_log}
    if metadata:
        meta.update(metadata)
    return FrameSequence(frames=frames, poses=list(poses), metadata=meta)


def anchor_probabilities(anchor_poses, target_pose):
    """Draw probabilities proportional to inverse camera-center distance."""
    d = np.array([np.linalg.norm(a.center() - target_pose.center())
                  for a in anchor_poses])
    w = 1.0 / (d + DISTANCE_EPS)
    return w / w.sum()


def interpolate_views(anchors, target_poses, cfg, predictor, seed, metadata=None):
    """Generate each target pose conditioned stochastically on fixed anchors.

    anchors is a list of (frame, pose); per backward step the source anchor
    is drawn with probability inversely proportional to its camera-center
    distance to the target viewpoint. Targets are independent chains sharing
    one noise bank.
    """
    if len(anchors) < 2:
        raise TooFewAnchors(f"need >= 2 anchors, got {len(anchors)}")
    anchor_frames = [np.asarray(f) for f, _ in anchors]
    anchor_poses = [p for _, p in anchors]
    root = np.random.SeedSequence(seed)
    bank_seed = int(root.generate_state(1)[0])
    bank = make_noise_bank(bank_seed, cfg.sched, cfg.t_prime, anchor_frames[0].shape)
    children = root.spawn(max(len(target_poses), 1))

    frames = []
    source_log = []
    for i, pose_t in enumerate(target_poses):
        rng_i = np.random.default_rng(children[i])
        probs = anchor_probabilities(anchor_poses, pose_t)

        def draw(rng):
            return int(rng.choice(len(anchor_poses), p=probs))

        def predict(x, t, j):
            rel = relative_pose(pose_t, anchor_poses[j])
            return predictor(x, t, anchor_frames[j], rel, ("interp", i, j))

        log = []
        frames.append(_chain(bank.x_init, rng_i, cfg, bank, draw, predict, log))
        source_log.append({"target": i, "draws": log})

    meta = {"seed": int(seed), "bank_seed": bank_seed, "t_prime": cfg.t_prime,
            "anchor_count": len(anchors), "source_log": source_log}
    if metadata:
        meta.update(metadata)
    return FrameSequence(frames=frames, poses=list(target_poses), metadata=meta)


class DenoiserPredictor:
    """Adapts a denoiser checkpoint to the predictor callable.

    Memoizes source features by frame identity and weight matrices by pose
    pair key, so one instance should serve exactly one generation run.
    sched is the (possibly respaced) schedule the chain runs on; the time
    embedding is conditioned on the original-schedule index. epipolar=False
    swaps every gate for plain cross-view attention.
    """

    def __init__(self, den, K, sched, epipolar=True):
        self.den = den
        self.K = np.asarray(K, dtype=np.float64)
        self.sched = sched
        self.epipolar = epipolar
        self._feats = {}
        self._e = {}

    def __call__(self, x_t, t, source_image, rel, key):
        cfg = self.den.cfg
        t_orig = self.sched.original_step(t)
        feat_key = key[-1]
        feats = self._feats.get(feat_key)
        if feats is None:
            feats = encode_source(self.den, source_image)
            self._feats[feat_key] = feats
        if not self.epipolar:
            e_list = [None] * len(cfg.attention_resolutions)
        else:
            e_list = self._e.get(key)
            if e_list is None:
                per = weight_matrices_for(rel, self.K,
                                          (cfg.image_size, cfg.image_size),
                                          cfg.attention_resolutions)
                e_list = [per[r] for r in cfg.attention_resolutions]
                self._e[key] = e_list
        return denoise(self.den, x_t, t_orig, feats, e_list)


def save_sequence(out_dir, seq):
    """Numbered PNGs plus a JSON manifest of poses and generation metadata."""
    os.makedirs(out_dir, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        save_png(os.path.join(out_dir, f"frame_{i:03d}.png"), frame)
    manifest = {
        "frames": [f"frame_{i:03d}.png" for i in range(len(seq.frames))],
        "poses": [{"K": p.K.tolist(), "R": p.R.tolist(), "t": p.t.tolist()}
                  for p in seq.poses],
        "metadata": seq.metadata,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path
