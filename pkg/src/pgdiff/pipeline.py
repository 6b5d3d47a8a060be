"""End-to-end plumbing shared by the CLI and the test suite.

Everything here is deterministic given (config, seed): dataset generation,
the training loop, validation loss, next-view evaluation against the
copy-the-source baseline, sequence sampling and report writing. Stream
derivation is explicit throughout; each stage takes its own child of the
run seed so stages can be rerun independently.
"""

from __future__ import annotations

import json
import os
import time

import numpy as np

from . import tensor as tc
from .tensor import Tensor
from .config import to_dict, config_hash
from .diffusion import (cosine_schedule, respace, backward_step,
                        clamp_implied_x0, diffusion_loss)
from .denoiser import (TrainExample, init_denoiser, train_step, encode_source_batch,
                       denoise_batch, weight_matrices_for, save_checkpoint,
                       load_checkpoint)
from .geometry import relative_pose
from .imgio import load_png
from .metrics import EvalReport, psnr, ssim, flow_warp_error
from .scenes import (build_dataset, load_scene_dir, generate_scene, render_view,
                     smooth_trajectory, default_intrinsics)
from .sequence import (SamplerConfig, DenoiserPredictor, FrameSequence,
                       generate_sequence, interpolate_views, save_sequence)


def _child_seed(seed, *key):
    """Stable named substream of the run seed."""
    return int(np.random.SeedSequence([int(seed), *key]).generate_state(1)[0])


def write_manifest(out_dir, command, cfg, extra=None):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "manifest.json")
    doc = {}
    if os.path.exists(path):
        # sequence directories already carry a manifest (frames, poses,
        # metadata); the run record joins it instead of clobbering it
        with open(path) as fh:
            doc = json.load(fh)
    doc.update({"command": command, "config": to_dict(cfg),
                "config_hash": config_hash(cfg)})
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    return path


# ---------------------------------------------------------------------------
# data

def gen_data(cfg, data_dir, threads=None):
    """Training and held-out scene sets under data_dir/{train,eval}."""
    d = cfg.dataset
    train_dir = os.path.join(data_dir, "train")
    eval_dir = os.path.join(data_dir, "eval")
    build_dataset(train_dir, d.n_scenes, d.frames_per_scene,
                  _child_seed(cfg.seed, 1), h=d.height, w=d.width,
                  trajectory=d.trajectory, threads=threads)
    if d.eval_scenes > 0:
        build_dataset(eval_dir, d.eval_scenes, d.frames_per_scene,
                      _child_seed(cfg.seed, 2), h=d.height, w=d.width,
                      trajectory=d.trajectory, threads=threads)
    return train_dir, eval_dir


def load_split(data_dir, which):
    """List of (frames, poses, flows) for every scene of one split."""
    root = os.path.join(data_dir, which)
    if not os.path.isdir(root):
        raise FileNotFoundError(f"no '{which}' split under {data_dir}")
    scenes = []
    for name in sorted(os.listdir(root)):
        path = os.path.join(root, name)
        if os.path.isdir(path) and name.startswith("scene_"):
            scenes.append(load_scene_dir(path))
    if not scenes:
        raise FileNotFoundError(f"no scene directories under {root}")
    return scenes


def _draw_batch(scenes, batch_size, rng):
    """Random (target, source) frame pairs across scenes.

    Offsets are biased toward small |i - j|: evaluation generates the next
    view, and wide-baseline pairs of a panning path share little content.
    Both directions are drawn so relative poses cover both signs.
    """
    batch, keys = [], []
    for _ in range(batch_size):
        s = int(rng.integers(len(scenes)))
        frames, poses, _ = scenes[s]
        d = min(int(rng.choice([1, 1, 1, 2, 2, 3])), len(frames) - 1)
        lo = int(rng.integers(len(frames) - d))
        i, j = (lo + d, lo) if rng.random() < 0.5 else (lo, lo + d)
        rel = relative_pose(poses[i], poses[j])
        batch.append(TrainExample(x_tgt=frames[i], x_src=frames[j],
                                  rel=rel, K=poses[i].K))
        keys.append((s, i, j))
    return batch, keys


# ---------------------------------------------------------------------------
# training

def train(cfg, data_dir, out_dir, steps=None, epipolar=None, seed=None,
          progress=None):
    """Train a denoiser; writes ckpt.pgdm and losses.json, returns (den, losses).

    steps/epipolar/seed override the config values (used by the ablation
    protocol, which trains both variants from identical streams).
    """
    steps = cfg.training.steps if steps is None else steps
    epipolar = cfg.training.epipolar if epipolar is None else epipolar
    seed = cfg.seed if seed is None else seed
    scenes = load_split(data_dir, "train")
    sched = cosine_schedule(cfg.schedule.train_steps)
    den = init_denoiser(cfg.denoiser, seed=_child_seed(seed, 10))
    opt = tc.AdamState.for_params(den.params)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    e_cache = {}
    losses = []
    t0 = time.time()
    for step in range(1, steps + 1):
        batch, keys = _draw_batch(scenes, cfg.training.batch_size, rng)
        loss = train_step(den, opt, batch, sched, rng, lr=cfg.training.lr,
                          variance_preserving=cfg.schedule.variance_preserving,
                          epipolar=epipolar, e_cache=e_cache, cache_keys=keys)
        losses.append(loss)
        if progress and step % cfg.training.log_every == 0:
            recent = float(np.mean(losses[-cfg.training.log_every:]))
            progress(f"step {step}/{steps} loss {recent:.4f} "
                     f"({time.time() - t0:.0f}s)")
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "ckpt.pgdm")
    save_checkpoint(ckpt_path, den, opt, step=steps, rng=rng)
    with open(os.path.join(out_dir, "losses.json"), "w") as fh:
        json.dump({"losses": losses, "epipolar": epipolar, "steps": steps,
                   "seed": int(seed)}, fh)
    return den, losses


def batch_loss(den, batch, sched, rng, variance_preserving=True, epipolar=True,
               e_cache=None, cache_keys=None):
    """Forward-only denoising loss on one batch (no parameter update)."""
    from .diffusion import forward_marginal

    cfg = den.cfg
    s = cfg.image_size
    n = len(batch)
    ts = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal((n, cfg.in_channels, s, s)).astype(den.dtype)
    x_t = np.empty_like(eps)
    for i, ex in enumerate(batch):
        x_t[i] = forward_marginal(ex.x_tgt.astype(den.dtype), int(ts[i]), eps[i],
                                  sched, variance_preserving=variance_preserving)
    if epipolar:
        e_maps = {r: np.empty((n, r * r, r * r), dtype=den.dtype)
                  for r in cfg.attention_resolutions}
        for i, ex in enumerate(batch):
            key = cache_keys[i] if cache_keys is not None else None
            per = None if e_cache is None or key is None else e_cache.get(key)
            if per is None:
                per = weight_matrices_for(ex.rel, ex.K, (s, s), cfg.attention_resolutions)
                if e_cache is not None and key is not None:
                    e_cache[key] = per
            for r in cfg.attention_resolutions:
                e_maps[r][i] = per[r]
    else:
        e_maps = {r: None for r in cfg.attention_resolutions}
    x_src = np.stack([ex.x_src for ex in batch]).astype(den.dtype)
    with tc.no_grad():
        feats = encode_source_batch(den, x_src)
        pred = denoise_batch(den, x_t, ts, feats, e_maps)
        return float(diffusion_loss(Tensor(eps), pred).item())


def val_loss(den, scenes, cfg, seed, epipolar=True, n_batches=8):
    """Mean denoising loss over fixed validation batches.

    The batch, step and noise draws depend only on the seed, so two model
    variants scored with the same seed face identical inputs.
    """
    sched = cosine_schedule(cfg.schedule.train_steps)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 12]))
    e_cache = {}
    total = 0.0
    for _ in range(n_batches):
        batch, keys = _draw_batch(scenes, cfg.training.batch_size, rng)
        total += batch_loss(den, batch, sched, rng,
                            variance_preserving=cfg.schedule.variance_preserving,
                            epipolar=epipolar, e_cache=e_cache, cache_keys=keys)
    return total / n_batches


# ---------------------------------------------------------------------------
# evaluation

def sample_conditioned(den, sources, rels, K, sched, rng, epipolar=True):
    """Batched backward chains, each conditioned on one fixed source view."""
    cfg = den.cfg
    s = cfg.image_size
    n = len(sources)
    if epipolar:
        e_maps = {r: np.empty((n, r * r, r * r), dtype=den.dtype)
                  for r in cfg.attention_resolutions}
        for i, rel in enumerate(rels):
            per = weight_matrices_for(rel, K, (s, s), cfg.attention_resolutions)
            for r in cfg.attention_resolutions:
                e_maps[r][i] = per[r]
    else:
        e_maps = {r: None for r in cfg.attention_resolutions}
    with tc.no_grad():
        feats = encode_source_batch(den, np.stack(sources).astype(den.dtype))
        feats = {r: Tensor(v.data) for r, v in feats.items()}
        x = rng.standard_normal((n, cfg.in_channels, s, s))
        for t in range(sched.T, 0, -1):
            ts = np.full(n, sched.original_step(t))
            eps = denoise_batch(den, x.astype(den.dtype), ts, feats, e_maps).data
            eps = clamp_implied_x0(x, t, eps.astype(np.float64), sched)
            noise = rng.standard_normal(x.shape) if t > 1 else np.zeros_like(x)
            x = backward_step(x, t, eps, noise, sched)
    return np.clip(x, -1.0, 1.0)


def next_view_eval(den, scenes, cfg, seed, epipolar=True, max_pairs_per_scene=None):
    """Generate frame i+1 from frame i for consecutive held-out pairs.

    Returns per-pair records with the generated-frame PSNR and the
    copy-the-source baseline PSNR, plus the fraction of pairs where
    generation wins.
    """
    sched = respace(cosine_schedule(cfg.schedule.train_steps),
                    cfg.schedule.inference_steps)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 13]))
    records = []
    for s_idx, (frames, poses, _) in enumerate(scenes):
        n_pairs = len(frames) - 1
        if max_pairs_per_scene is not None:
            n_pairs = min(n_pairs, max_pairs_per_scene)
        sources = [frames[i] for i in range(n_pairs)]
        rels = [relative_pose(poses[i + 1], poses[i]) for i in range(n_pairs)]
        gen = sample_conditioned(den, sources, rels, poses[0].K, sched, rng,
                                 epipolar=epipolar)
        for i in range(n_pairs):
            records.append({
                "scene": s_idx, "pair": [i, i + 1],
                "psnr_generated": psnr(gen[i], frames[i + 1]),
                "psnr_copy_source": psnr(frames[i], frames[i + 1]),
            })
    wins = sum(1 for r in records if r["psnr_generated"] > r["psnr_copy_source"])
    return records, wins / len(records)


def eval_report(frames_out, frames_gt, flows, cfg_hash=""):
    """PSNR/SSIM on the first five frames against ground truth, plus the
    flow-warp error of the output frames under the ground-truth flows."""
    n_scored = min(5, len(frames_out), len(frames_gt))
    ps = [psnr(frames_out[i], frames_gt[i]) for i in range(n_scored)]
    ss = [ssim(frames_out[i], frames_gt[i]) for i in range(n_scored)]
    pair_flows = [f for f, _ in flows]
    pair_masks = [m for _, m in flows]
    warp = flow_warp_error(frames_out, pair_flows, pair_masks)
    return EvalReport(psnr=ps, ssim=ss, warp_error=warp,
                      frames_scored=n_scored, config_hash=cfg_hash)


def load_sequence_frames(seq_dir):
    """Frames of a generated sequence directory, in manifest order."""
    with open(os.path.join(seq_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    return [load_png(os.path.join(seq_dir, name)) for name in manifest["frames"]]


# ---------------------------------------------------------------------------
# sampling

def _scene_for_seed(cfg, seed, n_frames):
    scene = generate_scene(_child_seed(seed, 20))
    K = default_intrinsics(cfg.dataset.height, cfg.dataset.width)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 21]))
    poses = smooth_trajectory(rng, n_frames, K, cfg.dataset.trajectory)
    return scene, poses, K


def sample_cmd(cfg, ckpt_path, out_dir, seed, n_frames=None, epipolar=None):
    """Render frame 1 of a seed-derived scene, then generate the rest."""
    n_frames = cfg.dataset.frames_per_scene if n_frames is None else n_frames
    epipolar = cfg.training.epipolar if epipolar is None else epipolar
    den, _, step, _ = load_checkpoint(ckpt_path)
    scene, poses, K = _scene_for_seed(cfg, seed, n_frames)
    x1 = render_view(scene, poses[0], cfg.dataset.height, cfg.dataset.width).image
    sched = respace(cosine_schedule(cfg.schedule.train_steps),
                    cfg.schedule.inference_steps)
    scfg = SamplerConfig(sched=sched, t_prime=cfg.sampler.t_prime,
                         window=cfg.sampler.window,
                         resample_per_step=cfg.sampler.resample_per_step)
    pred = DenoiserPredictor(den, K, sched, epipolar=epipolar)
    seq = generate_sequence(x1, poses, scfg, pred, seed=_child_seed(seed, 22),
                            metadata={"config_hash": config_hash(cfg),
                                      "ckpt_step": step, "epipolar": epipolar})
    return save_sequence(out_dir, seq)


def interpolate_cmd(cfg, ckpt_path, out_dir, seed, n_frames=None, epipolar=None):
    """Anchor the ends of a seed-derived trajectory, generate the middle."""
    n_frames = cfg.dataset.frames_per_scene if n_frames is None else n_frames
    if n_frames < 3:
        raise ValueError(f"interpolation needs >= 3 poses, got {n_frames}")
    epipolar = cfg.training.epipolar if epipolar is None else epipolar
    den, _, step, _ = load_checkpoint(ckpt_path)
    scene, poses, K = _scene_for_seed(cfg, seed, n_frames)
    h, w = cfg.dataset.height, cfg.dataset.width
    anchors = [(render_view(scene, poses[0], h, w).image, poses[0]),
               (render_view(scene, poses[-1], h, w).image, poses[-1])]
    targets = list(poses[1:-1])
    sched = respace(cosine_schedule(cfg.schedule.train_steps),
                    cfg.schedule.inference_steps)
    scfg = SamplerConfig(sched=sched, t_prime=cfg.sampler.t_prime,
                         window=cfg.sampler.window,
                         resample_per_step=cfg.sampler.resample_per_step)
    pred = DenoiserPredictor(den, K, sched, epipolar=epipolar)
    seq = interpolate_views(anchors, targets, scfg, pred,
                            seed=_child_seed(seed, 23),
                            metadata={"config_hash": config_hash(cfg),
                                      "ckpt_step": step, "epipolar": epipolar})
    # saved with the rendered anchors at both ends so the directory is a
    # complete trajectory; metadata records which frames were given
    full = FrameSequence(frames=[anchors[0][0]] + seq.frames + [anchors[1][0]],
                         poses=list(poses),
                         metadata={**seq.metadata,
                                   "anchor_indices": [0, n_frames - 1]})
    return save_sequence(out_dir, full)
