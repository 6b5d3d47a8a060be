"""Conditional UNet noise predictor with epipolar attention, plus its optimizer
and checkpoint plumbing.

The target branch is a small UNet over the noisy image; the source view enters
only through cross-view attention whose affinities are gated by epipolar weight
matrices. Source features come from a strided conv pyramid trained jointly with
the rest. Every attention site pairs a self-attention with an epipolar
attention right after it, at the resolutions named in the config; feeding
all-ones weight matrices (or passing None in their place) turns every
epipolar site into plain cross-view attention without touching a single other
code path.

Parameters live in one flat name -> Tensor dict whose insertion order is the
architecture walk; the checkpoint writer serializes that order verbatim.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as tc
from .tensor import Tensor, ShapeMismatch
from .attention import AttentionParams, FeatureMap, attend_tokens
from .diffusion import forward_marginal, diffusion_loss
from .geometry import epipolar_weight_matrix, scale_intrinsics

CHECKPOINT_MAGIC = b"PGDM"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class MissingWeightMatrix(ValueError):
    """An attention resolution has no epipolar weight matrix supplied."""


class BadCheckpoint(ValueError):
    """Checkpoint bytes do not parse under the expected layout."""


def _num_groups(c):
    # largest of 8/4/2/1 dividing c; norms stay usable for tiny test configs
    for g in (8, 4, 2, 1):
        if c % g == 0:
            return g
    return 1


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 16
    in_channels: int = 3
    base_channels: int = 32
    channel_multiples: tuple = (1, 2)
    res_blocks_per_level: int = 1
    attention_resolutions: tuple = (8, 4)
    head_channels: int = 16

    def __post_init__(self):
        object.__setattr__(self, "channel_multiples", tuple(int(m) for m in self.channel_multiples))
        object.__setattr__(self, "attention_resolutions",
                           tuple(sorted((int(r) for r in self.attention_resolutions), reverse=True)))
        if not self.channel_multiples or any(m < 1 for m in self.channel_multiples):
            raise ValueError(f"channel_multiples must be positive, got {self.channel_multiples}")
        if self.res_blocks_per_level < 1:
            raise ValueError(f"res_blocks_per_level must be >= 1, got {self.res_blocks_per_level}")
        if self.base_channels < 1 or self.in_channels < 1 or self.head_channels < 1:
            raise ValueError("channel counts must be positive")
        levels = len(self.channel_multiples)
        if self.image_size % (1 << levels) != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2^{levels} levels")
        table = self.resolution_channels()
        for r in self.attention_resolutions:
            if self.image_size % r != 0:
                raise ValueError(f"attention resolution {r} does not divide image_size {self.image_size}")
            if r not in table:
                raise ValueError(
                    f"attention resolution {r} is not a level resolution {sorted(table)}")
            if table[r] % self.head_channels != 0:
                raise ValueError(
                    f"channels {table[r]} at resolution {r} not a multiple of head_channels {self.head_channels}")

    def resolution_channels(self):
        """Map of level resolution -> channel width; the bottom entry is the
        middle block one octave below the last level."""
        table = {}
        for lvl, mult in enumerate(self.channel_multiples):
            table[self.image_size >> lvl] = self.base_channels * mult
        table[self.image_size >> len(self.channel_multiples)] = (
            self.base_channels * self.channel_multiples[-1])
        return table

    @property
    def emb_channels(self):
        return 4 * self.base_channels

    @property
    def middle_resolution(self):
        return self.image_size >> len(self.channel_multiples)


def _res_block_shapes(prefix, c_in, c_out, emb):
    yield f"{prefix}.gn1.g", (c_in,)
    yield f"{prefix}.gn1.b", (c_in,)
    yield f"{prefix}.conv1.w", (c_out, c_in, 3, 3)
    yield f"{prefix}.conv1.b", (c_out,)
    yield f"{prefix}.emb.w", (emb, 2 * c_out)
    yield f"{prefix}.emb.b", (2 * c_out,)
    yield f"{prefix}.conv2.w", (c_out, c_out, 3, 3)
    yield f"{prefix}.conv2.b", (c_out,)
    if c_in != c_out:
        yield f"{prefix}.skip.w", (c_out, c_in, 1, 1)
        yield f"{prefix}.skip.b", (c_out,)


def _attn_site_shapes(prefix, c):
    yield f"{prefix}.gn_self.g", (c,)
    yield f"{prefix}.gn_self.b", (c,)
    for w in ("wq", "wk", "wv", "wo"):
        yield f"{prefix}.self.{w}", (c, c)
    yield f"{prefix}.gn_epi.g", (c,)
    yield f"{prefix}.gn_epi.b", (c,)
    for w in ("wq", "wk", "wv", "wo"):
        yield f"{prefix}.epi.{w}", (c, c)


def _shape_table(cfg):
    """Every parameter name and shape, in architecture order. init_denoiser,
    param_count and the checkpoint writer all walk this one generator."""
    emb = cfg.emb_channels
    table = cfg.resolution_channels()
    levels = len(cfg.channel_multiples)
    attn = set(cfg.attention_resolutions)

    yield "temb.mlp1.w", (emb, emb)
    yield "temb.mlp1.b", (emb,)
    yield "temb.mlp2.w", (emb, emb)
    yield "temb.mlp2.b", (emb,)

    yield "stem.w", (cfg.base_channels, cfg.in_channels, 3, 3)
    yield "stem.b", (cfg.base_channels,)

    c_prev = cfg.base_channels
    for lvl in range(levels):
        res = cfg.image_size >> lvl
        c = table[res]
        for b in range(cfg.res_blocks_per_level):
            yield from _res_block_shapes(f"enc{lvl}.res{b}", c_prev if b == 0 else c, c, emb)
        if res in attn:
            yield from _attn_site_shapes(f"enc{lvl}.attn", c)
        yield f"enc{lvl}.down.w", (c, c, 3, 3)
        yield f"enc{lvl}.down.b", (c,)
        c_prev = c

    c_mid = table[cfg.middle_resolution]
    yield from _res_block_shapes("mid.res0", c_prev, c_mid, emb)
    if cfg.middle_resolution in attn:
        yield from _attn_site_shapes("mid.attn", c_mid)
    yield from _res_block_shapes("mid.res1", c_mid, c_mid, emb)
    c_prev = c_mid

    for lvl in reversed(range(levels)):
        res = cfg.image_size >> lvl
        c = table[res]
        yield f"dec{lvl}.up.w", (c, c_prev, 3, 3)
        yield f"dec{lvl}.up.b", (c,)
        for b in range(cfg.res_blocks_per_level):
            yield from _res_block_shapes(f"dec{lvl}.res{b}", 2 * c if b == 0 else c, c, emb)
        if res in attn:
            yield from _attn_site_shapes(f"dec{lvl}.attn", c)
        c_prev = c

    yield "out.gn.g", (c_prev,)
    yield "out.gn.b", (c_prev,)
    yield "out.conv.w", (cfg.in_channels, c_prev, 3, 3)
    yield "out.conv.b", (cfg.in_channels,)

    # source pyramid: stride-2 stack emitting a head at each attention resolution
    yield "src.stem.w", (cfg.base_channels, cfg.in_channels, 3, 3)
    yield "src.stem.b", (cfg.base_channels,)
    c_src = cfg.base_channels
    if cfg.image_size in attn:
        yield f"src.head{cfg.image_size}.w", (table[cfg.image_size], c_src, 3, 3)
        yield f"src.head{cfg.image_size}.b", (table[cfg.image_size],)
    res = cfg.image_size
    min_attn = min(attn) if attn else cfg.image_size
    k = 0
    while res > min_attn:
        k += 1
        res //= 2
        c = table[res]
        yield f"src.down{k}.w", (c, c_src, 3, 3)
        yield f"src.down{k}.b", (c,)
        if res in attn:
            yield f"src.head{res}.w", (c, c)  # 1x1 head written as a linear map
            yield f"src.head{res}.b", (c,)
        c_src = c


def param_count(cfg):
    """Total parameter count as a pure function of the config.

    Per piece, with E = 4*base, c the block width and k its input width:
      time MLP                    2*E*(E+1)
      3x3 conv k->c               9*k*c + c
      residual block k->c         2*k + (9*k*c + c) + (E*2c + 2c) + (9*c*c + c)
                                  [+ k*c + c when k != c, the 1x1 skip]
      attention site (width c)    2*(2*c + 4*c*c)
      source head at res r        1x1 map c_r*c_r + c_r (3x3 conv at full res)
    summed over the encoder/middle/decoder walk and the source pyramid.
    """
    return sum(int(np.prod(shape)) for _, shape in _shape_table(cfg))


@dataclass
class Denoiser:
    cfg: DenoiserConfig
    params: dict = field(default_factory=dict)
    dtype: np.dtype = np.float32

    def attention_params(self, prefix):
        c = self.params[f"{prefix}.wo"].shape[0]
        return AttentionParams(
            wq=self.params[f"{prefix}.wq"], wk=self.params[f"{prefix}.wk"],
            wv=self.params[f"{prefix}.wv"], wo=self.params[f"{prefix}.wo"],
            heads=c // self.cfg.head_channels, head_channels=self.cfg.head_channels)

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()


def init_denoiser(cfg, seed=0, dtype=np.float32, zero_init=True):
    """Fresh parameters. zero_init zeroes each residual block's second conv,
    every attention output projection and the final conv, which makes the
    whole net the zero function at step 0 (so the first loss sits near 1 on
    unit-variance noise); turn it off to exercise every path in gradient
    checks."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    params = {}
    for name, shape in _shape_table(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape, dtype=dtype)
        elif leaf == "b" and len(shape) == 1:
            data = np.zeros(shape, dtype=dtype)
        elif zero_init and (name.endswith("conv2.w") or name == "out.conv.w"
                            or name.endswith(".wo")):
            data = np.zeros(shape, dtype=dtype)
        elif len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            data = (rng.standard_normal(shape) * fan_in ** -0.5).astype(dtype)
        else:
            data = (rng.standard_normal(shape) * shape[0] ** -0.5).astype(dtype)
        params[name] = Tensor(data, requires_grad=True)
    return Denoiser(cfg=cfg, params=params, dtype=dtype)


# ---------------------------------------------------------------------------
# forward pass

def time_embedding(t, dim, dtype):
    """Sinusoidal features of the (pre-respacing) step index, (n, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    out = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if out.shape[1] < dim:  # odd dim pads a zero column
        out = np.pad(out, ((0, 0), (0, dim - out.shape[1])))
    return out.astype(dtype)


def _conv(den, prefix, x, stride=1, pad=1):
    w = den.params[f"{prefix}.w"]
    b = den.params[f"{prefix}.b"]
    out = tc.conv2d(x, w, stride=stride, pad=pad)
    return tc.add(out, tc.reshape(b, (1, b.shape[0], 1, 1)))


def _gn_affine(den, prefix, x):
    c = x.shape[1]
    g = tc.reshape(den.params[f"{prefix}.g"], (1, c, 1, 1))
    b = tc.reshape(den.params[f"{prefix}.b"], (1, c, 1, 1))
    return tc.add(tc.mul(tc.group_norm(x, _num_groups(c)), g), b)


def _film(den, prefix, x, emb):
    c = x.shape[1]
    sb = tc.add(tc.matmul(emb, den.params[f"{prefix}.w"]),
                tc.reshape(den.params[f"{prefix}.b"], (1, 2 * c)))
    s = tc.reshape(tc.slice_axis(sb, 1, 0, c), (x.shape[0], c, 1, 1))
    t = tc.reshape(tc.slice_axis(sb, 1, c, 2 * c), (x.shape[0], c, 1, 1))
    return tc.add(tc.mul(x, tc.add(s, Tensor(np.ones((), dtype=x.dtype)))), t)


def _res_block(den, prefix, x, emb):
    c_in = x.shape[1]
    c_out = den.params[f"{prefix}.conv1.w"].shape[0]
    h = _gn_affine(den, f"{prefix}.gn1", x)
    h = _conv(den, f"{prefix}.conv1", tc.silu(h))
    h = tc.group_norm(h, _num_groups(c_out))
    h = _film(den, f"{prefix}.emb", h, emb)
    h = _conv(den, f"{prefix}.conv2", tc.silu(h))
    sk = x if c_in == c_out else _conv(den, f"{prefix}.skip", x, pad=0)
    return tc.add(sk, h)


def _to_tokens(x):
    n, c, h, w = x.shape
    return tc.reshape(tc.transpose(x, (0, 2, 3, 1)), (n, h * w, c))


def _from_tokens(tok, c, h, w):
    n = tok.shape[0]
    return tc.transpose(tc.reshape(tok, (n, h, w, c)), (0, 3, 1, 2))


def _attn_site(den, prefix, x, src_tokens, e):
    # e is the (n, hw, hw) epipolar gate, or None for the cross-view ablation
    n, c, h, w = x.shape
    q = _to_tokens(_gn_affine(den, f"{prefix}.gn_self", x))
    out = attend_tokens(q, q, den.attention_params(f"{prefix}.self"))
    x = tc.add(x, _from_tokens(out, c, h, w))
    q = _to_tokens(_gn_affine(den, f"{prefix}.gn_epi", x))
    out = attend_tokens(q, src_tokens, den.attention_params(f"{prefix}.epi"), weight=e)
    return tc.add(x, _from_tokens(out, c, h, w))


def encode_source_batch(den, x_src):
    """Source feature pyramid for a (n, c, H, W) batch; dict res -> (n, c_r, res, res)."""
    if not isinstance(x_src, Tensor):
        x_src = Tensor(np.asarray(x_src, dtype=den.dtype))
    cfg = den.cfg
    n, c, hh, ww = x_src.shape
    if (c, hh, ww) != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise ShapeMismatch(
            f"source batch {x_src.shape} does not match config "
            f"({cfg.in_channels}, {cfg.image_size}, {cfg.image_size})")
    attn = set(cfg.attention_resolutions)
    feats = {}
    h = tc.silu(_conv(den, "src.stem", x_src))
    if cfg.image_size in attn:
        feats[cfg.image_size] = _conv(den, f"src.head{cfg.image_size}", h)
    res = cfg.image_size
    min_attn = min(attn) if attn else cfg.image_size
    k = 0
    while res > min_attn:
        k += 1
        res //= 2
        h = tc.silu(_conv(den, f"src.down{k}", h, stride=2))
        if res in attn:
            tok = _to_tokens(h)
            head = tc.add(tc.matmul(tok, den.params[f"src.head{res}.w"]),
                          tc.reshape(den.params[f"src.head{res}.b"], (1, 1, -1)))
            feats[res] = _from_tokens(head, h.shape[1], res, res)
    return feats


def encode_source(den, x_src):
    """Single-image wrapper: (c, H, W) in [-1, 1] -> list of FeatureMap, one per
    attention resolution in descending order."""
    x = np.asarray(x_src, dtype=den.dtype)
    if x.ndim != 3:
        raise ShapeMismatch(f"source image must be (c, h, w), got {x.shape}")
    with tc.no_grad():
        feats = encode_source_batch(den, x[None])
    return [FeatureMap(values=Tensor(feats[r].data[0]))
            for r in den.cfg.attention_resolutions]


def denoise_batch(den, x_t, t, src_feats, e_maps):
    """Noise prediction for a batch.

    x_t (n, c, H, W); t (n,) original-schedule step indices; src_feats maps
    attention resolution -> (n, c_r, r, r) Tensor; e_maps maps resolution ->
    (n, r*r, r*r) weights, with None standing for the plain cross-view
    ablation at that resolution. Taped when gradients are enabled.
    """
    cfg = den.cfg
    if not isinstance(x_t, Tensor):
        x_t = Tensor(np.asarray(x_t, dtype=den.dtype))
    if x_t.ndim != 4 or x_t.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise ShapeMismatch(
            f"x_t {x_t.shape} does not match config "
            f"(n, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size})")
    n = x_t.shape[0]
    attn = set(cfg.attention_resolutions)
    src_tok = {}
    e_arr = {}
    for r in cfg.attention_resolutions:
        if r not in e_maps:
            raise MissingWeightMatrix(f"no weight matrix for attention resolution {r}")
        if r not in src_feats:
            raise ShapeMismatch(f"no source features for attention resolution {r}")
        e = e_maps[r]
        if e is not None:
            e = np.asarray(e, dtype=den.dtype)
            if e.shape != (n, r * r, r * r):
                raise MissingWeightMatrix(
                    f"weight matrix for resolution {r} has shape {e.shape}, "
                    f"want ({n}, {r * r}, {r * r})")
        fm = src_feats[r]
        src_tok[r] = _to_tokens(tc.as_tensor(fm))
        e_arr[r] = e

    emb = time_embedding(t, cfg.emb_channels, den.dtype)
    if emb.shape[0] != n:
        raise ShapeMismatch(f"t has {emb.shape[0]} entries for batch of {n}")
    emb = tc.add(tc.matmul(Tensor(emb), den.params["temb.mlp1.w"]),
                 tc.reshape(den.params["temb.mlp1.b"], (1, -1)))
    emb = tc.add(tc.matmul(tc.silu(emb), den.params["temb.mlp2.w"]),
                 tc.reshape(den.params["temb.mlp2.b"], (1, -1)))
    emb = tc.silu(emb)

    levels = len(cfg.channel_multiples)
    h = _conv(den, "stem", x_t)
    skips = []
    for lvl in range(levels):
        res = cfg.image_size >> lvl
        for b in range(cfg.res_blocks_per_level):
            h = _res_block(den, f"enc{lvl}.res{b}", h, emb)
        if res in attn:
            h = _attn_site(den, f"enc{lvl}.attn", h, src_tok[res], e_arr[res])
        skips.append(h)
        h = _conv(den, f"enc{lvl}.down", h, stride=2)

    h = _res_block(den, "mid.res0", h, emb)
    if cfg.middle_resolution in attn:
        r = cfg.middle_resolution
        h = _attn_site(den, "mid.attn", h, src_tok[r], e_arr[r])
    h = _res_block(den, "mid.res1", h, emb)

    for lvl in reversed(range(levels)):
        res = cfg.image_size >> lvl
        h = tc.bilinear_resize(h, res, res)
        h = _conv(den, f"dec{lvl}.up", h)
        h = tc.concat([h, skips[lvl]], axis=1)
        for b in range(cfg.res_blocks_per_level):
            h = _res_block(den, f"dec{lvl}.res{b}", h, emb)
        if res in attn:
            h = _attn_site(den, f"dec{lvl}.attn", h, src_tok[res], e_arr[res])

    h = tc.silu(_gn_affine(den, "out.gn", h))
    return _conv(den, "out.conv", h)


def denoise(den, x_t, t, src_feats, e_list):
    """Single-image entry point.

    x_t (c, H, W); src_feats and e_list each hold one entry per attention
    resolution, descending, as produced by encode_source and the geometry
    module. Deterministic given parameters and inputs.
    """
    x = np.asarray(x_t, dtype=den.dtype)
    if x.ndim != 3:
        raise ShapeMismatch(f"x_t must be (c, h, w), got {x.shape}")
    rs = den.cfg.attention_resolutions
    if len(e_list) != len(rs):
        raise MissingWeightMatrix(
            f"need {len(rs)} weight matrices for resolutions {rs}, got {len(e_list)}")
    if len(src_feats) != len(rs):
        raise ShapeMismatch(f"need {len(rs)} source feature maps, got {len(src_feats)}")
    feats = {}
    e_maps = {}
    for r, fm, e in zip(rs, src_feats, e_list):
        v = fm.values if isinstance(fm, FeatureMap) else tc.as_tensor(fm)
        if v.shape[1:] != (r, r):
            raise ShapeMismatch(f"source features for resolution {r} have shape {v.shape}")
        feats[r] = Tensor(v.data[None])
        if e is None:
            e_maps[r] = None
            continue
        ev = e.values if hasattr(e, "values") else np.asarray(e)
        if ev.shape != (r * r, r * r):
            raise MissingWeightMatrix(
                f"weight matrix for resolution {r} has shape {ev.shape}, want ({r * r}, {r * r})")
        e_maps[r] = ev[None]
    with tc.no_grad():
        out = denoise_batch(den, x[None], np.array([int(t)]), feats, e_maps)
    return out.data[0]


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainExample:
    """One conditioned denoising example: clean target, clean source, and the
    target->source relative pose with the shared intrinsics."""

    x_tgt: np.ndarray
    x_src: np.ndarray
    rel: object
    K: np.ndarray


def weight_matrices_for(rel, K, image_hw, resolutions):
    """Epipolar weight matrix per attention resolution for one pose pair."""
    out = {}
    for r in resolutions:
        Kr = scale_intrinsics(K, image_hw, (r, r))
        out[r] = epipolar_weight_matrix(rel, Kr, r, r).values
    return out


def train_step(den, opt_state, batch, sched, rng, lr=3e-4,
               variance_preserving=True, epipolar=True,
               e_cache=None, cache_keys=None):
    """One optimization step; returns the scalar loss.

    Per example: t ~ Uniform[1, T], eps ~ N(0, I), x_t from the forward
    marginal, source conditioning through the encoder and the example's
    epipolar weight matrices. epipolar=False trains the cross-view ablation
    (no gating, same parameters and RNG consumption otherwise). e_cache
    (optional dict) memoizes weight matrices under the caller's cache_keys,
    one key per example.
    """
    if len(batch) == 0:
        raise ValueError("train_step needs a nonempty batch")
    cfg = den.cfg
    s = cfg.image_size
    n = len(batch)
    ts = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal((n, cfg.in_channels, s, s)).astype(den.dtype)
    x_t = np.empty_like(eps)
    for i, ex in enumerate(batch):
        x_t[i] = forward_marginal(ex.x_tgt.astype(den.dtype), int(ts[i]), eps[i], sched,
                                  variance_preserving=variance_preserving)
    if epipolar:
        e_maps = {r: np.empty((n, r * r, r * r), dtype=den.dtype)
                  for r in cfg.attention_resolutions}
        for i, ex in enumerate(batch):
            key = cache_keys[i] if cache_keys is not None else None
            per_res = None if e_cache is None or key is None else e_cache.get(key)
            if per_res is None:
                per_res = weight_matrices_for(ex.rel, ex.K, (s, s), cfg.attention_resolutions)
                if e_cache is not None and key is not None:
                    e_cache[key] = per_res
            for r in cfg.attention_resolutions:
                e_maps[r][i] = per_res[r]
    else:
        e_maps = {r: None for r in cfg.attention_resolutions}
    x_src = np.stack([ex.x_src for ex in batch]).astype(den.dtype)

    den.zero_grads()
    tc.reset_tape()
    feats = encode_source_batch(den, x_src)
    pred = denoise_batch(den, x_t, ts, feats, e_maps)
    loss = diffusion_loss(Tensor(eps), pred)
    value = float(loss.item())
    tc.backward(loss)
    grads = {name: p.grad for name, p in den.params.items() if p.grad is not None}
    tc.adam_step(den.params, grads, opt_state, lr=lr)
    den.zero_grads()
    return value


# ---------------------------------------------------------------------------
# checkpoints

def _write_tensor(fh, name, data):
    raw = name.encode("utf-8")
    fh.write(np.uint32(len(raw)).tobytes())
    fh.write(raw)
    tag = _DTYPE_TAGS.get(np.dtype(data.dtype))
    if tag is None:
        raise BadCheckpoint(f"unsupported dtype {data.dtype} for '{name}'")
    fh.write(np.uint8(tag).tobytes())
    fh.write(np.uint32(data.ndim).tobytes())
    for d in data.shape:
        fh.write(np.uint32(d).tobytes())
    fh.write(np.ascontiguousarray(data).astype(_TAG_DTYPES[tag]).tobytes())


def _read_exact(fh, count, what):
    raw = fh.read(count)
    if len(raw) != count:
        raise BadCheckpoint(f"truncated checkpoint while reading {what}")
    return raw


def _read_tensor(fh):
    head = fh.read(4)
    if not head:
        return None
    name_len = int(np.frombuffer(head, dtype="<u4")[0])
    name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
    tag = int(np.frombuffer(_read_exact(fh, 1, "dtype tag"), dtype="u1")[0])
    if tag not in _TAG_DTYPES:
        raise BadCheckpoint(f"unknown dtype tag {tag} for '{name}'")
    rank = int(np.frombuffer(_read_exact(fh, 4, "rank"), dtype="<u4")[0])
    dims = tuple(int(d) for d in np.frombuffer(_read_exact(fh, 4 * rank, "dims"), dtype="<u4"))
    dt = _TAG_DTYPES[tag]
    raw = _read_exact(fh, int(np.prod(dims, dtype=np.int64)) * dt.itemsize, f"data of '{name}'")
    data = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    return name, data


def save_checkpoint(path, den, opt_state=None, step=0, rng=None):
    """Little-endian binary: magic, u32 version, length-prefixed JSON header
    (config echo, step counter, RNG state), then named tensors. Optimizer
    moments ride along as opt.m.<name> / opt.v.<name>."""
    header = {
        "config": asdict(den.cfg),
        "dtype": str(np.dtype(den.dtype)),
        "step": int(step),
        "opt_t": 0 if opt_state is None else int(opt_state.t),
        "rng": None if rng is None else rng.bit_generator.state,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.uint32(CHECKPOINT_VERSION).tobytes())
        fh.write(np.uint32(len(blob)).tobytes())
        fh.write(blob)
        for name, p in den.params.items():
            _write_tensor(fh, name, p.data)
        if opt_state is not None:
            for name in den.params:
                _write_tensor(fh, f"opt.m.{name}", opt_state.m[name])
            for name in den.params:
                _write_tensor(fh, f"opt.v.{name}", opt_state.v[name])


def load_checkpoint(path):
    """Returns (denoiser, opt_state or None, step, rng or None)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise BadCheckpoint(f"{path} is not a checkpoint (bad magic)")
        version = int(np.frombuffer(_read_exact(fh, 4, "version"), dtype="<u4")[0])
        if version != CHECKPOINT_VERSION:
            raise BadCheckpoint(f"unsupported checkpoint version {version}")
        blob_len = int(np.frombuffer(_read_exact(fh, 4, "header length"), dtype="<u4")[0])
        header = json.loads(_read_exact(fh, blob_len, "header").decode("utf-8"))
        tensors = {}
        while True:
            rec = _read_tensor(fh)
            if rec is None:
                break
            tensors[rec[0]] = rec[1]

    raw_cfg = dict(header["config"])
    raw_cfg["channel_multiples"] = tuple(raw_cfg["channel_multiples"])
    raw_cfg["attention_resolutions"] = tuple(raw_cfg["attention_resolutions"])
    cfg = DenoiserConfig(**raw_cfg)
    dtype = np.dtype(header["dtype"])
    params = {}
    for name, shape in _shape_table(cfg):
        if name not in tensors:
            raise BadCheckpoint(f"checkpoint is missing parameter '{name}'")
        data = tensors[name]
        if data.shape != shape:
            raise BadCheckpoint(f"parameter '{name}' has shape {data.shape}, want {shape}")
        params[name] = Tensor(data.astype(dtype, copy=False), requires_grad=True)
    den = Denoiser(cfg=cfg, params=params, dtype=dtype)

    opt_state = None
    if any(k.startswith("opt.m.") for k in tensors):
        opt_state = tc.AdamState(t=int(header.get("opt_t", 0)))
        for name in params:
            mk, vk = f"opt.m.{name}", f"opt.v.{name}"
            if mk not in tensors or vk not in tensors:
                raise BadCheckpoint(f"optimizer state incomplete for '{name}'")
            opt_state.m[name] = tensors[mk].astype(dtype, copy=False)
            opt_state.v[name] = tensors[vk].astype(dtype, copy=False)

    rng = None
    if header.get("rng") is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng"]
    return den, opt_state, int(header["step"]), rng
