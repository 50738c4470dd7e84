"""The three learnable components of the reconstruction pipeline.

* a residual coarse predictor refining the FBP image,
* a stack of small same-scale restoration subnetworks whose intermediate
  activations serve as multiscale texture features, and
* a four-level U-Net residual denoiser conditioned on the coarse image
  (channel concatenation), the noise level (sinusoidal embedding mapped to
  per-stage channel biases) and the texture features (1x1-projected and
  added at the matching encoder/decoder scales).

All forwards are deterministic pure functions of the parameter store; no
normalization or dropout anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class NetConfig:
    unet_channels: tuple[int, ...] = (32, 64, 128, 256)
    coarse_channels: int = 32
    coarse_layers: int = 5
    guidance_channels: int = 16
    n_scales: int = 4
    time_dim: int = 64
    use_coarse: bool = True
    use_guidance: bool = True

    def __post_init__(self):
        if len(self.unet_channels) != 4:
            raise ValueError("the denoiser uses exactly four encoder/decoder levels")
        if self.time_dim % 2:
            raise ValueError("time embedding dimension must be even")
        if self.coarse_layers < 2:
            raise ValueError("coarse predictor needs at least two layers")


@dataclass(frozen=True)
class ConditionBundle:
    """Conditioning inputs for the denoiser.

    ``x_c`` is the coarse estimate (the FBP image when the coarse predictor
    is disabled); ``feats`` holds one texture feature map per scale, spatial
    size input/2^k, or None when guidance is disabled.
    """

    x_c: Tensor
    feats: list[Tensor] | None = None


class ParamStore:
    """Ordered name -> parameter tensor map with its architecture config."""

    def __init__(self, config: NetConfig):
        self.config = config
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = T.parameter(data)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def param_count(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def zero_grads(self):
        for t in self._entries.values():
            t.grad = None

    def all_finite(self) -> bool:
        return all(t.is_finite() for t in self._entries.values())


def _kaiming(rng, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: NetConfig, seed: int) -> ParamStore:
    """Kaiming-uniform weights, zero biases, deterministic per seed."""
    rng = np.random.Generator(np.random.Philox(seed))
    store = ParamStore(config)

    def conv(name, c_in, c_out, k):
        store.add(f"{name}.w", _kaiming(rng, c_in * k * k, (c_out, c_in, k, k)))
        store.add(f"{name}.b", np.zeros(c_out))

    if config.use_coarse:
        ch = config.coarse_channels
        widths = [1] + [ch] * (config.coarse_layers - 1) + [1]
        for i in range(config.coarse_layers):
            conv(f"coarse.conv{i + 1}", widths[i], widths[i + 1], 3)

    if config.use_guidance:
        g = config.guidance_channels
        for k in range(1, config.n_scales + 1):
            conv(f"guide.s{k}.conv1", 1, g, 9)
            conv(f"guide.s{k}.conv2", g, g, 1)
            conv(f"guide.s{k}.conv3", g, 1, 5)

    ch = config.unet_channels
    enc_in = [2] + list(ch[:-1])
    for k in range(1, 5):
        conv(f"unet.enc{k}.conv1", enc_in[k - 1], ch[k - 1], 3)
        conv(f"unet.enc{k}.conv2", ch[k - 1], ch[k - 1], 3)
    dec_out = [ch[max(k - 2, 0)] for k in range(4, 0, -1)]  # 128, 64, 32, 32
    dec_in = [2 * ch[3]] + [2 * o for o in dec_out[:-1]]    # 512, 256, 128, 64
    for j, k in enumerate(range(4, 0, -1)):
        conv(f"unet.dec{k}.conv1", dec_in[j], dec_out[j], 3)
        conv(f"unet.dec{k}.conv2", dec_out[j], dec_out[j], 3)
    conv("unet.final", ch[0], 1, 3)

    d = config.time_dim
    stage_ch = {f"enc{k}": ch[k - 1] for k in range(1, 5)}
    stage_ch.update({f"dec{k}": dec_out[j] for j, k in enumerate(range(4, 0, -1))})
    for stage, c_out in stage_ch.items():
        conv(f"unet.time.{stage}.fc1", d, d, 1)
        conv(f"unet.time.{stage}.fc2", d, c_out, 1)

    if config.use_guidance:
        # encoder output at scale k and decoder input at scale k share the
        # same channel count, so both projections use the ch[k-1] ladder
        g = config.guidance_channels
        for k in range(1, 5):
            conv(f"unet.inj.enc{k}", g, ch[k - 1], 1)
        for k in range(4, 0, -1):
            conv(f"unet.inj.dec{k}", g, ch[k - 1], 1)

    return store


def _conv(store, name, x, padding="same"):
    return T.conv2d(x, store[f"{name}.w"], store[f"{name}.b"], padding)


def coarse_forward(store: ParamStore, x_fbp: Tensor) -> Tensor:
    """Residual coarse prediction: x + CNN(x), linear last layer."""
    cfg = store.config
    h = x_fbp
    for i in range(1, cfg.coarse_layers + 1):
        h = _conv(store, f"coarse.conv{i}", h)
        if i < cfg.coarse_layers:
            h = T.relu(h)
    return T.add(x_fbp, h)


def guidance_forward(store: ParamStore, x_c: Tensor) -> tuple[list[Tensor], list[Tensor]]:
    """Per-scale restoration outputs and their 16-channel latent features.

    Scale k sees the input downsampled by 2^k and restores it at that same
    scale; the post-activation output of the middle layer is the feature.
    """
    cfg = store.config
    n, _, h, w = x_c.shape
    div = 2 ** cfg.n_scales
    if h % div or w % div:
        raise ValueError(f"spatial dims must be divisible by {div}, got {h}x{w}")
    outs, feats = [], []
    x = x_c
    for k in range(1, cfg.n_scales + 1):
        x = T.avg_pool2(x)
        hid = T.relu(_conv(store, f"guide.s{k}.conv1", x))
        feat = T.relu(_conv(store, f"guide.s{k}.conv2", hid))
        outs.append(_conv(store, f"guide.s{k}.conv3", feat))
        feats.append(feat)
    return outs, feats


def _time_bias(store, stage, emb):
    h = T.leaky_relu(_conv(store, f"unet.time.{stage}.fc1", emb), 0.1)
    return _conv(store, f"unet.time.{stage}.fc2", h)


def _block(store, stage, x, emb):
    h = _conv(store, f"unet.{stage}.conv1", x)
    h = T.add_channel_bias(h, _time_bias(store, stage, emb))
    h = T.leaky_relu(h, 0.1)
    return T.leaky_relu(_conv(store, f"unet.{stage}.conv2", h), 0.1)


def denoiser_apply(store: ParamStore, x_t: Tensor, sigmas, bundle: ConditionBundle) -> Tensor:
    """Residual prediction for a batch at per-sample noise levels ``sigmas``."""
    cfg = store.config
    if x_t.shape != bundle.x_c.shape:
        raise ValueError(f"state/condition shape mismatch: {x_t.shape} vs {bundle.x_c.shape}")
    n, _, h, w = x_t.shape
    if h % 16 or w % 16:
        raise ValueError(f"spatial dims must be divisible by 16, got {h}x{w}")
    feats = bundle.feats
    if cfg.use_guidance:
        if feats is None or len(feats) != 4:
            raise ValueError("guidance enabled but bundle carries no texture features")
        for k, f in enumerate(feats, start=1):
            want = (n, cfg.guidance_channels, h >> k, w >> k)
            if f.shape != want:
                raise ValueError(f"feature {k} has shape {f.shape}, expected {want}")

    emb = T.sinusoidal_embedding(np.broadcast_to(np.asarray(sigmas, dtype=np.float64), (n,)),
                                 cfg.time_dim)
    x = T.concat_channels(x_t, bundle.x_c)

    skips = []
    for k in range(1, 5):
        e = _block(store, f"enc{k}", x, emb)
        skips.append(e)
        x = T.avg_pool2(e)
        if cfg.use_guidance:
            x = T.add(x, _conv(store, f"unet.inj.enc{k}", feats[k - 1]))

    for k in range(4, 0, -1):
        if cfg.use_guidance:
            x = T.add(x, _conv(store, f"unet.inj.dec{k}", feats[k - 1]))
        x = T.upsample_nearest2(x)
        x = T.concat_channels(x, skips[k - 1])
        x = _block(store, f"dec{k}", x, emb)

    return _conv(store, "unet.final", x)


def denoiser_forward(store: ParamStore, x_t: Tensor, t_index: int, sched,
                     bundle: ConditionBundle) -> Tensor:
    """Single-noise-level convenience wrapper keyed by a schedule grid index."""
    return denoiser_apply(store, x_t, sched.sigma(t_index), bundle)


def make_bundle(store: ParamStore, x_c: Tensor) -> ConditionBundle:
    feats = guidance_forward(store, x_c)[1] if store.config.use_guidance else None
    return ConditionBundle(x_c, feats)
