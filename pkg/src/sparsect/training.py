"""Dataset synthesis, losses, joint optimization and checkpointing.

The full pipeline per sample: rasterize a phantom, project it with the
sparse-view geometry, corrupt the line integrals with measurement noise,
reconstruct the streaky FBP image, refine it with the coarse predictor,
and train the conditional denoiser on bridge states between the FBP and
the ground truth.  All three losses are summed and minimized jointly, so
gradients from the denoising term also reach the coarse predictor and the
texture subnets.

Images entering the networks are in normalized [0, 1] attenuation units;
sinograms carry physical line integrals (normalized units times the
attenuation scale, per mm) so the noise model sees realistic photon
counts.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import bridge, fanbeam, networks, noise
from . import tensor as T
from .networks import ConditionBundle, NetConfig, ParamStore
from .phantoms import ImageGrid, default_grid, random_phantom, rasterize
from .tensor import Tensor

CHECKPOINT_MAGIC = b"PTDC"
CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    """Raised when optimization produces a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    image_n: int = 64
    n_views: int = 32
    lr: float = 5e-4
    iters: int = 5000
    batch: int = 4
    n_train_steps: int = 10
    beta_max: float = bridge.DEFAULT_BETA_MAX
    seed: int = 0
    i0: float = 1.0e6
    sigma_e2: float = 10.0
    mu_per_mm: float = 0.02          # normalized value 1.0 -> 0.02/mm attenuation
    use_coarse: bool = True
    use_guidance: bool = True
    w_content: float = 1.0
    w_guidance: float = 1.0
    w_diff: float = 1.0
    bridge_start: str = "fbp"        # "fbp" | "init": which image seeds the bridge
    supersample: int = 2
    k_range: tuple[int, int] = (4, 9)
    dtype: str = "float64"           # tensor compute precision for this run

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.iters < 1:
            raise ValueError("need at least one iteration")
        if self.bridge_start not in ("fbp", "init"):
            raise ValueError(f"bridge_start must be fbp or init, got {self.bridge_start!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    def apply_dtype(self) -> None:
        T.set_default_dtype(self.dtype)

    def net_config(self) -> NetConfig:
        return NetConfig(use_coarse=self.use_coarse, use_guidance=self.use_guidance)

    def grid(self) -> ImageGrid:
        return default_grid(self.image_n)

    def geometry(self) -> fanbeam.FanBeamGeometry:
        return fanbeam.scaled_geometry(self.image_n, self.n_views)

    def schedule(self) -> bridge.DiffusionSchedule:
        return bridge.build_schedule(self.n_train_steps, self.beta_max)


@dataclass
class Sample:
    x0: np.ndarray      # ground truth, normalized units
    y: np.ndarray       # noisy sparse sinogram, physical line integrals
    x_fbp: np.ndarray   # FBP of y, back in normalized units


_SPLIT_BLOCK = {"train": 0, "test": 1}


def _sample_seeds(cfg_seed: int, split: str, index: int) -> tuple[int, int]:
    ss = np.random.SeedSequence([cfg_seed, _SPLIT_BLOCK[split], index])
    a, b = ss.generate_state(2, dtype=np.uint64)
    return int(a), int(b)


def simulate_sample(x0: np.ndarray, cfg: TrainConfig, geom, grid, noise_seed: int) -> Sample:
    clean = cfg.mu_per_mm * fanbeam.forward_project(x0, geom, grid)
    y = noise.apply_noise(clean, noise.NoiseParams(cfg.i0, cfg.sigma_e2, noise_seed))
    x_fbp = fanbeam.fbp(y, geom, grid) / cfg.mu_per_mm
    return Sample(x0, y, x_fbp)


def make_dataset(n: int, cfg: TrainConfig, split: str = "train") -> list[Sample]:
    """n simulated samples, deterministic per (cfg.seed, split, index)."""
    if n < 1:
        raise ValueError("need at least one sample")
    if split not in _SPLIT_BLOCK:
        raise ValueError(f"unknown split {split!r}")
    grid = cfg.grid()
    geom = cfg.geometry()
    out = []
    for i in range(n):
        phantom_seed, noise_seed = _sample_seeds(cfg.seed, split, i)
        x0 = rasterize(random_phantom(phantom_seed, cfg.k_range, grid.fov_mm),
                       grid, cfg.supersample)
        out.append(simulate_sample(x0, cfg, geom, grid, noise_seed))
    return out


# ---------------------------------------------------------------------------
# losses


def loss_content(x_init: Tensor, x0: Tensor) -> Tensor:
    return T.mse(x_init, x0)


def downsample_pyramid(x0: Tensor, n_scales: int) -> list[Tensor]:
    out = []
    cur = x0
    for _ in range(n_scales):
        cur = T.avg_pool2(cur)
        out.append(cur)
    return out


def loss_guidance(sr_outputs: list[Tensor], x0: Tensor) -> Tensor:
    """Sum (not mean) over scales of the per-scale restoration error."""
    targets = downsample_pyramid(x0, len(sr_outputs))
    total = T.mse(sr_outputs[0], targets[0])
    for sr, tgt in zip(sr_outputs[1:], targets[1:]):
        total = T.add(total, T.mse(sr, tgt))
    return total


def loss_diff(eps_pred: Tensor, x_t: np.ndarray, x0: np.ndarray, t_index: int,
              sched: bridge.DiffusionSchedule) -> Tensor:
    target = bridge.epsilon_target(x_t, x0, t_index, sched)
    return T.mse(eps_pred, T.constant(target.reshape(eps_pred.shape)))


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, store: ParamStore):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, p in store.items():
            if p.grad is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad**2
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


# ---------------------------------------------------------------------------
# the joint training step


def _stack(samples: list[Sample], attr: str) -> np.ndarray:
    return np.stack([getattr(s, attr) for s in samples])[:, None]


def train_step(batch: list[Sample], store: ParamStore, opt: Adam, cfg: TrainConfig,
               sched: bridge.DiffusionSchedule, rng: np.random.Generator):
    """One joint optimization step on a batch; mutates store and opt.

    Returns a dict with the individual loss values.  Raises NumericError if
    the total loss is not finite.
    """
    x0_b = _stack(batch, "x0")
    fbp_b = _stack(batch, "x_fbp")
    x0_t = T.constant(x0_b)
    fbp_t = T.constant(fbp_b)

    if cfg.use_coarse:
        x_c = networks.coarse_forward(store, fbp_t)
    else:
        x_c = fbp_t

    l_content = loss_content(x_c, x0_t) if cfg.use_coarse else None

    if cfg.use_guidance:
        srs, feats = networks.guidance_forward(store, x_c)
        l_guidance = loss_guidance(srs, x0_t)
        bundle = ConditionBundle(x_c, feats)
    else:
        l_guidance = None
        bundle = ConditionBundle(x_c, None)

    # bridge states are data: sampled per-image at an interior grid index
    start_b = x_c.data if cfg.bridge_start == "init" else fbp_b
    t_idx = rng.integers(1, cfg.n_train_steps + 1, size=len(batch))
    x_t = np.empty_like(x0_b)
    target = np.empty_like(x0_b)
    sigmas = np.empty(len(batch))
    for j in range(len(batch)):
        x_t[j, 0] = bridge.q_sample(x0_b[j, 0], start_b[j, 0], int(t_idx[j]), sched, rng)
        target[j, 0] = bridge.epsilon_target(x_t[j, 0], x0_b[j, 0], int(t_idx[j]), sched)
        sigmas[j] = sched.sigma(int(t_idx[j]))

    eps = networks.denoiser_apply(store, T.constant(x_t), sigmas, bundle)
    l_diff = T.mse(eps, T.constant(target))

    total = T.scalar_mul(l_diff, cfg.w_diff)
    if l_content is not None:
        total = T.add(total, T.scalar_mul(l_content, cfg.w_content))
    if l_guidance is not None:
        total = T.add(total, T.scalar_mul(l_guidance, cfg.w_guidance))

    report = {
        "l_content": l_content.item() if l_content is not None else 0.0,
        "l_guidance": l_guidance.item() if l_guidance is not None else 0.0,
        "l_diff": l_diff.item(),
        "l_total": total.item(),
    }
    if not np.isfinite(report["l_total"]):
        raise NumericError(f"non-finite loss at optimizer step {opt.t + 1}: {report}")

    store.zero_grads()
    total.backward()
    opt.step(store)
    return report


def train_loop(pool: list[Sample], store: ParamStore, opt: Adam, cfg: TrainConfig,
               iters: int | None = None, log_every: int = 0, start_iter: int = 0,
               on_log=None):
    """Run optimization steps drawing batches from the pool with replacement."""
    sched = cfg.schedule()
    rng = noise.make_rng(cfg.seed + 77_000_000 + start_iter)
    n_iters = cfg.iters if iters is None else iters
    history = []
    for it in range(start_iter, start_iter + n_iters):
        idx = rng.integers(0, len(pool), size=cfg.batch)
        report = train_step([pool[i] for i in idx], store, opt, cfg, sched, rng)
        if log_every and (it + 1) % log_every == 0:
            history.append((it + 1, report))
            if on_log is not None:
                on_log(it + 1, report)
    return history


# ---------------------------------------------------------------------------
# inference


def reconstruct(store: ParamStore, y: np.ndarray, geom, grid: ImageGrid,
                cfg: TrainConfig, n_sample_steps: int, rng: np.random.Generator,
                stochastic: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Full pipeline on one sinogram: returns (x_init, x_out)."""
    sched = cfg.schedule()
    x_fbp = fanbeam.fbp(y, geom, grid) / cfg.mu_per_mm
    with T.no_grad():
        fbp_t = T.constant(x_fbp[None, None])
        x_c = networks.coarse_forward(store, fbp_t) if cfg.use_coarse else fbp_t
        bundle = networks.make_bundle(store, x_c)

        def den(x, sigma, cond):
            out = networks.denoiser_apply(store, T.constant(x[None, None]), sigma, cond)
            return out.data[0, 0]

        start = x_c.data[0, 0] if cfg.bridge_start == "init" else x_fbp
        x_out = bridge.sample_loop(den, start, bundle, n_sample_steps, sched, rng, stochastic)
    return x_c.data[0, 0], x_out


# ---------------------------------------------------------------------------
# checkpoints


def _cfg_to_kv(cfg: TrainConfig, extra: dict[str, str] | None = None) -> dict[str, str]:
    kv = {}
    for name in cfg.__dataclass_fields__:
        val = getattr(cfg, name)
        if isinstance(val, tuple):
            kv[name] = ",".join(str(v) for v in val)
        else:
            kv[name] = str(val)
    if extra:
        kv.update(extra)
    return kv


def _kv_to_cfg(kv: dict[str, str]) -> TrainConfig:
    kwargs = {}
    for name, f in TrainConfig.__dataclass_fields__.items():
        if name not in kv:
            continue
        raw = kv[name]
        typ = f.type
        if typ == "int":
            kwargs[name] = int(raw)
        elif typ == "float":
            kwargs[name] = float(raw)
        elif typ == "bool":
            kwargs[name] = raw == "True"
        elif name == "k_range":
            a, b = raw.split(",")
            kwargs[name] = (int(a), int(b))
        else:
            kwargs[name] = raw
    return TrainConfig(**kwargs)


def _write_entry(fh, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(arr.astype("<f4").tobytes())


def save_checkpoint(store: ParamStore, opt: Adam, cfg: TrainConfig, path,
                    extra: dict[str, str] | None = None) -> None:
    """Versioned binary checkpoint: params, Adam moments, config echo.

    Tensor data is stored as little-endian float32; save -> load -> save
    reproduces the file byte for byte.
    """
    kv = _cfg_to_kv(cfg, extra)
    kv["opt_step"] = str(opt.t)
    kv["opt_lr"] = repr(opt.lr)
    entries = [(n, p.data) for n, p in store.items()]
    for name in store.names():
        if name in opt.m:
            entries.append((f"opt.m.{name}", opt.m[name]))
            entries.append((f"opt.v.{name}", opt.v[name]))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            _write_entry(fh, name, arr)
        blob = "\n".join(f"{k}={v}" for k, v in sorted(kv.items())).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint file")
    return buf


def load_checkpoint(path) -> tuple[ParamStore, Adam, TrainConfig, dict[str, str]]:
    """Inverse of save_checkpoint; raises ValueError on a bad or foreign file."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (magic mismatch)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim))
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(fh, 4 * size), dtype="<f4").reshape(shape)
            tensors[name] = data.astype(np.float64)
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4))
        kv = {}
        for line in _read_exact(fh, blob_len).decode("utf-8").splitlines():
            k, _, v = line.partition("=")
            kv[k] = v

    cfg = _kv_to_cfg(kv)
    store = ParamStore(cfg.net_config())
    opt = Adam(float(kv.get("opt_lr", cfg.lr)))
    opt.t = int(kv.get("opt_step", "0"))
    for name, arr in tensors.items():
        if name.startswith("opt.m."):
            opt.m[name[6:]] = arr.copy()
        elif name.startswith("opt.v."):
            opt.v[name[6:]] = arr.copy()
        else:
            store.add(name, arr)
    if not store.all_finite():
        raise ValueError(f"{path}: checkpoint contains non-finite parameters")
    return store, opt, cfg, kv
