"""Command-line interface: gen-data | train | reconstruct | eval | verify.

Every command resolves its settings as defaults < config file < command
line, rejects unknown keys, and echoes the effective configuration before
doing any work.  Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import bridge, fanbeam, fileio, metrics, networks, noise
from . import tensor as T
from . import training as tr

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config resolution


def _resolve(args, defaults: dict) -> dict:
    """defaults < config file < explicit command-line values."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        for key, raw in fileio.read_kv_file(path).items():
            if key not in defaults:
                raise UsageError(f"unknown config key {key!r} in {path}")
            cfg[key] = _coerce(key, raw, defaults[key])
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _coerce(key, raw: str, default):
    try:
        if isinstance(default, bool):
            if raw not in ("true", "false", "True", "False", "0", "1"):
                raise ValueError
            return raw in ("true", "True", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"bad value for {key!r}: {raw!r}") from None
    return raw


def _echo(cmd: str, cfg: dict):
    print(f"# effective config ({cmd})")
    for key in sorted(cfg):
        print(f"{key}={cfg[key]}")


def _require_out_dir(path: Path, force: bool):
    if path.exists() and any(path.iterdir()) and not force:
        raise DataError(f"output directory {path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------------------
# gen-data

GEN_DEFAULTS = dict(n=0, views=32, image_n=64, seed=0, split="train", i0=1.0e6,
                    sigma_e2=10.0, mu_per_mm=0.02, supersample=2, k_min=4, k_max=9,
                    out="", force=False)


def cmd_gen_data(args) -> int:
    cfg = _resolve(args, GEN_DEFAULTS)
    if cfg["n"] < 1:
        raise UsageError("--n must be at least 1")
    if not cfg["out"]:
        raise UsageError("--out is required")
    if cfg["split"] not in ("train", "test"):
        raise UsageError("--split must be train or test")
    _echo("gen-data", cfg)
    out = Path(cfg["out"])
    _require_out_dir(out, cfg["force"])

    tcfg = tr.TrainConfig(image_n=cfg["image_n"], n_views=cfg["views"], seed=cfg["seed"],
                          i0=cfg["i0"], sigma_e2=cfg["sigma_e2"], mu_per_mm=cfg["mu_per_mm"],
                          supersample=cfg["supersample"], k_range=(cfg["k_min"], cfg["k_max"]))
    samples = tr.make_dataset(cfg["n"], tcfg, cfg["split"])
    geom = tcfg.geometry()

    lines = [f"{k}={cfg[k]}" for k in sorted(GEN_DEFAULTS) if k not in ("out", "force")]
    lines.append("n_det=%d" % geom.n_det)
    lines.append("angles=" + ",".join(repr(a) for a in geom.angles))
    for i, s in enumerate(samples):
        names = (f"{i:04d}_x0.imgf", f"{i:04d}_y.sinf", f"{i:04d}_fbp.imgf")
        fileio.write_image(out / names[0], s.x0)
        fileio.write_sinogram(out / names[1], s.y)
        fileio.write_image(out / names[2], s.x_fbp)
        lines.append(f"sample={i:04d},x0={names[0]},y={names[1]},fbp={names[2]}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def load_dataset_dir(path: Path):
    """Read a gen-data directory back into (manifest kv, samples)."""
    manifest = path / "manifest.txt"
    if not manifest.exists():
        raise DataError(f"no manifest.txt in {path}")
    kv = {}
    samples = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if line.startswith("sample="):
            fields = dict(part.split("=", 1) for part in line.split(","))
            samples.append(tr.Sample(
                x0=fileio.read_image(path / fields["x0"]),
                y=fileio.read_sinogram(path / fields["y"]),
                x_fbp=fileio.read_image(path / fields["fbp"]),
            ))
        else:
            key, _, val = line.partition("=")
            kv[key] = val
    if not samples:
        raise DataError(f"{manifest}: no samples listed")
    return kv, samples


def _dataset_train_config(kv: dict, overrides: dict) -> tr.TrainConfig:
    return tr.TrainConfig(
        image_n=int(kv["image_n"]), n_views=int(kv["views"]), i0=float(kv["i0"]),
        sigma_e2=float(kv["sigma_e2"]), mu_per_mm=float(kv["mu_per_mm"]),
        supersample=int(kv["supersample"]), k_range=(int(kv["k_min"]), int(kv["k_max"])),
        **overrides)


# ---------------------------------------------------------------------------
# train

TRAIN_DEFAULTS = dict(dataset="", out="", iters=5000, lr=5e-4, batch=4, diff_steps=10,
                      beta_max=0.3, seed=0, dtype="float64", no_coarse=False,
                      no_guidance=False, w_content=1.0, w_guidance=1.0, w_diff=1.0,
                      bridge_start="fbp", log_every=100, ckpt_every=1000, resume="",
                      force=False)


def cmd_train(args) -> int:
    cfg = _resolve(args, TRAIN_DEFAULTS)
    if not cfg["dataset"] or not cfg["out"]:
        raise UsageError("--dataset and --out are required")
    _echo("train", cfg)
    kv, pool = load_dataset_dir(Path(cfg["dataset"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    start_iter = 0
    if cfg["resume"]:
        ckpt = Path(cfg["resume"])
        if not ckpt.exists():
            raise DataError(f"resume checkpoint not found: {ckpt}")
        store, opt, tcfg, ckv = tr.load_checkpoint(ckpt)
        start_iter = int(ckv.get("train_iter", "0"))
        if pool[0].x0.shape != (tcfg.image_n, tcfg.image_n):
            raise DataError(f"dataset images {pool[0].x0.shape} do not match the "
                            f"checkpoint grid ({tcfg.image_n})")
        tcfg.apply_dtype()
    else:
        tcfg = _dataset_train_config(kv, dict(
            lr=cfg["lr"], iters=cfg["iters"], batch=cfg["batch"],
            n_train_steps=cfg["diff_steps"], beta_max=cfg["beta_max"], seed=cfg["seed"],
            use_coarse=not cfg["no_coarse"], use_guidance=not cfg["no_guidance"],
            w_content=cfg["w_content"], w_guidance=cfg["w_guidance"], w_diff=cfg["w_diff"],
            bridge_start=cfg["bridge_start"], dtype=cfg["dtype"]))
        tcfg.apply_dtype()
        store = networks.init_params(tcfg.net_config(), tcfg.seed)
        opt = tr.Adam(tcfg.lr)

    log_path = out / "loss_log.csv"
    mode = "a" if (cfg["resume"] and log_path.exists()) else "w"
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["iter", "l_content", "l_guidance", "l_diff", "l_total"])

        def on_log(it, rep):
            writer.writerow([it, rep["l_content"], rep["l_guidance"], rep["l_diff"],
                             rep["l_total"]])
            fh.flush()
            print(f"iter {it}: l_total={rep['l_total']:.6f}")
            if cfg["ckpt_every"] and it % cfg["ckpt_every"] == 0:
                tr.save_checkpoint(store, opt, tcfg, out / f"model_iter{it:06d}.ckpt",
                                   extra={"train_iter": str(it)})

        tr.train_loop(pool, store, opt, tcfg, iters=cfg["iters"],
                      log_every=cfg["log_every"], start_iter=start_iter, on_log=on_log)

    end_iter = start_iter + cfg["iters"]
    tr.save_checkpoint(store, opt, tcfg, out / "model.ckpt",
                       extra={"train_iter": str(end_iter)})
    print(f"trained to iteration {end_iter}; checkpoint at {out / 'model.ckpt'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# reconstruct

RECON_DEFAULTS = dict(checkpoint="", input="", out="", steps=1, seed=0,
                      deterministic=False, pgm=False, window_lo=0.42, window_hi=0.62,
                      force=False)


def cmd_reconstruct(args) -> int:
    cfg = _resolve(args, RECON_DEFAULTS)
    if not cfg["checkpoint"] or not cfg["input"] or not cfg["out"]:
        raise UsageError("--checkpoint, --input and --out are required")
    if cfg["steps"] < 1:
        raise UsageError("--steps must be at least 1")
    _echo("reconstruct", cfg)
    ckpt_path = Path(cfg["checkpoint"])
    if not ckpt_path.exists():
        raise DataError(f"checkpoint not found: {ckpt_path}")
    store, _, tcfg, _ = tr.load_checkpoint(ckpt_path)

    src = Path(cfg["input"])
    if src.is_dir():
        _, samples = load_dataset_dir(src)
        sinos = [(f"{i:04d}", s.y) for i, s in enumerate(samples)]
    elif src.exists():
        sinos = [(src.stem, fileio.read_sinogram(src))]
    else:
        raise DataError(f"input not found: {src}")

    grid, geom = tcfg.grid(), tcfg.geometry()
    for name, sino in sinos:
        if sino.shape != (geom.n_views, geom.n_det):
            raise DataError(
                f"{name}: sinogram shape {sino.shape} does not match checkpoint "
                f"geometry ({geom.n_views}, {geom.n_det})")

    out = Path(cfg["out"])
    _require_out_dir(out, cfg["force"])
    window = (cfg["window_lo"], cfg["window_hi"])
    for i, (name, sino) in enumerate(sinos):
        rng = noise.make_rng(cfg["seed"] + 1009 * i)
        x_fbp = fanbeam.fbp(sino, geom, grid) / tcfg.mu_per_mm
        x_init, x_out = tr.reconstruct(store, sino, geom, grid, tcfg, cfg["steps"], rng,
                                       stochastic=not cfg["deterministic"])
        for tag, img in (("fbp", x_fbp), ("init", x_init), ("out", x_out)):
            fileio.write_image(out / f"{name}_{tag}.imgf", img)
            if cfg["pgm"]:
                fileio.write_pgm16(out / f"{name}_{tag}.pgm", img, window)
    print(f"reconstructed {len(sinos)} sinograms into {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

EVAL_DEFAULTS = dict(recon_dir="", dataset="", out="", tag="out")


def cmd_eval(args) -> int:
    cfg = _resolve(args, EVAL_DEFAULTS)
    if not cfg["recon_dir"] or not cfg["dataset"]:
        raise UsageError("--recon-dir and --dataset are required")
    _echo("eval", cfg)
    _, samples = load_dataset_dir(Path(cfg["dataset"]))
    recon_dir = Path(cfg["recon_dir"])
    recons = sorted(recon_dir.glob(f"*_{cfg['tag']}.imgf"))
    if len(recons) != len(samples):
        raise DataError(f"{len(recons)} reconstructions vs {len(samples)} ground-truth "
                        f"samples; counts must match")

    rows = []
    for i, (path, s) in enumerate(zip(recons, samples)):
        img = fileio.read_image(path)
        rows.append((path.name, metrics.psnr(img, s.x0), metrics.ssim(img, s.x0)))
    mean_psnr = float(np.mean([r[1] for r in rows])) if all(
        np.isfinite(r[1]) for r in rows) else float("inf")
    mean_ssim = float(np.mean([r[2] for r in rows]))

    for name, p, s in rows:
        print(f"image={name} psnr_db={'inf' if np.isinf(p) else f'{p:.6f}'} ssim={s:.6f}")
    print(f"aggregate_psnr_db={'inf' if np.isinf(mean_psnr) else f'{mean_psnr:.6f}'}")
    print(f"aggregate_ssim={mean_ssim:.6f}")
    print(f"n_images={len(rows)}")

    if cfg["out"]:
        with open(cfg["out"], "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image", "psnr_db", "ssim"])
            writer.writerows(rows)
            writer.writerow(["aggregate", mean_psnr, mean_ssim])
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify

VERIFY_DEFAULTS = dict(suite="all", seed=0)


def _suite_adjoint(seed):
    grid = tr.default_grid(64)
    geom = fanbeam.FanBeamGeometry(fanbeam.DSO_MM, fanbeam.DSD_MM, 128,
                                   946.3488 / 128, fanbeam.uniform_angles(60))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        x = rng.standard_normal((64, 64))
        y = rng.standard_normal((60, 128))
        ax = fanbeam.forward_project(x, geom, grid)
        aty = fanbeam.back_project(y, geom, grid)
        rel = abs(np.sum(ax * y) - np.sum(x * aty)) / (np.linalg.norm(ax) * np.linalg.norm(y))
        worst = max(worst, rel)
    return [("adjoint identity (20 pairs, 64x64, 60 views)", worst, 1e-10)]


def _suite_schedule(seed):
    worst_sum = worst_tel = 0.0
    for n in (1, 5, 8, 10, 50):
        for bm in (0.1, 0.3, 1.0):
            s = bridge.build_schedule(n, bm)
            worst_sum = max(worst_sum, float(np.max(np.abs(s.sigma2 + s.sigma_bar2
                                                           - s.total_var))))
            worst_tel = max(worst_tel, abs(float(s.alpha2.sum()) - bm / 2.0))
    return [("variance split sums to total", worst_sum, 1e-12),
            ("interval variances telescope", worst_tel, 1e-12)]


def _suite_composition(seed):
    s = bridge.build_schedule(10, 0.3)
    worst = 0.0
    for n in range(1, 10):
        rep = bridge.verify_composition(s, n, mc=20_000, rng=noise.make_rng(seed + n))
        worst = max(worst, rep["max_z"])
    return [("posterior/marginal composition max z", worst, 4.0)]


def _suite_oracle(seed):
    strain = bridge.build_schedule(10, 0.3)
    g = noise.make_rng(seed)
    x0 = g.random((16, 16))
    x_start = x0 + g.standard_normal((16, 16))
    worst = 0.0
    for steps in (1, 2, 5, 8, 10):
        out = bridge.sample_loop(lambda x, sig, c: (x - x0) / sig, x_start, None,
                                 steps, strain, g, stochastic=True)
        worst = max(worst, float(np.max(np.abs(out - x0))))
    return [("oracle-denoiser exact recovery", worst, 1e-12)]


def _suite_gradients(seed):
    rng = np.random.default_rng(seed)
    worst = 0.0

    def fd_check(build, params):
        nonlocal worst
        loss = build()
        loss.backward()
        grads = [p.grad.copy() for p in params]
        for p, g in zip(params, grads):
            flat = p.data.reshape(-1)
            gf = g.reshape(-1)
            for idx in rng.integers(0, flat.size, size=min(4, flat.size)):
                orig = flat[idx]
                flat[idx] = orig + 1e-5
                hi = build().item()
                flat[idx] = orig - 1e-5
                lo = build().item()
                flat[idx] = orig
                fd = (hi - lo) / 2e-5
                worst = max(worst, abs(gf[idx] - fd) / max(abs(fd), 1.0))

    x = T.parameter(rng.standard_normal((2, 3, 8, 8)))
    k = T.parameter(rng.standard_normal((4, 3, 3, 3)))
    b = T.parameter(rng.standard_normal(4))
    tgt = T.constant(rng.standard_normal((2, 4, 8, 8)))
    tgt2 = T.constant(rng.standard_normal((2, 4, 4, 4)))

    def conv_loss():
        for p in (x, k, b):
            p.zero_grad()
        return T.mse(T.conv2d(x, k, b), tgt)

    def chain_loss():
        for p in (x, k, b):
            p.zero_grad()
        h = T.leaky_relu(T.conv2d(x, k, b), 0.1)
        return T.mse(T.avg_pool2(h), tgt2)

    fd_check(conv_loss, [x, k, b])
    fd_check(chain_loss, [x, k, b])
    return [("primitive gradients vs finite differences", worst, 1e-4)]


def _suite_noise(seed):
    p = noise.NoiseParams(seed=seed)
    y = noise.apply_noise(np.zeros(100_000), p)
    counts = p.i0 * np.exp(-y)
    n = counts.size
    z_mean = abs(counts.mean() - p.i0) / np.sqrt((p.i0 + p.sigma_e2) / n)
    z_var = abs(counts.var(ddof=1) - (p.i0 + p.sigma_e2)) / (
        (p.i0 + p.sigma_e2) * np.sqrt(2.0 / (n - 1)))
    return [("transmission mean z-score", float(z_mean), 3.0),
            ("transmission variance z-score", float(z_var), 3.0)]


SUITES = {
    "adjoint": _suite_adjoint,
    "schedule": _suite_schedule,
    "composition": _suite_composition,
    "oracle": _suite_oracle,
    "gradients": _suite_gradients,
    "noise": _suite_noise,
}


def cmd_verify(args) -> int:
    cfg = _resolve(args, VERIFY_DEFAULTS)
    if cfg["suite"] != "all" and cfg["suite"] not in SUITES:
        raise UsageError(f"unknown suite {cfg['suite']!r}; choose from "
                         f"{', '.join(sorted(SUITES))} or all")
    _echo("verify", cfg)
    names = sorted(SUITES) if cfg["suite"] == "all" else [cfg["suite"]]
    ok = True
    for name in names:
        for label, measured, tol in SUITES[name](cfg["seed"]):
            good = measured <= tol
            ok &= good
            print(f"[{name}] {label}: measured={measured:.3e} tolerance={tol:.0e} "
                  f"{'PASS' if good else 'FAIL'}")
    print("verify: " + ("all suites passed" if ok else "FAILURES detected"))
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="sparsect",
                     description="Sparse-view fan-beam CT simulation and reconstruction")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, defaults, helptext):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="key=value config file (defaults < file < flags)")
        for key, val in defaults.items():
            flag = "--" + key.replace("_", "-")
            if isinstance(val, bool):
                p.add_argument(flag, dest=key, action="store_const", const=True,
                               default=None)
            else:
                p.add_argument(flag, dest=key, type=type(val) if val != "" else str,
                               default=None)
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data, GEN_DEFAULTS, "simulate phantom/sinogram/FBP triplets")
    add("train", cmd_train, TRAIN_DEFAULTS, "train the reconstruction networks")
    add("reconstruct", cmd_reconstruct, RECON_DEFAULTS, "run inference on sinograms")
    add("eval", cmd_eval, EVAL_DEFAULTS, "PSNR/SSIM against ground truth")
    add("verify", cmd_verify, VERIFY_DEFAULTS, "run the numeric property suites")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except tr.NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    finally:
        T.set_default_dtype(np.float64)


if __name__ == "__main__":
    sys.exit(main())
