import sys, time, numpy as np
from sparsect import tensor as T
from sparsect import training as tr, networks as nets, noise, metrics

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 600
cfg = tr.TrainConfig(image_n=64, n_views=32, seed=1, iters=iters, dtype="float32")
cfg.apply_dtype()
t0 = time.time()
pool = tr.make_dataset(40, cfg)          # reduced pool for the pilot
test = tr.make_dataset(6, cfg, "test")
print(f"data: {time.time()-t0:.1f}s", flush=True)

store = nets.init_params(cfg.net_config(), cfg.seed)
opt = tr.Adam(cfg.lr)

def eval_now(tag):
    grid, geom, rng = cfg.grid(), cfg.geometry(), noise.make_rng(99)
    ps_f, ps_i, ps_o = [], [], []
    for s in test:
        x_init, x_out = tr.reconstruct(store, s.y, geom, grid, cfg, 1, rng, stochastic=False)
        ps_f.append(metrics.psnr(s.x_fbp, s.x0)); ps_i.append(metrics.psnr(x_init, s.x0)); ps_o.append(metrics.psnr(x_out, s.x0))
    print(f"{tag}: fbp={np.mean(ps_f):.2f} init={np.mean(ps_i):.2f} out1={np.mean(ps_o):.2f} dB", flush=True)

eval_now("iter0")
t0 = time.time()
tr.train_loop(pool, store, opt, cfg, log_every=200,
              on_log=lambda it, r: print(f"it {it}: total={r['l_total']:.4f} c={r['l_content']:.4f} g={r['l_guidance']:.4f} d={r['l_diff']:.4f} [{time.time()-t0:.0f}s]", flush=True))
eval_now(f"iter{iters}")
