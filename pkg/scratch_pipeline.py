"""Scratch: end-to-end desk pipeline feasibility + hyperparameter tuning."""
import sys
import time

import numpy as np

from kinodiff.engine import Rng
from kinodiff.kbm import generate_normal
from kinodiff.synth import build_dataset
from kinodiff.geodata import canonicalize_dataset, derive_kinematics, resample
from kinodiff.denoiser import DenoiserConfig, as_model
from kinodiff.diffusion import (LossWeights, SamplerConfig, desk_schedule,
                                reconstruct_dataset, train)

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 800
gamma3 = float(sys.argv[3]) if len(sys.argv) > 3 else 0.05
gamma2 = float(sys.argv[4]) if len(sys.argv) > 4 else 0.05
t_star = int(sys.argv[5]) if len(sys.argv) > 5 else 12

t_all = time.time()
rng = Rng(1000 + seed)
N, n = 200, 96
from kinodiff.kbm import generate_fleet
normals = generate_fleet(rng.derive("fleet"), N, n=n, dt=1.0, routes=4)
ds = build_dataset(normals, rate=0.05, rng=rng.derive("inject"))
labels = {t.id: (ds.labels[t.id] is not None) for t in ds.trajectories}
kinds = {t.id: (ds.labels[t.id].kind if ds.labels[t.id] else "normal") for t in ds.trajectories}

t0 = time.time()
canons, contexts, norm = canonicalize_dataset(ds.trajectories, n=n, k=2, radius_m=4000.0)
print(f"canonicalize: {time.time()-t0:.1f}s; ctx sizes: {np.mean([c.k for c in contexts]):.2f}")

sched = desk_schedule(50)
cfg = DenoiserConfig(width=24, heads=4, sampling_blocks=2, resnet_blocks=2,
                     kernel_size=17, max_context=2)
weights = LossWeights(gamma1=1.0, gamma2=gamma2, gamma3=gamma3)

t0 = time.time()
res = train(canons, contexts, norm, sched, cfg, weights, rng.derive("train"),
            steps=steps, batch_size=12, lr=3e-3, lr_final=3e-4, trim_frac=0.0)
dt_train = time.time() - t0
tr = res.trace
print(f"train: {dt_train:.1f}s ({dt_train/steps*1e3:.0f} ms/step), "
      f"loss {tr[0]['total']:.3f} -> {np.mean([r['total'] for r in tr[-50:]]):.3f} "
      f"(vlb {np.mean([r['vlb'] for r in tr[-50:]]):.3f} rec {np.mean([r['rec'] for r in tr[-50:]]):.3f} "
      f"phy {np.mean([r['phy'] for r in tr[-50:]]):.4f})")

model = as_model(res.params, cfg)
feats = np.stack([c.features for c in canons])
y = np.array([labels[c.id] is True for c in canons])

def evaluate(t_star, stride=2, eta=0.0, draws=6, gain=1.0):
    from kinodiff.denoiser import as_model as _as_model, DenoiserConfig as _DC
    import dataclasses
    m = model if gain == 1.0 else _as_model(res.params, dataclasses.replace(cfg, context_gain=gain))
    sampler = SamplerConfig(eta=eta, stride=stride, t_star=t_star)
    scores = np.zeros(len(canons))
    for d in range(draws):
        recon = reconstruct_dataset(canons, contexts, m, sched, sampler, seed=42 + d)
        scores += np.mean((recon[..., :2] - feats[..., :2]) ** 2, axis=(1, 2))
    scores /= draws
    order = np.argsort(scores)
    ranks = np.empty(len(scores)); ranks[order] = np.arange(1, len(scores) + 1)
    n_pos, n_neg = y.sum(), (~y).sum()
    auc = (ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
    lam = np.quantile(scores, 0.95)
    flags = scores >= lam
    tp = np.sum(flags & y); fp = np.sum(flags & ~y); fn = np.sum(~flags & y)
    prec = tp / max(tp + fp, 1); rec_ = tp / max(tp + fn, 1)
    f1 = 2 * prec * rec_ / max(prec + rec_, 1e-12)
    per = {}
    for kind in ("speed", "bearing", "drift", "replay"):
        ks = np.array([kinds[c.id] == kind for c in canons])
        if ks.any():
            per[kind] = round(float(np.median(scores[ks]) / np.median(scores[~y])), 1)
    print(f"t*={t_star} stride={stride} gain={gain}: AUC={auc:.3f} F1={f1:.3f} ratios={per}")

evaluate(6, stride=1, draws=8)
sampler = SamplerConfig(eta=0.0, stride=1, t_star=6)
scores = np.zeros(len(canons))
for d in range(8):
    recon = reconstruct_dataset(canons, contexts, model, sched, sampler, seed=42 + d)
    scores += np.mean((recon[..., :2] - feats[..., :2]) ** 2, axis=(1, 2))
scores /= 8
normal_med = np.median(scores[~y])
print(f"normal median {normal_med:.5f}, p95 {np.quantile(scores[~y], 0.95):.5f}")
for i, c in enumerate(canons):
    if y[i]:
        spec = ds.labels[c.id]
        print(f"  {c.id} {spec.kind:8s} sev={spec.severity:.2f} win={spec.window} "
              f"score={scores[i]:.5f} ratio={scores[i]/normal_med:.1f}")
