"""Scratch exploration: MCC of the pipeline across alpha/pattern/d. Not shipped."""
import sys
import time

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from depsparse.synth import make_ground_truth, make_support, sample_dataset
from depsparse.trainer import EstimatorConfig, encode, train



def quick_mcc(z, z_hat):
    zr = rankdata(z, axis=0)
    hr = rankdata(z_hat, axis=0)
    d = z.shape[1]
    c = np.corrcoef(zr.T, hr.T)[:d, d:]
    c = np.abs(np.nan_to_num(c))
    r, col = linear_sum_assignment(c, maximize=True)
    return float(c[r, col].mean()), col


def run(d, pattern, alpha, seed, n=10000, epochs=200, width=64, depth=2, lr=1e-3):
    support = make_support(d, d, pattern, seed=seed)
    model = make_ground_truth(support, seed=seed)
    ds = sample_dataset(model, n, seed=seed)
    cfg = EstimatorConfig(
        mode="vae", d_z=d, depth=depth, width=width, alpha=alpha, beta=0.05,
        epochs=epochs, batch_size=256, learning_rate=lr, seed=seed, tau=0.05,
    )
    t0 = time.time()
    est = train(ds, cfg)
    z_hat = encode(est, ds.x)
    mcc, _ = quick_mcc(ds.z, z_hat)
    # SHD up to column permutation
    st = support.entries.astype(int)
    sh = est.empirical_support.entries.astype(int)
    cost = np.zeros((d, d))
    for a in range(d):
        for b in range(d):
            cost[a, b] = np.sum(st[:, a] != sh[:, b])
    r, c = linear_sum_assignment(cost)
    shd = int(cost[r, c].sum())
    dt = time.time() - t0
    print(
        f"d={d} {pattern:7s} alpha={alpha:<5} seed={seed} mcc={mcc:.4f} shd={shd} "
        f"recon_ratio={est.recon_ratio:.4f} pen={est.history[-1].penalty:.5f} t={dt:.1f}s",
        flush=True,
    )
    return mcc, shd


if __name__ == "__main__":
    which = sys.argv[1] if len(sys.argv) > 1 else "a1"
    if which == "a1":
        for alpha in (0.0, 0.05):
            scores = [run(3, "diverse", alpha, s)[0] for s in (1, 2, 3)]
            print(f"== alpha={alpha}: mean={np.mean(scores):.4f} ==", flush=True)
    elif which == "dense":
        for d in (3, 4, 5):
            scores = [run(d, "dense", 0.05, s)[0] for s in (1, 2, 3)]
            print(f"== dense d={d}: mean={np.mean(scores):.4f} ==", flush=True)
    elif which == "diverse45":
        for d in (4, 5):
            scores = [run(d, "diverse", 0.05, s)[0] for s in (1, 2, 3)]
            print(f"== diverse d={d}: mean={np.mean(scores):.4f} ==", flush=True)
