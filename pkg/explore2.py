"""Scratch: anchored mixing x estimator schedule grid. Not shipped."""
import sys
import time

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from depsparse import nnet
from depsparse.synth import Dataset, LatentPrior, make_support
from depsparse.trainer import _loss_and_grads


class Anchored:
    def __init__(self, support, seed, ratio=0.9, width=16):
        self.support = support
        d = support.d_z
        rng = np.random.default_rng([seed, 77])
        ent = support.entries
        r, c = linear_sum_assignment(ent.astype(float), maximize=True)
        self.anchor = {int(i): int(j) for i, j in zip(r, c)}
        prior = LatentPrior(d)
        probe = prior.sample(np.random.default_rng([seed, 22]), 1000)
        self.nets, self.a, self.off = [], [], []
        for i in range(support.d_x):
            cols = np.flatnonzero(ent[i])
            net = nnet.init_mlp(rng, [len(cols), width, width, 1], slope=0.2, bias_scale=0.5)
            J = nnet.jacobian(net, probe[:, cols])[:, 0, :]
            lmax = np.linalg.norm(J, axis=1).max()
            w, b = net.layers[-1]
            s = ratio / lmax
            net = nnet.make_net(net.layers[:-1] + ((w * s, b * s),), net.slopes)
            self.nets.append(net)
            self.a.append(1.0)
            self.off.append(0.0)
        x = self(probe)
        m, sd = x.mean(0), x.std(0)
        for i in range(support.d_x):
            w, b = self.nets[i].layers[-1]
            self.nets[i] = nnet.make_net(
                self.nets[i].layers[:-1] + ((w / sd[i], b / sd[i]),), self.nets[i].slopes
            )
            self.a[i] /= sd[i]
            self.off[i] -= m[i] / sd[i]
        self.prior = prior

    def __call__(self, z):
        ent = self.support.entries
        x = np.empty((z.shape[0], self.support.d_x))
        for i in range(self.support.d_x):
            cols = np.flatnonzero(ent[i])
            out, _ = nnet.forward(self.nets[i], z[:, cols])
            x[:, i] = self.a[i] * z[:, self.anchor[i]] + out[:, 0] + self.off[i]
        return x

    def jacobian(self, z):
        ent = self.support.entries
        jac = np.zeros((z.shape[0], self.support.d_x, self.support.d_z))
        for i in range(self.support.d_x):
            cols = np.flatnonzero(ent[i])
            jac[:, i, cols] = nnet.jacobian(self.nets[i], z[:, cols])[:, 0, :]
            jac[:, i, self.anchor[i]] += self.a[i]
        return jac


def run(support, g, seed, alpha, epochs, width, lr, decay_from=0.6, floor=0.02):
    zz = g.prior.sample(np.random.default_rng([seed, 11]), 10000)
    x_raw = g(zz)
    x = (x_raw - x_raw.mean(0)) / x_raw.std(0)
    n, d_x = x.shape
    d_z = support.d_z
    init_rng = np.random.default_rng([seed, 41])
    encoder = nnet.init_mlp(init_rng, [d_x, width, width, 2 * d_z], slope=0.2)
    decoder = nnet.init_mlp(init_rng, [d_z, width, width, d_x], slope=0.2)
    enc_s = nnet.init_opt_state(encoder, lr)
    dec_s = nnet.init_opt_state(decoder, lr)
    rng = np.random.default_rng([seed, 42])
    for ep in range(1, epochs + 1):
        frac = max(0.0, (ep - decay_from * epochs) / ((1 - decay_from) * epochs))
        cur = lr * (floor + (1 - floor) * 0.5 * (1 + np.cos(np.pi * frac))) if frac > 0 else lr
        enc_s.learning_rate = dec_s.learning_rate = cur
        order = rng.permutation(n)
        for s in range(0, n, 256):
            idx = order[s : s + 256]
            noise = rng.standard_normal((len(idx), d_z))
            t, comps, eg, dg = _loss_and_grads(x[idx], encoder, decoder, alpha, 0.05, "vae", noise)
            encoder, enc_s = nnet.adam_step(encoder, eg, enc_s)
            decoder, dec_s = nnet.adam_step(decoder, dg, dec_s)
    out, _ = nnet.forward(encoder, x)
    zh = out[:, :d_z]
    J = nnet.jacobian(decoder, zh[-1000:])
    peak = np.abs(J).max(0)
    ext = peak > 0.05 * peak.max()
    st = support.entries.astype(int)
    cost = np.array(
        [[np.sum(st[:, a] != ext[:, b]) for b in range(d_z)] for a in range(d_z)]
    )
    r, c = linear_sum_assignment(cost)
    shd = int(cost[r, c].sum())
    zr, hr = rankdata(zz, axis=0), rankdata(zh, axis=0)
    cm = np.abs(np.nan_to_num(np.corrcoef(zr.T, hr.T)[:d_z, d_z:]))
    rr, cc = linear_sum_assignment(cm, maximize=True)
    mcc = float(cm[rr, cc].mean())
    off = peak[~support.entries] / peak.max() if (~support.entries).any() else np.array([0.0])
    return mcc, shd, float(off.max())


if __name__ == "__main__":
    mode = sys.argv[1]
    if mode == "grid":
        for ratio, epochs, width in [(0.9, 400, 64), (0.9, 300, 128), (0.7, 300, 64)]:
            for seed in (1, 2, 3):
                support = make_support(3, 3, "diverse", seed=seed)
                g = Anchored(support, seed, ratio=ratio)
                t0 = time.time()
                m, shd, offmax = run(support, g, seed, 0.05, epochs, width, 3e-3)
                m0, _, _ = run(support, g, seed, 0.0, min(epochs, 200), width, 3e-3)
                print(
                    f"ratio={ratio} ep={epochs} w={width} seed={seed}: "
                    f"mcc05={m:.4f} mcc0={m0:.4f} shd={shd} offmax={offmax:.3f} t={time.time()-t0:.0f}s",
                    flush=True,
                )
    elif mode == "dense":
        for ratio in (0.9,):
            for seed in (1, 2, 3):
                support = make_support(3, 3, "dense", seed=seed)
                g = Anchored(support, seed, ratio=ratio)
                m, shd, offmax = run(support, g, seed, 0.05, 250, 64, 3e-3)
                print(f"dense ratio={ratio} seed={seed}: mcc05={m:.4f}", flush=True)
