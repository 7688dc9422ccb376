"""Dev harness: sweep training settings on a small synthetic benchmark to
pick the shipped acceptance configuration. Not part of the test suite."""

import json
import sys
import time

import numpy as np

sys.path.insert(0, "src")

from meltpool_da import synth as sm
from meltpool_da import train as tm
from meltpool_da import data as dm
from meltpool_da.networks import ModelBundle


def make_bench(n_src=100, n_tgt=300, seed=0, **tgt_overrides):
    src = sm.SyntheticDomainSpec(train_per_class=n_src, val_per_class=50,
                                 test_per_class=50, seed=seed)
    tgt = sm.default_target_spec(seed + 1)
    tgt.train_per_class = n_tgt // 2
    tgt.val_per_class = tgt.test_per_class = 50
    for k, v in tgt_overrides.items():
        setattr(tgt, k, v)
    return sm.generate_domain_pair(src, tgt)


def run(bench, seed=0, epochs=(8, 8, 8), copies=2, batch=32,
        lr_enc=1e-3, lr_task=1e-4, lr_dom=1e-4, lam=1.0,
        metric="symmetric-bce", p3_enc_scale=1.0, p3_task_scale=1.0,
        zoom=(0.3, 0.35), verbose=False):
    aug_cfg = dm.AugmentationConfig(zoom_override=zoom, copies=copies, seed=seed)
    st = dm.augment_dataset(dm.balance_downsample(bench.source_train, seed), aug_cfg)
    bundle = ModelBundle.build(seed=seed, lr_encoder=lr_enc, lr_task=lr_task,
                               lr_domain=lr_dom)
    ev = {"tgt_val": bench.target_val, "tgt_test": bench.target_test,
          "src_val": bench.source_val} if verbose else None

    def pcfg(phase, n):
        return tm.PhaseConfig(phase=phase, epochs=n, batch_size=batch, lam=lam,
                              disc_metric=metric, seed=seed)

    t0 = time.time()
    r1 = tm.pretrain(bundle, st, pcfg("pretrain", epochs[0]), ev)
    a1 = tm.evaluate(bundle, bench.target_test).average
    s1 = tm.evaluate(bundle, bench.source_test).average
    r2 = tm.domain_align(bundle, st, bench.target_train, pcfg("domain-align", epochs[1]), ev)
    a2 = tm.evaluate(bundle, bench.target_test).average
    bundle.opt_encoder.lr *= p3_enc_scale
    bundle.opt_task1.lr *= p3_task_scale
    bundle.opt_task2.lr *= p3_task_scale
    r3 = tm.decision_align(bundle, st, bench.target_train, pcfg("decision-align", epochs[2]), ev)
    a3 = tm.evaluate(bundle, bench.target_test).average
    out = dict(pre=a1, dom=a2, dec=a3, src=s1, secs=round(time.time() - t0, 1))
    if verbose:
        for r in r1 + r2 + r3:
            print(f"  ep{r.epoch:3d} {r.phase:15s} Lenc={r.l_enc:.3f} "
                  f"Ld={r.l_d if r.l_d else float('nan'):.3f} "
                  f"Ldis={r.l_dis if r.l_dis else float('nan'):.3f} "
                  f"tgt={r.tgt_test_acc}")
    return out


GRID = {
    "base": dict(),
    "p3slow": dict(p3_enc_scale=0.1),
    "p3task": dict(p3_task_scale=10.0),
    "l1": dict(metric="l1"),
    "long3": dict(epochs=(8, 8, 16)),
    "lowdom": dict(lr_dom=3e-5),
    "tasktiny": dict(lr_task=1e-5),
    "taskbig": dict(lr_task=1e-3),
}

if __name__ == "__main__":
    import os
    seeds = [int(s) for s in os.environ.get("SEEDS", "0").split(",")]
    epochs = tuple(int(e) for e in os.environ.get("EPOCHS", "6,6,6").split(","))
    names = sys.argv[1:] or list(GRID)
    if os.environ.get("TABLE2"):
        bench = sm.generate_domain_pair(sm.default_source_spec(0),
                                        sm.default_target_spec(1),
                                        table2_counts=True)
        GRID["t2"] = dict(copies=1)
    else:
        bench = make_bench()
    for name in names:
        if name not in GRID:
            print(f"unknown grid entry {name}"); continue
        res = {}
        for seed in seeds:
            kw = dict(GRID[name])
            kw.setdefault("epochs", epochs)
            res[seed] = run(bench, seed=seed, **kw)
            print(name, seed, json.dumps(res[seed]), flush=True)
        mean = {k: round(float(np.mean([r[k] for r in res.values()])), 3)
                for k in ("pre", "dom", "dec", "src")}
        print("==", name, json.dumps(mean), flush=True)
