"""Small end-to-end walk through the pipeline.

Generates a random-placement dataset on the 10-host profile, trains the
surrogates with two folds, then runs GOSH and the first-order GOBI
ablation for a handful of intervals and prints the comparison.  Sizes are
cut down so the whole script finishes in under a minute on one core.

    python demos/quickstart.py [workdir]
"""
import sys
import tempfile
from pathlib import Path

from gosh import pipeline as P

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="gosh-"))
cfg = P.load_config("desk10")
cfg["intervals"] = 30

# 1. random placements give (state, decision) -> objective records
ds = P.gen_dataset(cfg, intervals=400, seed=0)
ds.save(work / "dataset.csv")
print(f"{len(ds)} records, {ds.X.shape[1]} input features -> {work / 'dataset.csv'}")

# 2. NPN bundle (f, g, h), the plain FCN and the next-state LSTM
reports = P.train_all(ds, work / "ck", folds=2, tcfg=dict(cfg["training"], epochs=30))
for name in ("npn", "fcn"):
    r = reports[name]
    print(f"{name}: validation MSE {r['mean_mse']:.4f}, aleatoric loss {r['mean_kld']:.4f}")

# 3. the same seeds under both schedulers
runs = []
for kind in ("GOBI", "GOSH"):
    out = work / "runs" / kind
    res = P.run_experiment(cfg, kind, seeds=[0, 1], checkpoints=work / "ck", out_dir=out)
    runs.append(out)
    m = res["mean"]
    print(f"{kind:5s} objective {m['objective_mean']:.4f}  SLA {m['sla_fraction']:.3f}  "
          f"energy {m['energy_kwh_total']:.2f} kWh  iterations {m['iterations_mean']:.1f}")

table = P.compare(runs, work / "compare")["table"]
print(f"GOSH - GOBI objective: {table[1]['objective_mean_delta']:+.4f}")
print(f"artifacts in {work}")
