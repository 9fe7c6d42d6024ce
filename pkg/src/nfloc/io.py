"""Result files: ``result.json`` (everything), ``aggregates.csv`` and ``trials.csv``.

Floats are written with ``repr`` so that reading a file back gives the exact
values that were written.
"""

import csv
import json
import os

from .harness import Aggregate, SweepResult

AGGREGATE_HEADER = ["snr_db", "algo", "rmse_m", "nmse", "bcrb_rmse_m", "trials_ok"]
TRIAL_HEADER = ["snr_db", "trial", "algo", "seed", "ok", "mse_m2", "nmse", "iterations", "bcrb_mse_m2"]


def _fmt(x):
    return repr(float(x))


def write_aggregates(aggregates, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_HEADER)
        for a in aggregates:
            w.writerow([_fmt(a.snr_db), a.algo, _fmt(a.rmse_m), _fmt(a.nmse), _fmt(a.bcrb_rmse_m), a.trials_ok])


def read_aggregates(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [Aggregate(float(r["snr_db"]), r["algo"], float(r["rmse_m"]), float(r["nmse"]),
                      float(r["bcrb_rmse_m"]), int(r["trials_ok"])) for r in rows]


def write_trials(records, algos, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRIAL_HEADER)
        for r in records:
            for a in algos:
                ok = r.ok(a)
                mse = sum(r.sq_errors[a]) / len(r.sq_errors[a]) if ok else float("nan")
                w.writerow([_fmt(r.snr_db), r.trial, a, r.seed, int(ok), _fmt(mse),
                            _fmt(r.nmse.get(a, float("nan"))), r.iterations.get(a, 0), _fmt(r.bcrb_mse)])


def write_result(result, out_dir):
    """Write the three result files into ``out_dir`` and return their paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "json": os.path.join(out_dir, "result.json"),
        "aggregates": os.path.join(out_dir, "aggregates.csv"),
        "trials": os.path.join(out_dir, "trials.csv"),
    }
    with open(paths["json"], "w") as fh:
        json.dump(result.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    write_aggregates(result.aggregates, paths["aggregates"])
    write_trials(result.records, result.config["algos"], paths["trials"])
    return paths


def read_result(path):
    """Load a :class:`SweepResult` from ``result.json`` (file or its directory)."""
    if os.path.isdir(path):
        path = os.path.join(path, "result.json")
    with open(path) as fh:
        return SweepResult.from_dict(json.load(fh))
