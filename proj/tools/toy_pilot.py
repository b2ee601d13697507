#!/usr/bin/env python3
# Copyright (C) 2026 The cilab Authors
# SPDX-License-Identifier: Apache-2.0
"""Naive/cumulative triplet runs of configs/toy.json over several seeds.

Writes configs/toy_pilot.json, which holds the forgetting margin checked by
the acceptance binary.
"""

import argparse
import csv
import json
import pathlib
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor

ROOT = pathlib.Path(__file__).resolve().parent.parent


def run(cli, base, seed, workdir):
    cfg = json.loads(json.dumps(base))
    cfg["seed"] = seed
    cfg["strategies"] = ["naive"]
    cfg["loss_families"] = ["triplet"]
    cfg.pop("transfer", None)
    cfg["output"] = {"dir": str(workdir / f"seed{seed}"), "checkpoints": False}
    path = workdir / f"seed{seed}.json"
    path.write_text(json.dumps(cfg))
    subprocess.run([cli, "train", "--config", str(path)], check=True, capture_output=True)
    rows = list(csv.DictReader(open(workdir / f"seed{seed}" / "metrics.csv")))
    final = max(int(r["t"]) for r in rows)
    naive = next(r for r in rows if r["strategy"] == "naive" and int(r["t"]) == final)
    return {"seed": seed, "ref_map": float(naive["ref_mAP"]), "naive_map": float(naive["mAP"]),
            "naive_forget": float(naive["forget"])}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cli", default=str(ROOT / "build" / "tools" / "cilab"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5, 6, 7])
    ap.add_argument("--margin", type=float, default=10.0)
    ap.add_argument("--out", default=str(ROOT / "configs" / "toy_pilot.json"))
    args = ap.parse_args()

    base = json.loads((ROOT / "configs" / "toy.json").read_text())
    base["data"]["generate"] = dict(base["data"]["generate"])
    with tempfile.TemporaryDirectory() as tmp, ThreadPoolExecutor() as pool:
        runs = list(pool.map(lambda s: run(args.cli, base, s, pathlib.Path(tmp)), args.seeds))
    forgets = [r["naive_forget"] for r in runs]
    result = {
        "config": "toy.json",
        "strategy": "naive",
        "loss": "triplet",
        "runs": runs,
        "mean_naive_forget": round(sum(forgets) / len(forgets), 2),
        "min_naive_forget": min(forgets),
        "config_seed": base["seed"],
        "margin": args.margin,
    }
    pathlib.Path(args.out).write_text(json.dumps(result, indent=2) + "\n")
    print(json.dumps(result, indent=2))


if __name__ == "__main__":
    main()
