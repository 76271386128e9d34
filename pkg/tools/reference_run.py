"""Regenerate tests/fixtures/reference_run.json.

Runs every strategy that applies to the default heterogeneous scenario
(parameter averaging needs identical architectures, so it is excluded)
under the default configuration and records the summary statistics the
acceptance suite compares against.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import time
from pathlib import Path

import numpy as np

from fcclsim import __version__
from fcclsim.federation import FederationConfig, run_experiment
from fcclsim.metrics import forgetting_gaps, summarize

STRATEGIES = ("fcclplus", "fccl", "fedmd", "feddf", "plain_kd", "solo", "ewc")
FIXTURE = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "reference_run.json"


def measure(strategy: str, base: FederationConfig = FederationConfig()) -> dict:
    start = time.perf_counter()
    result = run_experiment(dataclasses.replace(base, strategy=strategy))
    summary = summarize(result.log)
    gaps = forgetting_gaps(result.log)
    pretrain = next(r for r in result.log if r.phase == "pretrain")
    return {
        "inter_last3": summary["inter"],
        "intra_last3": summary["intra"],
        "mean_forgetting_gap": float(np.mean(list(gaps.values()))),
        "pretrain_inter": pretrain.inter_avg,
        "pretrain_intra": pretrain.intra_avg,
        "seconds": round(time.perf_counter() - start, 2),
    }


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=FIXTURE)
    args = parser.parse_args()
    base = FederationConfig()
    runs = {s: measure(s, base) for s in STRATEGIES}
    payload = {
        "version": __version__,
        "config": {
            "seed": base.seed,
            "epochs": base.epochs,
            "local_rounds": base.local_rounds,
            "domains": base.scenario.domains,
            "classes": base.scenario.classes,
            "input_dim": base.scenario.input_dim,
            "train_sizes": list(base.scenario.train_sizes),
            "public_size": base.scenario.public_size,
        },
        "runs": runs,
    }
    args.out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    for s, r in runs.items():
        print(f"{s:10s} inter {r['inter_last3']:.4f} intra {r['intra_last3']:.4f} gap {r['mean_forgetting_gap']:+.4f} ({r['seconds']}s)")


if __name__ == "__main__":
    main()
