"""Gain of difference guidance over no guidance by cumulative change-degree stratum,
on videos mixing change rates 0, 0.2, 0.5 and 0.8."""
from pathlib import Path

import numpy as np

from _common import parser, setup
from tr2.experiments import MIXED_CHANGE, strata_gain

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    cfg, seeds = setup(args, MIXED_CHANGE)
    res = strata_gain(cfg, seeds)
    lines = ["stratum_upper,videos,recall,baseline_recall,gain"]
    for i, s in enumerate(res.per_seed[0]):
        rec = np.mean([p[i].recall for p in res.per_seed])
        base = np.mean([p[i].baseline_recall for p in res.per_seed])
        lines.append(f"{s.upper:.4f},{len(s.video_ids)},{rec:.6f},{base:.6f},{rec - base:+.6f}")
    table = "\n".join(lines) + "\n"
    print(table, end="")
    print(f"zero-change stratum gain {res.mean_gain(0):+.4f}, highest stratum gain {res.mean_gain(-1):+.4f}")
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "strata.csv").write_text(table)
