"""Guidance variants over several seeds.

--table fig4: no guidance, binary change head, difference guidance.
--table table3: direct vs difference distillation on the high-change dataset.
"""
from pathlib import Path

from _common import parser, setup
from tr2.experiments import HIGH_CHANGE, difference_ablation, guidance_trend

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--table", choices=("fig4", "table3"), default="fig4")
    args = p.parse_args()
    if args.table == "fig4":
        cfg, seeds = setup(args)
        cmp = guidance_trend(cfg, seeds)
    else:
        cfg, seeds = setup(args, HIGH_CHANGE)
        cmp = difference_ablation(cfg, seeds)
    for r in cmp.rows:
        print(r.name, " ".join(f"{x:.4f}" for x in r.recalls[10]), f"mean {r.mean(10):.4f}")
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / f"{args.table}.csv").write_text(cmp.table)
    print(cmp.table, end="")
