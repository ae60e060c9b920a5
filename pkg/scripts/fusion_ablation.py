"""Spatial encoder, temporal decoder and message token switched on and off."""
from pathlib import Path

from _common import parser, setup
from tr2.experiments import compare
from tr2.train import TABLE4_ROWS

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    cfg, seeds = setup(args)
    cmp = compare(cfg, TABLE4_ROWS, seeds)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "table4.csv").write_text(cmp.table)
    print(cmp.table, end="")
