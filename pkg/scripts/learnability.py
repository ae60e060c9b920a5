"""Train the full model under the shared protocol and report held-out R@10."""
import dataclasses
import json
from pathlib import Path

from _common import parser, setup
from tr2.experiments import learnability

THRESHOLD = 0.85

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    cfg, seeds = setup(args)
    out = Path(args.out)
    results = []
    for seed in seeds:
        res = learnability(dataclasses.replace(cfg, seed=seed))
        results.append({"seed": seed, "test_R@10": round(res.recall, 6), "val_R@10": round(res.val_recall, 6),
                        "selected_epoch": res.record.selected_epoch, "seconds": round(res.seconds, 1)})
        print(f"seed {seed}: test R@10 {res.recall:.4f} (val {res.val_recall:.4f}, epoch "
              f"{res.record.selected_epoch}, {res.seconds:.0f}s) {'PASS' if res.recall >= THRESHOLD else 'FAIL'}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "learnability.json").write_text(json.dumps(results, indent=1) + "\n")
