"""Train the toy model and print a short summary of the run.

    python3 scripts/train_toy.py --out runs/toy [--steps 1000] [--override key=value ...]
"""
import argparse
import json
from pathlib import Path

from taskmoe.config import TrainConfig
from taskmoe.trainer import train_loop, validation_set, evaluate

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=ROOT / "configs" / "toy.json")
    p.add_argument("--out", default="runs/toy")
    p.add_argument("--steps", type=int)
    p.add_argument("--override", action="append", default=[])
    args = p.parse_args()
    cfg = TrainConfig.load(args.config, args.override)
    if args.steps is not None:
        cfg.steps = args.steps
    cfg.validate()
    early = min(100, cfg.steps)
    res = train_loop(cfg, out_dir=args.out, eval_steps={0, early, cfg.steps},
                     on_step=lambda r: r["step"] % 100 == 0 and print(
                         f"step {r['step']:5d} total {r['total']:.4f} l_diff {r['l_diff']:.4f}", flush=True))
    summary = {str(k): v.to_dict() for k, v in sorted(res.evals.items())}
    Path(args.out, "eval.json").write_text(json.dumps(summary, indent=2))
    for k, v in sorted(res.evals.items()):
        print(f"eval step {k:5d}: val l_diff {v.l_diff:.4f}  sep ratio {v.sep_ratio:.4f}")


if __name__ == "__main__":
    main()
