#!/usr/bin/env python3
"""Compare the cross-connected model against the plain CNN and the
independent ensemble under FGSM, across seeds, on the noisy toy task.

All three models are built from the same config; the plain CNN's width is
solved so its parameter count matches the cross-connected model, and the
ensemble uses three such members. Writes a CSV and prints the table.

    python3 scripts/robustness_compare.py --seeds 1 2 3 --epochs 20
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import numpy as np

from crossdense import (AttackParams, DccConfig, Schedule, SgdConfig,
                        build_dcc_ecnn, build_ensemble_cnn, build_standard_cnn,
                        evaluate, robust_accuracy, synthetic_dataset, train)

BUILDERS = (("dcc_ecnn", build_dcc_ecnn),
            ("ensemble_cnn", build_ensemble_cnn),
            ("standard_cnn", build_standard_cnn))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--epsilon", type=float, default=0.03)
    ap.add_argument("--difficulty", choices=("separable", "noisy"),
                    default="noisy")
    ap.add_argument("--out", default="runs/robustness_compare.csv")
    args = ap.parse_args()

    train_set = synthetic_dataset(200, 2, size=16, difficulty=args.difficulty,
                                  seed=100, split="train")
    test_set = synthetic_dataset(300, 2, size=16, difficulty=args.difficulty,
                                 seed=100, split="test")

    rows = ["seed,model,param_count,clean_accuracy,robust_accuracy"]
    robust = {name: [] for name, _ in BUILDERS}
    for seed in args.seeds:
        for name, build in BUILDERS:
            cfg = DccConfig(growth_rate=2, stem_channels=4,
                            layers_per_block=[[1, 1]] * 3, dropout_rate=0.0,
                            num_classes=2, input_shape=(3, 16, 16), seed=seed)
            model = build(cfg)
            train(model, train_set, epochs=args.epochs, batch_size=32,
                  sched=Schedule(0.1, args.epochs), sgd=SgdConfig(0.9, 5e-4),
                  seed=seed)
            clean = evaluate(model, test_set)
            rob = robust_accuracy(model, test_set, "fgsm",
                                  AttackParams(args.epsilon), seed=seed)
            robust[name].append(rob)
            rows.append(f"{seed},{name},{model.param_count()},{clean},{rob}")
            print(f"seed {seed}  {name:13s} params {model.param_count():6d}  "
                  f"clean {clean:.3f}  fgsm({args.epsilon:g}) {rob:.3f}")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(rows) + "\n")

    print("\nmean robust accuracy over seeds:")
    for name, vals in robust.items():
        print(f"  {name:13s} {np.mean(vals):.3f}")
    print(f"table written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
