"""Command-line entry point: one verb per pipeline capability."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


def _load_data(arg):
    from .data import load_dataset

    path = Path(arg)
    if path.exists():
        return load_dataset(path)
    return load_dataset(json.loads(arg))


def _budget(args, steps=None, step_size=None, random_start=True):
    from .attacks import PerturbationBudget
    from .config import parse_pixels

    return PerturbationBudget(
        parse_pixels(args.eps),
        steps if steps is not None else args.steps,
        step_size if step_size is not None else args.step_size,
        random_start,
    )


def cmd_pretrain(args):
    from .pipeline import run_pipeline

    summary = run_pipeline("pretrain", args.config, args.out)
    print(json.dumps(summary, sort_keys=True))


def cmd_attack(args):
    from .attacks import evaluate_robustness
    from .checkpoint import load_checkpoint

    model = load_checkpoint(args.model, expect_kind="split_classifier")
    ds = _load_data(args.data)
    budget = _budget(args)
    table = evaluate_robustness(model, ds.test, attacks=(args.attack,),
                                budgets={args.attack: budget}, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w") as fh:
        fh.write(json.dumps({"metric": "natural_acc", "value": table["natural"]}) + "\n")
        fh.write(json.dumps({"metric": f"{args.attack}_acc", "value": table[args.attack],
                             "eps": args.eps, "steps": args.steps}) + "\n")
    print(json.dumps(table, sort_keys=True))


def cmd_fit_amr_gmm(args):
    from .pipeline import run_pipeline

    summary = run_pipeline("fit-amr", args.config, args.out)
    print(json.dumps(summary, sort_keys=True))


def cmd_eval_conjunctions(args):
    from .pipeline import emit_report, run_pipeline

    summary = run_pipeline("evaluate", args.config, args.out)
    emit_report(args.out)
    print(json.dumps(summary.get("conjunctions", {}), sort_keys=True))


def cmd_diagnose_iv(args):
    from .analysis import iv_diagnostics
    from .checkpoint import load_checkpoint

    model = load_checkpoint(args.model, expect_kind="split_classifier")
    ds = _load_data(args.data)
    diag = iv_diagnostics(model, ds.test, attack=args.attack, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"acc_T": diag.acc_T, "acc_Z": diag.acc_Z, "pearson_rho": diag.pearson_rho}
    (out / "diagnostics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(json.dumps(payload, sort_keys=True))


def cmd_invert(args):
    from .pipeline import run_pipeline

    summary = run_pipeline("invert", args.config, args.out)
    print(json.dumps(summary, sort_keys=True))


def cmd_train(args):
    from .config import load_config
    from .pipeline import run_pipeline

    if args.inversions:
        src = Path(args.inversions)
        src_file = src if src.suffix == ".npz" else src / "invert" / "archive.npz"
        dst = Path(args.out) / "invert" / "archive.npz"
        if src_file.exists() and src_file.resolve() != dst.resolve():
            dst.parent.mkdir(parents=True, exist_ok=True)
            dst.write_bytes(src_file.read_bytes())
    config = load_config(args.config)
    config["defense"]["defense_kind"] = args.defense
    config["defense"]["cafe_weight"] = args.cafe_weight
    config["defense"]["cafe_target"] = args.cafe_target
    summary = run_pipeline("train-cafe", config, args.out)
    print(json.dumps(summary, sort_keys=True))


def cmd_visualize(args):
    from .checkpoint import load_checkpoint
    from .analysis import conjunction_features
    from .attacks import EVAL_PGD, pgd
    from .viz import VizConfig, invert_feature, render_panel

    model = load_checkpoint(args.model, expect_kind="split_classifier")
    h = load_checkpoint(args.hypothesis, expect_kind="hypothesis_model")
    g = load_checkpoint(args.test_fn, expect_kind="test_function")
    ds = _load_data(args.data)
    ids = [int(s) for s in args.samples.split(",")]
    sub = ds.test.subset(np.array(ids))
    adv = pgd(model, sub, EVAL_PGD, seed=args.seed)
    conj = conjunction_features(model, h, g, sub.images, adv.images)
    cfg = VizConfig(steps=args.steps, seed=args.seed)
    panels = [("natural", sub.images)]
    for name, fm in (("Adv", conj.adv), ("AC", conj.ac), ("CF", conj.cf)):
        img, _ = invert_feature(model, fm, cfg)
        panels.append((name, img))
    render_panel(panels, args.out)
    print(f"wrote {args.out}")


def cmd_synth_iv(args):
    from .ivcore import GmmFitConfig, gmm_minimax_fit, ols_fit, simulate_linear_dgp, twosls_fit

    params = json.loads(Path(args.params).read_text()) if args.params else {}
    ds = simulate_linear_dgp(params, n=args.n, seed=args.seed)
    h, _ = gmm_minimax_fit(ds, cfg=GmmFitConfig(seed=args.seed))
    payload = {
        "ols": ols_fit(ds),
        "twosls": twosls_fit(ds),
        "gmm": h.slope,
        "dgp_params": ds.dgp_params,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: payload[k] for k in ("ols", "twosls", "gmm")}, sort_keys=True))


def cmd_ablate_regularizer(args):
    from .config import load_config
    from .pipeline import emit_report, run_pipeline

    config = load_config(args.config)
    if args.lambdas:
        config["ablate"]["lambdas"] = [float(v) for v in args.lambdas.split(",")]
    summary = run_pipeline("ablate", config, args.out)
    emit_report(args.out)
    print(json.dumps(summary, sort_keys=True))


def cmd_report(args):
    from .pipeline import emit_report

    written = emit_report(args.run)
    for path in written:
        print(path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="causaliv",
        description="Causal feature extraction from adversarial examples and defense inoculation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="adversarially pretrain a split classifier")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("attack", help="measure robust accuracy under one attack")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--attack", choices=("fgsm", "pgd", "cw"), required=True)
    p.add_argument("--eps", default="8/255")
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--step-size", dest="step_size", type=float, default=0.0023)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("fit-amr-gmm", help="fit hypothesis model and test function")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="run directory holding the pretrain stage")
    p.set_defaults(fn=cmd_fit_amr_gmm)

    p = sub.add_parser("eval-conjunctions", help="evaluate Adv/CF/CC/AC robustness")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="run directory holding pretrain + fit-amr")
    p.set_defaults(fn=cmd_eval_conjunctions)

    p = sub.add_parser("diagnose-iv", help="instrument validity diagnostics")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--attack", default="pgd", choices=("fgsm", "pgd", "cw"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_diagnose_iv)

    p = sub.add_parser("invert", help="build the causal-inversion archive")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="run directory holding pretrain + fit-amr")
    p.set_defaults(fn=cmd_invert)

    p = sub.add_parser("train", help="train a defense with the causal regularizer")
    p.add_argument("--defense", choices=("adv", "trades"), default="adv")
    p.add_argument("--cafe-weight", dest="cafe_weight", type=float, default=1.0)
    p.add_argument("--cafe-target", dest="cafe_target",
                   choices=("inversion", "direct", "off"), default="inversion")
    p.add_argument("--inversions", default=None,
                   help="run directory holding the invert stage (defaults to --out)")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("visualize", help="render feature-conjunction panels")
    p.add_argument("--model", required=True)
    p.add_argument("--hypothesis", required=True)
    p.add_argument("--test-fn", dest="test_fn", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--samples", default="0,1,2")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_visualize)

    p = sub.add_parser("synth-iv", help="scalar IV oracle comparison")
    p.add_argument("--params", default=None)
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth_iv)

    p = sub.add_parser("ablate-regularizer", help="sweep the test-function penalty")
    p.add_argument("--config", default=None)
    p.add_argument("--lambdas", default=None, help="comma-separated, e.g. 0,1")
    p.add_argument("--out", required=True, help="run directory holding the pretrain stage")
    p.set_defaults(fn=cmd_ablate_regularizer)

    p = sub.add_parser("report", help="render CSV/PNG reports for a run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
