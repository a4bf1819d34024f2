"""Stage orchestration: resumable run directories with resolved configs,
append-only metrics, and rendered reports.

Each stage writes into its own subdirectory of the run root and reads its
inputs from prior stages' artifacts, so stages are resumable and never mutate
one another's outputs.  metrics.jsonl holds only deterministic fields; wall
clock goes to a sibling timing.jsonl excluded from reproducibility checks.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .amr import AmrFitConfig, fit_amr_gmm
from .analysis import (
    confidence_profile,
    conjunction_features,
    conjunction_robustness,
    imbalance_ratio,
    iv_diagnostics,
    rademacher_distance,
)
from .attacks import EVAL_PGD, PerturbationBudget, evaluate_robustness, pgd
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config, parse_pixels, save_config
from .data import Dataset, load_dataset
from .defense import DefenseConfig, train_defense
from .inversion import InversionArchive, build_inversion_archive
from .models import build_classifier
from .seeding import derive_seed

STAGES = ("pretrain", "fit-amr", "invert", "train-cafe", "evaluate", "ablate")


class StageDependencyError(RuntimeError):
    pass


@dataclass
class MetricsRecord:
    run_id: str
    stage: str
    step: int
    metrics: dict
    wall_clock_s: float


class RunWriter:
    def __init__(self, run_dir: Path, stage: str):
        self.dir = Path(run_dir) / stage
        self.dir.mkdir(parents=True, exist_ok=True)
        self.stage = stage
        self.run_id = Path(run_dir).name
        self._t0 = time.monotonic()
        self._metrics = (self.dir / "metrics.jsonl").open("w")
        self._timing = (self.dir / "timing.jsonl").open("w")
        self._step = -1

    def record(self, step: int, metrics: dict):
        if step <= self._step:
            raise ValueError(f"steps must be monotone within a stage: {step} after {self._step}")
        self._step = step
        rec = MetricsRecord(self.run_id, self.stage, step, metrics, round(time.monotonic() - self._t0, 3))
        body = {"run_id": rec.run_id, "stage": rec.stage, "step": rec.step, **rec.metrics}
        self._metrics.write(json.dumps(body, sort_keys=True) + "\n")
        self._timing.write(
            json.dumps({"stage": rec.stage, "step": rec.step, "wall_clock_s": rec.wall_clock_s}) + "\n"
        )

    def finish(self, summary: dict):
        self._metrics.close()
        self._timing.close()
        (self.dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def _require(run_dir: Path, stage: str, filename: str) -> Path:
    path = Path(run_dir) / stage / filename
    if not path.exists():
        raise StageDependencyError(
            f"missing artifact {path.name!r}: run the {stage!r} stage first"
        )
    return path


def _dataset(config: dict) -> Dataset:
    spec = dict(config["dataset"])
    if spec.get("root"):
        return load_dataset(spec["root"])
    spec.pop("root", None)
    return load_dataset(spec)


def _train_budget(config: dict) -> PerturbationBudget:
    a = config["attack"]
    return PerturbationBudget(parse_pixels(a["eps"]), a["train_steps"], a["train_step_size"], True)


def _eval_budgets(config: dict) -> dict:
    a = config["attack"]
    eps = parse_pixels(a["eps"])
    return {
        "pgd": PerturbationBudget(eps, a["eval_steps"], a["eval_step_size"], True),
        "fgsm": PerturbationBudget(eps),
        "cw": PerturbationBudget(eps),
    }


def _defense_config(section: dict, config: dict, seed: int) -> DefenseConfig:
    return DefenseConfig(
        defense_kind=section["defense_kind"],
        trades_beta=section.get("trades_beta", 6.0),
        cafe_weight=section.get("cafe_weight", 0.0),
        cafe_target=section.get("cafe_target", "off"),
        attack=_train_budget(config),
        lr=section["lr"],
        momentum=section["momentum"],
        weight_decay=section["weight_decay"],
        schedule=section["schedule"],
        epochs=section["epochs"],
        batch_size=section["batch_size"],
        seed=seed,
        trace_subset=section["trace_subset"],
        attack_warmup_epochs=section["attack_warmup_epochs"],
        archive_refresh_every=section.get("archive_refresh_every", 0),
    )


def stage_pretrain(config: dict, run_dir: Path) -> dict:
    writer = RunWriter(run_dir, "pretrain")
    ds = _dataset(config)
    model = build_classifier(
        config["model"]["arch"], ds.num_classes,
        split=config["model"]["split"], seed=config["model"]["seed"],
    )
    section = dict(config["pretrain"], cafe_weight=0.0, cafe_target="off")
    cfg = _defense_config(section, config, derive_seed(config["seed"], "pretrain"))
    model, trace = train_defense(model, ds, cfg)
    for rec in trace:
        writer.record(rec["epoch"], {k: v for k, v in rec.items() if k != "epoch"})
    save_checkpoint(model, writer.dir / "classifier.ckpt")
    summary = {"natural_acc": trace[-1]["natural_acc"], "pgd_acc": trace[-1]["pgd_acc"],
               "epochs": cfg.epochs}
    writer.finish(summary)
    return summary


def stage_fit_amr(config: dict, run_dir: Path, lambda_reg: float | None = None, tag: str = "fit-amr") -> dict:
    model = load_checkpoint(_require(run_dir, "pretrain", "classifier.ckpt"))
    writer = RunWriter(run_dir, tag)
    ds = _dataset(config)
    a = config["amr"]
    cfg = AmrFitConfig(
        attack=_train_budget(config),
        lr_h=a["lr_h"], lr_g=a["lr_g"],
        lambda_reg=a["lambda_reg"] if lambda_reg is None else lambda_reg,
        g_steps_per_h=a["g_steps_per_h"],
        epochs=a["epochs"], batch_size=a["batch_size"],
        seed=derive_seed(config["seed"], "fit-amr"),
        sign_convention=a["sign_convention"],
        hidden=a["hidden"], hidden_g=a["hidden_g"],
        eps_schedule=tuple(a["eps_schedule"]),
        trace_subset=a["trace_subset"],
    )
    h, g, trace = fit_amr_gmm(model, ds, cfg)
    with (writer.dir / "trace.jsonl").open("w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            writer.record(rec["epoch"], {k: v for k, v in rec.items() if k != "epoch"})
    save_checkpoint(h, writer.dir / "hypothesis.ckpt")
    save_checkpoint(g, writer.dir / "test_fn.ckpt")
    summary = {"lambda_reg": cfg.lambda_reg, **{k: trace[-1][k] for k in trace[-1] if k != "epoch"}}
    writer.finish(summary)
    return summary


def stage_invert(config: dict, run_dir: Path) -> dict:
    model = load_checkpoint(_require(run_dir, "pretrain", "classifier.ckpt"))
    h = load_checkpoint(_require(run_dir, "fit-amr", "hypothesis.ckpt"))
    writer = RunWriter(run_dir, "invert")
    ds = _dataset(config)
    inv = config["invert"]
    budget = _train_budget(config)
    seed = derive_seed(config["seed"], "invert")

    def attack_fn(sub, bi):
        return pgd(model, sub, budget, seed=derive_seed(seed, "attack", bi))

    archive = build_inversion_archive(
        model, h, ds.train, attack_fn, gamma=parse_pixels(inv["gamma"]),
        steps=inv["steps"], jitter=inv["jitter"], seed=seed,
    )
    archive.save(writer.dir / "archive.npz")
    summary = {
        "samples": int(archive.ids.shape[0]),
        "kl_initial_mean": round(float(archive.kl_initial.mean()), 6),
        "kl_final_mean": round(float(archive.kl_final.mean()), 6),
        "gamma": parse_pixels(inv["gamma"]),
    }
    writer.record(0, summary)
    writer.finish(summary)
    return summary


def stage_train_cafe(config: dict, run_dir: Path, tag: str = "train-cafe") -> dict:
    section = config["defense"]
    inversions = None
    teacher = None
    if section["cafe_weight"] > 0 and section["cafe_target"] == "inversion":
        inversions = InversionArchive.load(_require(run_dir, "invert", "archive.npz"))
    if section["cafe_weight"] > 0 and section["cafe_target"] == "direct":
        teacher = (
            load_checkpoint(_require(run_dir, "pretrain", "classifier.ckpt")),
            load_checkpoint(_require(run_dir, "fit-amr", "hypothesis.ckpt")),
        )
    writer = RunWriter(run_dir, tag)
    ds = _dataset(config)
    model = build_classifier(
        config["model"]["arch"], ds.num_classes,
        split=config["model"]["split"], seed=config["model"]["seed"],
    )
    cfg = _defense_config(section, config, derive_seed(config["seed"], "train-cafe"))
    model, trace = train_defense(model, ds, cfg, inversions=inversions, direct_teacher=teacher)
    for rec in trace:
        writer.record(rec["epoch"], {k: v for k, v in rec.items() if k != "epoch"})
    save_checkpoint(model, writer.dir / "classifier.ckpt")
    summary = {
        "defense_kind": cfg.defense_kind,
        "cafe_weight": cfg.cafe_weight,
        "cafe_target": cfg.cafe_target,
        "natural_acc": trace[-1]["natural_acc"],
        "pgd_acc": trace[-1]["pgd_acc"],
    }
    writer.finish(summary)
    return summary


def stage_evaluate(config: dict, run_dir: Path) -> dict:
    model = load_checkpoint(_require(run_dir, "pretrain", "classifier.ckpt"))
    writer = RunWriter(run_dir, "evaluate")
    ds = _dataset(config)
    budgets = _eval_budgets(config)
    attacks = tuple(config["evaluate"]["attacks"])
    seed = derive_seed(config["seed"], "evaluate")
    bs = config["evaluate"]["batch_size"]

    robustness = evaluate_robustness(model, ds.test, attacks=attacks, budgets=budgets,
                                     seed=seed, batch_size=bs)
    summary = {"robustness": {k: round(v, 4) for k, v in robustness.items()}}

    h_path = Path(run_dir) / "fit-amr" / "hypothesis.ckpt"
    g_path = Path(run_dir) / "fit-amr" / "test_fn.ckpt"
    if h_path.exists() and g_path.exists():
        h, g = load_checkpoint(h_path), load_checkpoint(g_path)
        table = conjunction_robustness(model, h, g, ds.test, attacks=attacks,
                                       budgets=budgets, seed=seed, batch_size=bs)
        summary["conjunctions"] = {
            atk: {k: round(v, 4) for k, v in row.items()} for atk, row in table.items()
        }
        diag = iv_diagnostics(model, ds.test, attack="pgd", budget=budgets["pgd"],
                              seed=seed, batch_size=bs)
        summary["diagnostics"] = {
            "acc_T": round(diag.acc_T, 4),
            "acc_Z": round(diag.acc_Z, 4),
            "pearson_rho": round(diag.pearson_rho, 6),
        }
        inv_path = Path(run_dir) / "invert" / "archive.npz"
        inversions = None
        if inv_path.exists():
            archive = InversionArchive.load(inv_path)
            k = min(ds.test.n, archive.x_causal.shape[0])
            inversions = archive.x_causal[:k]
        profile = confidence_profile(model, h, ds.test, attack="pgd", budget=budgets["pgd"],
                                     inversions=inversions, seed=seed, batch_size=bs)
        summary["confidence"] = {
            src: {k: round(v, 6) for k, v in row.items()} for src, row in profile.items()
        }
    else:
        summary["conjunctions"] = "unavailable: run the fit-amr stage first"

    writer.record(0, {"natural_acc": summary["robustness"]["natural"]})
    writer.finish(summary)
    return summary


def stage_ablate(config: dict, run_dir: Path) -> dict:
    model = load_checkpoint(_require(run_dir, "pretrain", "classifier.ckpt"))
    writer = RunWriter(run_dir, "ablate")
    ds = _dataset(config)
    ab = config["ablate"]
    a = config["amr"]
    budget = _train_budget(config)
    seed = derive_seed(config["seed"], "ablate")
    subset = ds.test.subset(slice(0, ab["subset"]))
    adv = pgd(model, subset, budget, seed=derive_seed(seed, "instruments"))
    z = model.features(adv.images).values - model.features(subset.images).values

    sweep = []
    for i, lam in enumerate(ab["lambdas"]):
        cfg = AmrFitConfig(
            attack=budget, lr_h=a["lr_h"], lr_g=a["lr_g"], lambda_reg=float(lam),
            g_steps_per_h=a["g_steps_per_h"], epochs=a["epochs"], batch_size=a["batch_size"],
            seed=derive_seed(config["seed"], "ablate-fit"),
            sign_convention=a["sign_convention"],
            hidden=ab["hidden"], hidden_g=ab["hidden_g"],
            eps_schedule=tuple(a["eps_schedule"]), trace_subset=a["trace_subset"],
        )
        h, g, _ = fit_amr_gmm(model, ds, cfg)
        rad = rademacher_distance(g, z, draws=ab["rademacher_draws"], seed=derive_seed(seed, "rad"))
        cc = conjunction_features(model, h, g, subset.images, adv.images).cc
        preds = np.argmax(model.head_logp(cc), axis=1)
        row = {
            "lambda_reg": float(lam),
            "rademacher_median": round(rad["median"], 6),
            "rademacher_mean": round(rad["mean"], 6),
            "rademacher_q25": round(rad["q25"], 6),
            "rademacher_q75": round(rad["q75"], 6),
            "imbalance_ratio": round(imbalance_ratio(preds, ds.num_classes), 6),
        }
        sweep.append(row)
        writer.record(i, row)
        np.save(writer.dir / f"rademacher_lambda_{lam}.npy", rad["distances"])
    summary = {"sweep": sweep}
    writer.finish(summary)
    return summary


_STAGE_FNS = {
    "pretrain": stage_pretrain,
    "fit-amr": stage_fit_amr,
    "invert": stage_invert,
    "train-cafe": stage_train_cafe,
    "evaluate": stage_evaluate,
    "ablate": stage_ablate,
}


def run_pipeline(stage: str, config, run_dir) -> dict:
    """Run one stage into `run_dir`; the resolved config is persisted next to
    the stage artifacts."""
    if stage not in _STAGE_FNS:
        raise ValueError(f"unknown stage {stage!r}; stages: {STAGES}")
    config = load_config(config)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    summary = _STAGE_FNS[stage](config, run_dir)
    save_config(config, run_dir / stage / "config.json")
    return summary


# -- report rendering ----------------------------------------------------------


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    lines += [",".join(str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def emit_report(run_dir) -> list[Path]:
    """Render CSV + PNG reports from whichever stage artifacts exist."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    out = run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    eval_summary = run_dir / "evaluate" / "summary.json"
    if eval_summary.exists():
        summary = json.loads(eval_summary.read_text())
        conj = summary.get("conjunctions")
        if isinstance(conj, dict):
            cols = ["Adv", "CF", "CC", "AC"]
            rows = [[atk] + [round(conj[atk][c], 2) for c in cols] for atk in conj]
            _write_csv(out / "conjunctions.csv", ["attack"] + cols, rows)
            written.append(out / "conjunctions.csv")
            fig, ax = plt.subplots(figsize=(6, 3.5))
            x = np.arange(len(conj))
            width = 0.2
            for i, c in enumerate(cols):
                ax.bar(x + (i - 1.5) * width, [conj[a][c] for a in conj], width, label=c)
            ax.set_xticks(x, list(conj))
            ax.set_ylabel("accuracy (%)")
            ax.set_title("Feature-conjunction robustness")
            ax.legend(fontsize=8)
            fig.tight_layout()
            fig.savefig(out / "conjunctions.png", dpi=110)
            plt.close(fig)
            written.append(out / "conjunctions.png")
        diag = summary.get("diagnostics")
        if diag:
            _write_csv(out / "diagnostics.csv", ["acc_T", "acc_Z", "pearson_rho"],
                       [[diag["acc_T"], diag["acc_Z"], diag["pearson_rho"]]])
            written.append(out / "diagnostics.csv")

    ablate_summary = run_dir / "ablate" / "summary.json"
    if ablate_summary.exists():
        sweep = json.loads(ablate_summary.read_text())["sweep"]
        _write_csv(
            out / "regularizer_ablation.csv",
            ["lambda_reg", "rademacher_median", "rademacher_mean", "imbalance_ratio"],
            [[r["lambda_reg"], r["rademacher_median"], r["rademacher_mean"], r["imbalance_ratio"]] for r in sweep],
        )
        written.append(out / "regularizer_ablation.csv")
        dists = []
        labels = []
        for r in sweep:
            path = run_dir / "ablate" / f"rademacher_lambda_{r['lambda_reg']}.npy"
            if path.exists():
                dists.append(np.load(path))
                labels.append(f"λ={r['lambda_reg']}")
        if dists:
            fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
            axes[0].boxplot(dists, tick_labels=labels, showfliers=False)
            axes[0].set_yscale("log")
            axes[0].set_title("Rademacher distance")
            axes[1].bar(labels, [r["imbalance_ratio"] for r in sweep])
            axes[1].set_title("Imbalance ratio")
            fig.tight_layout()
            fig.savefig(out / "regularizer_ablation.png", dpi=110)
            plt.close(fig)
            written.append(out / "regularizer_ablation.png")

    base = run_dir / "pretrain" / "summary.json"
    cafe = run_dir / "train-cafe" / "summary.json"
    if base.exists() and cafe.exists():
        b = json.loads(base.read_text())
        c = json.loads(cafe.read_text())
        label = f"{c['defense_kind']}_cafe" if c["cafe_weight"] else c["defense_kind"]
        _write_csv(
            out / "defense_comparison.csv",
            ["method", "natural_acc", "pgd_acc"],
            [["baseline_adv", b["natural_acc"], b["pgd_acc"]],
             [label, c["natural_acc"], c["pgd_acc"]]],
        )
        written.append(out / "defense_comparison.csv")

    if not written:
        raise RuntimeError(f"{run_dir}: no stage artifacts to report on")
    return written
