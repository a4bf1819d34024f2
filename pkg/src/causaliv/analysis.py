"""Evaluation of the fitted estimator: feature conjunctions, instrument
validity diagnostics, a Rademacher-distance proxy, prediction balance, and
confidence profiles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import ATTACK_NAMES, run_attack
from .models import FeatureMap, ImageBatch, SplitClassifier
from .seeding import derive_rng, derive_seed


class DegenerateInstrumentError(RuntimeError):
    pass


@dataclass
class ConjunctionSet:
    """The four feature conjunctions; `adv` is the exact adversarial map."""

    adv: FeatureMap  # F_nat + Z  (== F_adv)
    cf: FeatureMap  # F_nat + g(Z)
    cc: FeatureMap  # F_nat + h(g(Z))
    ac: FeatureMap  # F_nat + h(Z)


@dataclass
class DiagnosticsReport:
    acc_T: float  # head accuracy on adversarial features, percent
    acc_Z: float  # head accuracy on the bare instrument, percent
    pearson_rho: float

    def __post_init__(self):
        if not (0.0 <= self.acc_T <= 100.0 and 0.0 <= self.acc_Z <= 100.0):
            raise ValueError("accuracies must be percentages in [0, 100]")


def conjunction_features(model: SplitClassifier, h, g, x: np.ndarray, x_adv: np.ndarray) -> ConjunctionSet:
    if x.shape != x_adv.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_adv.shape}")
    f_nat = model.features(x)
    f_adv = model.features(x_adv)
    z = f_adv.values - f_nat.values
    gz = g.apply(z)
    layer = f_nat.layer_id
    return ConjunctionSet(
        adv=f_adv,
        cf=FeatureMap(f_nat.values + gz, layer),
        cc=FeatureMap(f_nat.values + h.apply(gz), layer),
        ac=FeatureMap(f_nat.values + h.apply(z), layer),
    )


def conjunction_accuracies(model, h, g, x, x_adv, labels) -> dict:
    conj = conjunction_features(model, h, g, x, x_adv)
    out = {}
    for name in ("adv", "cf", "cc", "ac"):
        pred = np.argmax(model.head_logp(getattr(conj, name)), axis=1)
        out[name] = 100.0 * float(np.mean(pred == labels))
    return out


def conjunction_robustness(
    model: SplitClassifier,
    h,
    g,
    batch: ImageBatch,
    attacks=("fgsm", "pgd", "cw"),
    budgets: dict | None = None,
    seed: int = 0,
    batch_size: int = 128,
) -> dict:
    """Per-attack accuracy table for the four conjunctions, percent."""
    if batch.n == 0:
        raise ValueError("empty dataset")
    unknown = set(attacks) - set(ATTACK_NAMES)
    if unknown:
        raise ValueError(f"unknown attacks {sorted(unknown)}; known: {ATTACK_NAMES}")
    table = {}
    for name in attacks:
        sums = {k: 0.0 for k in ("adv", "cf", "cc", "ac")}
        for bi, start in enumerate(range(0, batch.n, batch_size)):
            sub = batch.subset(slice(start, start + batch_size))
            adv = run_attack(name, model, sub, (budgets or {}).get(name), seed=derive_seed(seed, "conj", name, bi))
            accs = conjunction_accuracies(model, h, g, sub.images, adv.images, sub.labels)
            for k in sums:
                sums[k] += accs[k] * sub.n
        table[name] = {k.upper() if k != "adv" else "Adv": v / batch.n for k, v in sums.items()}
    return table


def iv_diagnostics(
    model: SplitClassifier,
    batch: ImageBatch,
    attack: str = "pgd",
    budget=None,
    seed: int = 0,
    batch_size: int = 128,
    rho_mode: str = "per-sample",
) -> DiagnosticsReport:
    """Head accuracy on adversarial features and on the bare instrument, plus
    the Pearson correlation between instrument and treatment."""
    if rho_mode not in ("per-sample", "global"):
        raise ValueError("rho_mode must be 'per-sample' or 'global'")
    correct_t = 0
    correct_z = 0
    rhos = []
    z_all = []
    t_all = []
    for bi, start in enumerate(range(0, batch.n, batch_size)):
        sub = batch.subset(slice(start, start + batch_size))
        adv = run_attack(attack, model, sub, budget, seed=derive_seed(seed, "diag", bi))
        f_nat = model.features(sub.images).values
        f_adv = model.features(adv.images).values
        z = f_adv - f_nat
        pred_t = np.argmax(model.head_logp(f_adv), axis=1)
        pred_z = np.argmax(model.head_logp(z), axis=1)
        correct_t += int((pred_t == sub.labels).sum())
        correct_z += int((pred_z == sub.labels).sum())
        zf = z.reshape(z.shape[0], -1)
        tf = f_adv.reshape(f_adv.shape[0], -1)
        if rho_mode == "per-sample":
            zc = zf - zf.mean(axis=1, keepdims=True)
            tc = tf - tf.mean(axis=1, keepdims=True)
            z_sd = np.sqrt((zc * zc).sum(axis=1))
            t_sd = np.sqrt((tc * tc).sum(axis=1))
            if np.any(z_sd == 0) or np.any(t_sd == 0):
                raise DegenerateInstrumentError("zero variance in instrument or treatment")
            rhos.append((zc * tc).sum(axis=1) / (z_sd * t_sd))
        else:
            z_all.append(zf)
            t_all.append(tf)
    if rho_mode == "per-sample":
        rho = float(np.mean(np.concatenate(rhos)))
    else:
        zf = np.concatenate(z_all).reshape(-1)
        tf = np.concatenate(t_all).reshape(-1)
        if zf.std() == 0 or tf.std() == 0:
            raise DegenerateInstrumentError("zero variance in instrument or treatment")
        rho = float(np.corrcoef(zf, tf)[0, 1])
    return DiagnosticsReport(100.0 * correct_t / batch.n, 100.0 * correct_z / batch.n, rho)


def rademacher_distance_from_scores(scores: np.ndarray, draws: int, seed: int = 0) -> dict:
    """Random-sign averages |mean(sigma * s)| of fixed per-sample scores."""
    if draws < 100:
        raise ValueError("draws must be at least 100")
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    rng = derive_rng(seed, "rademacher", draws, n)
    signs = rng.integers(0, 2, size=(draws, n)) * 2 - 1
    dist = np.abs(signs @ scores) / n
    q25, med, q75 = np.percentile(dist, [25, 50, 75])
    return {
        "distances": dist,
        "mean": float(dist.mean()),
        "median": float(med),
        "q25": float(q25),
        "q75": float(q75),
        "n_samples": int(n),
        "draws": int(draws),
    }


def rademacher_distance(g, instruments: np.ndarray, draws: int = 1000, seed: int = 0) -> dict:
    """Distance proxy for the test-function class: per-sample amplification
    scores ‖g(z)‖/‖z‖ under random sign averages.  Zero-norm instrument
    samples are excluded and counted."""
    z = np.asarray(instruments)
    norms = np.sqrt((z.reshape(z.shape[0], -1) ** 2).sum(axis=1))
    keep = norms > 0
    excluded = int((~keep).sum())
    if not keep.any():
        raise DegenerateInstrumentError("all instrument samples have zero norm")
    zk = z[keep]
    gz = g.apply(zk)
    g_norms = np.sqrt((gz.reshape(gz.shape[0], -1) ** 2).sum(axis=1))
    scores = g_norms / norms[keep]
    out = rademacher_distance_from_scores(scores, draws, seed=seed)
    out["excluded"] = excluded
    out["scores"] = scores
    return out


def imbalance_ratio(predictions: np.ndarray, num_classes: int) -> float:
    """Minimum class count over maximum class count; absent classes count 0."""
    predictions = np.asarray(predictions)
    if predictions.size == 0:
        raise ValueError("empty predictions")
    counts = np.bincount(predictions, minlength=num_classes)[:num_classes]
    return float(counts.min() / counts.max())


def confidence_profile(
    model: SplitClassifier,
    h,
    batch: ImageBatch,
    attack: str = "pgd",
    budget=None,
    inversions: np.ndarray | None = None,
    seed: int = 0,
    batch_size: int = 128,
) -> dict:
    """True-class probability summaries per source (natural, adversarial,
    AC features, and causal inversion when supplied)."""
    rows = np.arange(batch.n)
    sources: dict[str, np.ndarray] = {}
    nat_p = []
    adv_p = []
    ac_p = []
    for bi, start in enumerate(range(0, batch.n, batch_size)):
        sub = batch.subset(slice(start, start + batch_size))
        adv = run_attack(attack, model, sub, budget, seed=derive_seed(seed, "conf", bi))
        idx = np.arange(sub.n)
        f_nat = model.features(sub.images).values
        f_adv = model.features(adv.images).values
        nat_p.append(np.exp(model.head_logp(f_nat))[idx, sub.labels])
        adv_p.append(np.exp(model.head_logp(f_adv))[idx, sub.labels])
        ac = f_nat + h.apply(f_adv - f_nat)
        ac_p.append(np.exp(model.head_logp(ac))[idx, sub.labels])
    sources["natural"] = np.concatenate(nat_p)
    sources["adversarial"] = np.concatenate(adv_p)
    sources["ac_features"] = np.concatenate(ac_p)
    if inversions is not None and len(inversions):
        logp = []
        for start in range(0, batch.n, batch_size):
            logp.append(model.head_logp(model.features(inversions[start : start + batch_size])))
        sources["causal_inversion"] = np.concatenate(logp)[rows, batch.labels]
        sources["causal_inversion"] = np.exp(sources["causal_inversion"])
    out = {}
    for name, p in sources.items():
        q25, med, q75 = np.percentile(p, [25, 50, 75])
        out[name] = {
            "mean": float(p.mean()),
            "q25": float(q25),
            "median": float(med),
            "q75": float(q75),
        }
    return out
