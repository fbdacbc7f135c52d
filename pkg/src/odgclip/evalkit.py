"""Metrics, leave-one-domain-out campaigns and diagnostics."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import (UNKNOWN, DomainSuite, OpenSample, SplitSpec, make_lodo_splits, open_quota, source_pool,
                       steps_per_epoch, target_pool)
from .encoders import EncoderBackend, images_to_tensor
from .engine import TrainConfig, argmax_lowest, posteriors, train
from .errors import DataError
from .latentspace import latent_images
from .model import ODGModel
from .opengen import DEFAULT_THRESHOLD, GeneratorBackend, generate_open_pool

logger = logging.getLogger(__name__)

BASELINE_THRESHOLD = 0.5


def accuracy(preds: Sequence, gts: Sequence, mask: Sequence[bool] | None = None) -> float:
    """Percentage of ``preds == gts`` over the masked subset."""
    preds, gts = np.asarray(preds), np.asarray(gts)
    if preds.shape != gts.shape:
        raise DataError("predictions and ground truths differ in length")
    m = np.ones(len(gts), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise DataError("accuracy over an empty subset")
    return float(100.0 * np.mean(preds[m] == gts[m]))


def h_score(acc_closed: float, acc_open: float) -> float:
    """Harmonic mean of closed-set accuracy and unknown recall (both in %)."""
    s = acc_closed + acc_open
    return 0.0 if s == 0 else 2.0 * acc_closed * acc_open / s


def open_metrics(pred_labels: Sequence[str], gt_labels: Sequence[str], known: Sequence[str]) -> dict:
    """Closed accuracy, unknown recall and H-score; open entries are None without open samples."""
    pred = np.asarray(pred_labels, dtype=object)
    gt = np.asarray(gt_labels, dtype=object)
    is_known = np.isin(gt, list(known))
    out = {"n_known": int(is_known.sum()), "n_open": int((~is_known).sum())}
    out["acc_closed"] = accuracy(pred, gt, is_known) if is_known.any() else None
    if (~is_known).any():
        out["acc_open"] = accuracy(pred, np.full(len(gt), UNKNOWN, dtype=object), ~is_known)
        out["h_score"] = h_score(out["acc_closed"] or 0.0, out["acc_open"])
    else:
        out["acc_open"] = out["h_score"] = None
    return out


def threshold_baseline(probs: np.ndarray, labels: Sequence[str], threshold: float = BASELINE_THRESHOLD) -> list[str]:
    """Confidence rejection without the unknown prompt.

    The ``unknown`` column is dropped, the rest renormalized, and samples whose
    top probability is below ``threshold`` are called unknown.
    """
    labels = list(labels)
    keep = [i for i, c in enumerate(labels) if c != UNKNOWN]
    p = probs[:, keep]
    p = p / p.sum(axis=1, keepdims=True)
    top = argmax_lowest(p)
    return [UNKNOWN if p[i, top[i]] < threshold else labels[keep[top[i]]] for i in range(len(p))]


def evaluate_model(model: ODGModel, samples, known: Sequence[str], tau: float) -> dict:
    """Metrics of ``model`` on target samples, plus the confidence-threshold baseline."""
    images = np.stack([s.image for s in samples])
    gts = [s.label for s in samples]
    probs = posteriors(model, images, tau)
    preds = [model.class_names[i] for i in argmax_lowest(probs)]
    res = open_metrics(preds, gts, known)
    base = open_metrics(threshold_baseline(probs, model.class_names), gts, known)
    res.update({f"baseline_{k}": v for k, v in base.items() if k.startswith(("acc", "h_"))})
    return res


# -- Fréchet distance ---------------------------------------------------------------


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(feats_a, feats_b, shrinkage: float = 1e-6) -> float:
    """Fréchet distance between Gaussians fitted to two feature sets.

    Both covariances get ``shrinkage * trace / d`` added to the diagonal; the
    cross term uses the symmetric form ``tr sqrt(sA B sA)`` with ``sA = sqrt(A)``.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise DataError("non-finite features")
    if a.shape[1] != b.shape[1]:
        raise DataError("feature sets differ in dimension")
    d = a.shape[1]

    def fit(x):
        mu = x.mean(axis=0)
        cov = np.atleast_2d(np.cov(x, rowvar=False)) if len(x) > 1 else np.zeros((d, d))
        eps = shrinkage * max(np.trace(cov), 1e-12) / d
        return mu, cov + eps * np.eye(d)

    mu_a, ca = fit(a)
    mu_b, cb = fit(b)
    sa = _sqrtm_psd(ca)
    cross = np.trace(_sqrtm_psd(sa @ cb @ sa))
    val = float(np.sum((mu_a - mu_b) ** 2) + np.trace(ca) + np.trace(cb) - 2.0 * cross)
    return max(val, 0.0)


@torch.no_grad()
def classifier_features(model: ODGModel, images: np.ndarray, tau: float, chunk: int = 64) -> np.ndarray:
    """Visual embedding of each image's latent at its predicted class."""
    out = []
    for i in range(0, len(images), chunk):
        x = images_to_tensor(images[i: i + chunk])
        fo = model(x)
        top = torch.as_tensor(argmax_lowest((fo.cos / tau).numpy()))
        out.append(fo.visual[torch.arange(len(top)), top].numpy())
    return np.concatenate(out)


def frechet_matrix(model: ODGModel, suite: DomainSuite, tau: float) -> dict:
    feats = {d: classifier_features(model, np.stack([s.image for s in suite.of_domain(d)]), tau)
             for d in suite.domains}
    doms = list(suite.domains)
    mat = np.zeros((len(doms), len(doms)))
    for i, j in combinations(range(len(doms)), 2):
        mat[i, j] = mat[j, i] = frechet_distance(feats[doms[i]], feats[doms[j]])
    return {"domains": doms, "matrix": mat.tolist()}


# -- differential cosine diagnostic ---------------------------------------------------


@torch.no_grad()
def abs_differentials(model: ODGModel, images: np.ndarray, class_name: str, chunk: int = 64) -> np.ndarray:
    """``|xhat|`` of each image for ``class_name``."""
    k = model.state.class_index(class_name)
    out = []
    for i in range(0, len(images), chunk):
        fo = model(images_to_tensor(images[i: i + chunk]))
        out.append(fo.xhat[:, k].abs().numpy())
    return np.concatenate(out)


def xhat_cosine_diagnostic(model: ODGModel, items: Sequence[tuple[np.ndarray, str, str]],
                           classes: Sequence[str] | None = None) -> dict[str, float]:
    """Per class, mean cosine of ``|xhat|`` over all cross-domain pairs.

    ``items`` are ``(image, class_name, domain)``; pseudo-open images enter
    with class ``unknown`` and their pseudo-domain. Classes seen in only one
    domain are skipped with a warning.
    """
    by_class: dict[str, list[tuple[np.ndarray, str]]] = {}
    for img, c, d in items:
        by_class.setdefault(c, []).append((img, d))
    out = {}
    for c in classes if classes is not None else sorted(by_class):
        group = by_class.get(c, [])
        doms = np.array([d for _, d in group])
        if len(set(doms)) < 2:
            logger.warning("class %r appears in fewer than 2 domains; skipped", c)
            continue
        v = torch.as_tensor(abs_differentials(model, np.stack([im for im, _ in group]), c))
        sims = F.normalize(v, dim=1) @ F.normalize(v, dim=1).T
        cross = torch.as_tensor(doms[:, None] != doms[None, :])
        out[c] = float(sims[cross].mean())
    return out


def diagnostic_items(suite: DomainSuite, split: SplitSpec, open_pool: Sequence[OpenSample] = (),
                     domains: Sequence[str] | None = None) -> list[tuple[np.ndarray, str, str]]:
    """Known-class samples of ``domains`` (sources by default) plus the pseudo-open pool."""
    domains = set(domains if domains is not None else split.sources)
    items = [(s.image, s.label, s.domain) for s in suite.samples
             if s.domain in domains and s.label in split.known_labels]
    items += [(o.image, UNKNOWN, o.domain) for o in open_pool]
    return items


# -- openness --------------------------------------------------------------------------


def openness_sweep(model: ODGModel, samples, partitions: Sequence[tuple[Sequence[str], Sequence[str]]],
                   tau: float) -> list[dict]:
    """H-score for each (known labels, open labels) partition of the target labels."""
    probs = posteriors(model, np.stack([s.image for s in samples]), tau)
    preds = np.array([model.class_names[i] for i in argmax_lowest(probs)], dtype=object)
    gts = np.array([s.label for s in samples], dtype=object)
    curve = []
    for known, opened in partitions:
        known, opened = list(known), list(opened)
        if not known or not opened:
            raise DataError("openness partition needs both known and open labels")
        if set(known) & set(opened):
            raise DataError("openness partition sides overlap")
        if not set(known) <= set(model.class_names) - {UNKNOWN}:
            raise DataError("known side of a partition must be classes the model was trained on")
        mk, mo = np.isin(gts, known), np.isin(gts, opened)
        a = accuracy(preds, gts, mk)
        b = accuracy(preds, np.full(len(gts), UNKNOWN, dtype=object), mo)
        curve.append({"known": known, "open": opened, "openness": len(opened) / len(known),
                      "acc_closed": a, "acc_open": b, "h_score": h_score(a, b)})
    return curve


def default_partitions(known: Sequence[str], opened: Sequence[str]) -> list[tuple[list[str], list[str]]]:
    """Shrinking known sides against the full open side (openness rises along the list)."""
    known = sorted(known)
    n = len(known)
    sizes = sorted({max(1, n - k) for k in range(min(3, n))}, reverse=True)
    return [(known[:s], sorted(opened)) for s in sizes]


# -- leave-one-domain-out ----------------------------------------------------------------


@dataclass
class EvalReport:
    rows: list[dict]
    mean: dict
    config: dict
    diagnostics: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "mean": self.mean, "config": self.config,
                "diagnostics": self.diagnostics, "metadata": self.metadata}

    def write(self, out_dir: str | Path, stem: str = "report") -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jpath = out / f"{stem}.json"
        with open(jpath, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        cpath = out / f"{stem}.csv"
        cols = ["target", "acc_closed", "acc_open", "h_score", "baseline_acc_closed", "baseline_acc_open",
                "baseline_h_score"]
        with open(cpath, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows + [{"target": "mean", **self.mean}]:
                w.writerow(["" if r.get(c) is None else (f"{r[c]:.4f}" if isinstance(r[c], float) else r[c])
                            for c in cols])
        return [jpath, cpath]


METRIC_KEYS = ("acc_closed", "acc_open", "h_score", "baseline_acc_closed", "baseline_acc_open", "baseline_h_score")


def _mean(values: Sequence[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if len(vals) == len(values) and vals else None


def run_split(split: SplitSpec, suite: DomainSuite, backend: EncoderBackend, config: TrainConfig,
              generator: GeneratorBackend | None, open_count: int | None = None,
              threshold: float = DEFAULT_THRESHOLD, cache_dir: str | Path | None = None):
    """Generate the pool, train and evaluate one split at one seed."""
    real = source_pool(suite, split)
    spe = config.steps_per_epoch or steps_per_epoch(len(real), config.batch_size, config.open_fraction)
    pool = []
    pool_meta = {}
    if config.open_fraction > 0:
        if generator is None:
            raise DataError("open_fraction > 0 needs a generator")
        count = open_count or max(1, open_quota(config.batch_size, config.open_fraction) * spe)
        op, pool_meta = generate_open_pool(generator, split.sources, split.known_labels, count, seed=config.seed,
                                           threshold=threshold, pp_only=config.pp_only,
                                           cache_dir=cache_dir)
        pool = op.samples
    result = train(split, suite, pool, backend, config)
    metrics = evaluate_model(result.model, target_pool(suite, split), split.known_labels, config.tau)
    metrics["pool_size"] = len(pool)
    metrics["pool_acceptance"] = pool_meta.get("acceptance_rate")
    return result, pool, metrics


def run_lodo(
    suite: DomainSuite,
    class_split: Mapping[str, Sequence[int]] | None,
    config: TrainConfig,
    backend: EncoderBackend,
    generator: GeneratorBackend | None,
    n_seeds: int = 3,
    targets: Sequence[str] | None = None,
    open_count: int | None = None,
    threshold: float = DEFAULT_THRESHOLD,
    closed_set: bool = False,
    out_dir: str | Path | None = None,
    cache_dir: str | Path | None = None,
    workers: int = 1,
    on_split: Callable[[str, dict], None] | None = None,
) -> EvalReport:
    """Train/evaluate every held-out domain over seeds ``seed .. seed+n_seeds-1``.

    Per-target metrics are means over seeds; the mean row is the plain mean
    over targets. With ``out_dir`` each finished split is persisted right away.
    ``workers > 1`` runs splits concurrently; rows keep the domain order.
    """
    splits = make_lodo_splits(suite, None if closed_set else class_split)
    if targets:
        unknown = set(targets) - set(suite.domains)
        if unknown:
            raise DataError(f"unknown target domains {sorted(unknown)}")
        splits = [s for s in splits if s.target in set(targets)]

    def one(split: SplitSpec) -> dict:
        per_seed = []
        for k in range(n_seeds):
            cfg = TrainConfig(**{**config.to_dict(), "seed": config.seed + k})
            _, _, m = run_split(split, suite, backend, cfg, generator, open_count, threshold, cache_dir)
            m["seed"] = cfg.seed
            per_seed.append(m)
        row = {"target": split.target, "sources": list(split.sources), "known": list(split.known_labels),
               "open": sorted(split.target_open_labels), "runs": per_seed}
        for key in METRIC_KEYS:
            row[key] = _mean([m[key] for m in per_seed])
        if closed_set:
            for key in ("acc_open", "h_score", "baseline_acc_open", "baseline_h_score"):
                row[key] = None
        return row

    rows = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        for split, row in zip(splits, ex.map(one, splits)):
            rows.append(row)
            if out_dir is not None:
                sdir = Path(out_dir) / "splits"
                sdir.mkdir(parents=True, exist_ok=True)
                with open(sdir / f"{split.target}.json", "w") as f:
                    json.dump(row, f, indent=2, sort_keys=True)
            if on_split:
                on_split(split.target, row)
    mean = {key: _mean([r[key] for r in rows]) for key in METRIC_KEYS}
    meta = {"suite": suite.name, "n_seeds": n_seeds, "seeds": [config.seed + k for k in range(n_seeds)],
            "closed_set": closed_set, "threshold": threshold,
            "backend": backend.descriptor()}
    return EvalReport(rows, mean, {**config.to_dict(), "closed_set": closed_set}, metadata=meta)


# -- plots -------------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_openness(curve: Sequence[dict], path: str | Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 3))
    pts = sorted(curve, key=lambda r: r["openness"])
    ax.plot([r["openness"] for r in pts], [r["h_score"] for r in pts], marker="o")
    ax.set_xlabel("openness (|open| / |known|)")
    ax.set_ylabel("H-score")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def plot_cosines(tables: Mapping[str, Mapping[str, float]], path: str | Path) -> Path:
    """Grouped bars, one group per class, one bar per named run."""
    plt = _pyplot()
    classes = sorted(set().union(*[t.keys() for t in tables.values()]))
    fig, ax = plt.subplots(figsize=(max(4, len(classes)), 3))
    width = 0.8 / max(1, len(tables))
    for i, (name, t) in enumerate(tables.items()):
        xs = np.arange(len(classes)) + i * width
        ax.bar(xs, [t.get(c, np.nan) for c in classes], width, label=name)
    ax.set_xticks(np.arange(len(classes)) + 0.4 - width / 2, classes, rotation=30)
    ax.set_ylabel("cross-domain cos(|xhat|)")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def plot_h_scores(report: EvalReport, path: str | Path) -> Path:
    plt = _pyplot()
    rows = [r for r in report.rows if r.get("h_score") is not None]
    key = "h_score" if rows else "acc_closed"
    rows = rows or report.rows
    fig, ax = plt.subplots(figsize=(4, 3))
    xs = np.arange(len(rows))
    ax.bar(xs - 0.2, [r[key] for r in rows], 0.4, label="unknown prompt")
    ax.bar(xs + 0.2, [r[f"baseline_{key}"] or 0 for r in rows], 0.4, label="threshold baseline")
    ax.set_xticks(xs, [r["target"] for r in rows])
    ax.set_ylabel(key)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return Path(path)
