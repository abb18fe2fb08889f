"""Accuracy reports, the train-on/test-on matrix and the channel sweep."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .model import predict_logits
from .train import fit

EVAL_SEED = 20240


def confusion_matrix(labels, predictions, num_classes):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=int), np.asarray(predictions, dtype=int)), 1)
    return cm


@dataclass
class EvalReport:
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    confusion: np.ndarray
    count: int
    trained_on: str = ""
    tested_on: str = ""

    @classmethod
    def from_predictions(cls, labels, predictions, num_classes, trained_on="", tested_on=""):
        cm = confusion_matrix(labels, predictions, num_classes)
        diag = np.diag(cm).astype(float)
        predicted = cm.sum(axis=0)
        actual = cm.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            precision = np.where(predicted > 0, diag / np.maximum(predicted, 1), 0.0)
            recall = np.where(actual > 0, diag / np.maximum(actual, 1), 0.0)
            denom = precision + recall
            f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1), 0.0)
        total = int(cm.sum())
        accuracy = float(np.trace(cm) / total) if total else float("nan")
        return cls(accuracy, precision, recall, f1, cm, total, trained_on, tested_on)

    def to_record(self):
        return {
            "trained_on": self.trained_on,
            "tested_on": self.tested_on,
            "count": self.count,
            "accuracy": self.accuracy,
            "precision": [float(x) for x in self.precision],
            "recall": [float(x) for x in self.recall],
            "f1": [float(x) for x in self.f1],
            "confusion": self.confusion.tolist(),
        }

    def to_json(self):
        return json.dumps(self.to_record(), sort_keys=True)

    def format_table(self):
        lines = [f"trained on {self.trained_on or '-'} / tested on {self.tested_on or '-'}: "
                 f"accuracy {self.accuracy:.4f} over {self.count} samples",
                 "class  precision  recall  f1      support"]
        support = self.confusion.sum(axis=1)
        for c in range(len(self.precision)):
            if support[c] or self.confusion[:, c].sum():
                lines.append(f"{c:5d}  {self.precision[c]:9.4f}  {self.recall[c]:6.4f}  "
                             f"{self.f1[c]:6.4f}  {support[c]:7d}")
        return "\n".join(lines)


def predict(params, config, dataset, seed=EVAL_SEED, mc=1):
    """Predicted class per image; masks come from ``seed`` and the sample index."""
    preds = np.empty(len(dataset), dtype=np.int64)
    for i, img in enumerate(dataset.images):
        rng = np.random.default_rng([seed, i])
        preds[i] = int(np.argmax(predict_logits(img, params, config, rng=rng, mc=mc)))
    return preds


def evaluate(params, config, dataset, seed=EVAL_SEED, mc=1, trained_on="", tested_on=None, num_classes=None):
    preds = predict(params, config, dataset, seed=seed, mc=mc)
    return EvalReport.from_predictions(
        dataset.labels, preds, num_classes or config.num_classes,
        trained_on=trained_on, tested_on=dataset.domain if tested_on is None else tested_on,
    )


@dataclass
class CrossDomainResult:
    domains: list
    reports: dict                      # (train, test) -> list[EvalReport]
    missing: list = field(default_factory=list)

    def mean(self):
        return self._reduce(np.mean)

    def std(self):
        # sample standard deviation over runs; undefined (nan) for a single run
        return self._reduce(lambda xs: np.std(xs, ddof=1) if len(xs) > 1 else float("nan"))

    def _reduce(self, fn):
        out = np.full((len(self.domains), len(self.domains)), np.nan)
        for i, a in enumerate(self.domains):
            for j, b in enumerate(self.domains):
                runs = self.reports.get((a, b))
                if runs:
                    out[i, j] = fn([r.accuracy for r in runs])
        return out

    def format_table(self):
        mean, std = self.mean(), self.std()
        width = max(12, max(len(d) for d in self.domains) + 2)
        lines = ["trained on \\ tested on".ljust(width) + "".join(d.rjust(width) for d in self.domains)]
        for i, a in enumerate(self.domains):
            cells = []
            for j in range(len(self.domains)):
                if np.isnan(mean[i, j]):
                    cells.append("missing".rjust(width))
                elif np.isnan(std[i, j]):
                    cells.append(f"{100 * mean[i, j]:.1f}".rjust(width))
                else:
                    cells.append(f"{100 * mean[i, j]:.1f}+-{100 * std[i, j]:.1f}".rjust(width))
            lines.append(a.ljust(width) + "".join(cells))
        for item in self.missing:
            lines.append(f"missing: {item}")
        return "\n".join(lines)

    def records(self):
        mean, std = self.mean(), self.std()
        for i, a in enumerate(self.domains):
            for j, b in enumerate(self.domains):
                runs = self.reports.get((a, b), [])
                yield {
                    "trained_on": a, "tested_on": b, "runs": len(runs),
                    "accuracies": [r.accuracy for r in runs],
                    "mean": None if np.isnan(mean[i, j]) else float(mean[i, j]),
                    "std": None if np.isnan(std[i, j]) else float(std[i, j]),
                }


def _evaluate_cell(job):
    params, config, dataset, seed, mc, a, b = job
    return evaluate(params, config, dataset, seed=seed, mc=mc, trained_on=a, tested_on=b)


def crossdomain(models, test_sets, seed=EVAL_SEED, mc=1, jobs=1):
    """Evaluate every model of every training domain on every test domain.

    ``models`` maps a training domain to a list of ``(params, config)``
    (one per independent run); ``test_sets`` maps a domain to an ImageSet.
    Domains lacking either input are recorded in ``missing``. With
    ``jobs > 1`` cells are evaluated in worker processes; masks depend only
    on ``seed`` and the sample index, so the result is identical to a serial run.
    """
    domains = sorted(set(models) | set(test_sets))
    result = CrossDomainResult(domains, {})
    work = []
    for a in domains:
        runs = models.get(a) or []
        if not runs:
            result.missing.append(f"no checkpoint trained on {a}")
        for b in domains:
            if b not in test_sets:
                if runs:
                    result.missing.append(f"no test data for {b}")
                continue
            work.extend(((a, b), (p, c, test_sets[b], seed, mc, a, b)) for p, c in runs)
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_evaluate_cell, [job for _, job in work]))
    else:
        reports = [_evaluate_cell(job) for _, job in work]
    for (cell, _), report in zip(work, reports):
        result.reports.setdefault(cell, []).append(report)
    result.missing = sorted(set(result.missing))
    return result


def sweep_channels(train_set, test_set, config, plan, channels, seed, eval_seed=EVAL_SEED, progress=None):
    """Train one model per channel count and report its test accuracy.

    All counts are validated before any training starts.
    """
    bad = [n for n in channels if n < 3]
    if bad:
        raise ValueError(f"channel counts must be >= 3, got {bad}")
    rows = []
    for n in channels:
        cfg = replace(config, channels=int(n))
        result = fit(train_set, cfg, plan, seed)
        report = evaluate(result.params, cfg, test_set, seed=eval_seed)
        rows.append((int(n), report.accuracy))
        if progress is not None:
            progress(rows[-1])
    return rows
