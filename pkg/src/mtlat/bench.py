"""Robustness benchmark: corrupted and attacked accuracies, robustness scores, reports.

A robustness score is the accuracy under a perturbation divided by the clean
accuracy. Accuracies are kept as exact fractions so that every row satisfies
``R * A_clean == A_phi`` to rounding of the rendered floats only.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import attacks
from .corruptions import KINDS, SEVERITY_TABLE, corrupt_batch, corrupt_strength
from .data import Dataset
from .errors import ContractViolation
from .models import ModelParams, predict
from .seeding import derive_seed

log = logging.getLogger(__name__)

BENCH_VERSION = 1
LOW_CLEAN_ACCURACY = 50.0
COMPARABLE_CLEAN_GAP = 2.0
ATTACK_CHUNK = 250
FORMATS = ("json", "csv", "markdown")


class LowCleanAccuracyWarning(UserWarning):
    """Robustness scores of models with a low clean accuracy are hard to compare."""


def robustness_score(a_clean, a_phi):
    """A_phi / A_clean, both in percent (or both as fractions).

    Warns with LowCleanAccuracyWarning when the clean accuracy is under 50%.
    """
    if a_clean <= 0:
        raise ValueError("clean accuracy must be > 0 to define a robustness score")
    if a_phi < 0:
        raise ValueError("perturbed accuracy must be >= 0")
    clean_pct = float(a_clean) * (100 if isinstance(a_clean, Fraction) else 1)
    if clean_pct < LOW_CLEAN_ACCURACY:
        warnings.warn(f"clean accuracy {clean_pct:.1f}% is below {LOW_CLEAN_ACCURACY}%; "
                      "robustness scores may not be comparable", LowCleanAccuracyWarning, stacklevel=2)
    return a_phi / a_clean


@dataclass
class BenchOptions:
    severity_table: dict | None = None
    kinds: tuple = KINDS
    pgd_epsilon: float = 0.04
    iterations: int = 10
    mi_epsilons: tuple = (0.04, 0.08)
    cw_subset: int = 500
    cw_iterations: int = 40
    cw_confidence: float = 5.0
    cw_search_steps: int = 5
    jobs: int = 1

    def to_dict(self):
        return {
            "severity_table": {k: [float(s) for s in v] for k, v in (self.severity_table or SEVERITY_TABLE).items()
                               if k in self.kinds},
            "kinds": list(self.kinds),
            "pgd_epsilon": self.pgd_epsilon,
            "iterations": self.iterations,
            "mi_epsilons": list(self.mi_epsilons),
            "cw_subset": self.cw_subset,
            "cw_iterations": self.cw_iterations,
            "cw_confidence": self.cw_confidence,
            "cw_search_steps": self.cw_search_steps,
        }


@dataclass
class ReportRow:
    name: str
    params: str
    accuracy: Fraction  # in [0, 1]
    score: Fraction
    detail: list = field(default_factory=list)

    @property
    def a_phi(self) -> float:
        return float(self.accuracy * 100)

    @property
    def r_phi(self) -> float:
        return float(self.score)

    def to_dict(self):
        return {
            "name": self.name, "params": self.params,
            "accuracy": f"{self.accuracy.numerator}/{self.accuracy.denominator}",
            "score": f"{self.score.numerator}/{self.score.denominator}",
            "A_phi": self.a_phi, "R_phi": self.r_phi, "detail": self.detail,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["params"], Fraction(d["accuracy"]), Fraction(d["score"]), d.get("detail", []))


@dataclass
class RobustnessReport:
    model_id: str
    clean: Fraction
    rows: list
    seed: int
    version: int = BENCH_VERSION
    options: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def a_clean(self) -> float:
        return float(self.clean * 100)

    def row(self, name) -> ReportRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self):
        return {
            "version": self.version, "model_id": self.model_id, "seed": self.seed,
            "clean": f"{self.clean.numerator}/{self.clean.denominator}", "A_clean": self.a_clean,
            "options": self.options, "warnings": self.warnings,
            "rows": [r.to_dict() for r in self.rows],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != BENCH_VERSION:
            raise ValueError(f"unsupported report version {d.get('version')!r}")
        return cls(d["model_id"], Fraction(d["clean"]), [ReportRow.from_dict(r) for r in d["rows"]],
                   d["seed"], d["version"], d.get("options", {}), d.get("warnings", []))


def model_id(model: ModelParams) -> str:
    h = hashlib.sha256(model.arch.encode())
    for k, v in model.params.items():
        h.update(k.encode())
        h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return f"{model.arch}-{h.hexdigest()[:16]}"


def _correct(model, images, labels):
    if len(labels) == 0:
        return 0
    return int((predict(model, images).argmax(axis=1) == labels).sum())


def _chunked(fn, images, labels):
    out = [fn(images[i:i + ATTACK_CHUNK], labels[i:i + ATTACK_CHUNK]) for i in range(0, len(labels), ATTACK_CHUNK)]
    return np.concatenate(out) if out else images


def corruption_row(victim, images, labels, kind, seed, table, clean, cache=None) -> ReportRow:
    """Mean accuracy and score over the five severities of one corruption kind."""
    strengths = table[kind]
    detail, accs = [], []
    for sev, s in enumerate(strengths, start=1):
        key = (kind, float(s))
        if cache is not None and key in cache:
            corrupted = cache[key]
        else:
            corrupted = corrupt_batch(kind, s, images, derive_seed(seed, "corruption", kind))
            if cache is not None:
                cache[key] = corrupted
        c = _correct(victim, corrupted, labels)
        accs.append(Fraction(c, len(labels)))
        detail.append({"severity": sev, "strength": float(s), "correct": c, "total": len(labels),
                       "R_phi": float(Fraction(c, len(labels)) / clean)})
    acc = sum(accs, Fraction(0)) / len(accs)
    params = "strengths=" + "/".join(f"{float(s):.6g}" for s in strengths)
    return ReportRow(kind, params, acc, acc / clean, detail)


def identity_probe(victim, dataset: Dataset, seed=0) -> Fraction:
    """Score of a strength-0 corruption; must be exactly 1."""
    test = dataset.test
    probe = np.stack([corrupt_strength("brightness", 0.0, x, seed) for x in test.images])
    clean = Fraction(_correct(victim, test.images, test.labels), len(test))
    return Fraction(_correct(victim, probe, test.labels), len(test)) / clean


def run_benchmark(victim: ModelParams, surrogate: ModelParams, dataset: Dataset, seed=0,
                  options: BenchOptions | None = None, corruption_cache=None) -> RobustnessReport:
    """Clean accuracy, every corruption kind over severities 1..5, and the five attack rows.

    The two MI-FGSM rows are crafted on ``surrogate`` and evaluated on
    ``victim``; both must have distinct architectures.
    """
    options = options or BenchOptions()
    if victim.arch == surrogate.arch:
        raise ContractViolation(f"surrogate architecture {surrogate.arch!r} equals the victim's; "
                                "black-box rows need a different architecture")
    table = dict(SEVERITY_TABLE)
    table.update(options.severity_table or {})
    test = dataset.test
    x, y = test.images, test.labels
    if len(y) == 0:
        raise ValueError("empty test split")
    clean = Fraction(_correct(victim, x, y), len(y))
    if clean == 0:
        raise ValueError("victim has zero clean accuracy; robustness scores are undefined")
    report_warnings = []
    if clean * 100 < LOW_CLEAN_ACCURACY:
        report_warnings.append(f"clean accuracy {float(clean * 100):.2f}% below {LOW_CLEAN_ACCURACY}%")
    probe = identity_probe(victim, dataset, seed)
    if probe != 1:
        raise AssertionError(f"identity probe score {probe} != 1")

    eps, iters = options.pgd_epsilon, options.iterations

    def pgd_row():
        b = attacks.AttackBudget(epsilon=eps, iterations=iters)
        adv = _chunked(lambda xi, yi: attacks.pgd(victim, xi, yi, b).x_adv, x, y)
        return f"eps={eps:g};iters={iters};step={b.pgd_step():g}", adv, y

    def pgd_ll_row():
        b = attacks.AttackBudget(epsilon=eps, iterations=iters)
        adv = _chunked(lambda xi, yi: attacks.pgd_ll(victim, xi, b).x_adv, x, y)
        return f"eps={eps:g};iters={iters};step={b.pgd_step():g};target=least-likely", adv, y

    def cw_row():
        n = min(options.cw_subset, len(y))
        idx = np.sort(np.random.default_rng(derive_seed(seed, "cw-subset")).choice(len(y), n, replace=False))
        xs, ys = x[idx], y[idx]
        adv = _chunked(lambda xi, yi: attacks.cw_l2(
            victim, xi, yi, iterations=options.cw_iterations, confidence=options.cw_confidence,
            search_steps=options.cw_search_steps).x_adv, xs, ys)
        return (f"iters={options.cw_iterations};confidence={options.cw_confidence:g};"
                f"search_steps={options.cw_search_steps};subset={n}"), adv, ys

    def mi_row(e):
        def run():
            b = attacks.AttackBudget(epsilon=e, iterations=iters, decay=1.0)
            adv = _chunked(lambda xi, yi: attacks.mi_fgsm(surrogate, xi, yi, b).x_adv, x, y)
            return f"eps={e:g};iters={iters};decay=1;surrogate={surrogate.arch}", adv, y
        return run

    attack_jobs = [("pgd", pgd_row), ("pgd_ll", pgd_ll_row), ("cw_l2", cw_row)]
    attack_jobs += [(f"mi_fgsm_{e:g}", mi_row(e)) for e in options.mi_epsilons]

    def attack_job(name_fn):
        name, fn = name_fn
        log.info("attack %s", name)
        params, adv, labels = fn()
        acc = Fraction(_correct(victim, adv, labels), len(labels))
        return ReportRow(name, params, acc, acc / clean)

    def corruption_job(kind):
        log.info("corruption %s", kind)
        return corruption_row(victim, x, y, kind, seed, table, clean, corruption_cache)

    with ThreadPoolExecutor(max_workers=max(1, options.jobs)) as pool:
        corr = list(pool.map(corruption_job, options.kinds))
        atk = list(pool.map(attack_job, attack_jobs))

    rows = [ReportRow("clean", "", clean, Fraction(1))] + corr + atk
    opts = options.to_dict()
    opts["identity_probe_score"] = float(probe)
    return RobustnessReport(model_id(victim), clean, rows, int(seed), BENCH_VERSION, opts, report_warnings)


# --------------------------------------------------------------------------
# rendering

def _annotation(score, base_score):
    if score > base_score:
        return "+"
    if score < base_score:
        return "-"
    return ""


def _markdown(report: RobustnessReport, baseline: RobustnessReport | None):
    out = io.StringIO()
    annotate = baseline is not None
    notes = list(report.warnings)
    if baseline is not None and abs(report.a_clean - baseline.a_clean) > COMPARABLE_CLEAN_GAP:
        annotate = False
        notes.append(f"+/- annotations suppressed: clean accuracies {report.a_clean:.2f}% and "
                     f"{baseline.a_clean:.2f}% differ by more than {COMPARABLE_CLEAN_GAP} points")
    rows = [r for r in report.rows if r.name != "clean"]
    corr = [r for r in rows if r.name in KINDS[:15]]
    extra = [r for r in rows if r.name in KINDS[15:]]
    adv = [r for r in rows if r.name not in KINDS]
    out.write(f"# Robustness report `{report.model_id}`\n\n")
    out.write(f"seed {report.seed}, clean accuracy {report.a_clean:.2f}%\n")
    groups = [("Common corruptions", corr, True), ("Additional corruptions", extra, False),
              ("Adversarial attacks", adv, False)]
    if not rows:
        groups = [("Perturbations", [], True)]
    base_rows = {r.name: r for r in baseline.rows} if baseline is not None else {}
    for title, group, with_clean in groups:
        if not group and rows:
            continue
        cols = (["Clean"] if with_clean else []) + [r.name for r in group]
        out.write(f"\n## {title}\n\n")
        out.write("| Model | " + " | ".join(cols) + " |\n")
        out.write("|---" * (len(cols) + 1) + "|\n")
        lines = []
        if baseline is not None:
            cells = ([f"{baseline.a_clean:.1f}"] if with_clean else []) + [
                f"{base_rows[r.name].r_phi:.2f}" if r.name in base_rows else "n/a" for r in group]
            lines.append((baseline.model_id, cells))
        cells = [f"{report.a_clean:.1f}" + (_annotation(report.clean, baseline.clean) if annotate else "")] \
            if with_clean else []
        for r in group:
            mark = _annotation(r.score, base_rows[r.name].score) if annotate and r.name in base_rows else ""
            cells.append(f"{r.r_phi:.2f}{mark}")
        lines.append((report.model_id, cells))
        for name, cells in lines:
            out.write(f"| {name} | " + " | ".join(cells) + " |\n")
    if notes:
        out.write("\n" + "".join(f"> warning: {n}\n" for n in notes))
    return out.getvalue()


def emit_report(report: RobustnessReport, fmt: str, baseline: RobustnessReport | None = None) -> bytes:
    """Render a report as json, csv (name, params, A_phi, R_phi) or markdown."""
    if fmt == "json":
        return (json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n").encode("utf-8")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "params", "A_phi", "R_phi"])
        for r in report.rows:
            w.writerow([r.name, r.params, f"{r.a_phi:.10f}", f"{r.r_phi:.10f}"])
        return buf.getvalue().encode("utf-8")
    if fmt in ("markdown", "md"):
        return _markdown(report, baseline).encode("utf-8")
    raise ValueError(f"unknown report format {fmt!r}; expected one of {FORMATS}")


def load_report(data) -> RobustnessReport:
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    return RobustnessReport.from_dict(json.loads(data))
