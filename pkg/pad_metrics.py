#!/usr/bin/env python3
"""
pad_metrics.py
--------------
Presentation-attack-detection metrics and evaluation reports.

Scores are attack probabilities (higher = more attack-like); a sample is
predicted attack iff score >= threshold.  All rates are in percent.

– APCER  = % attacks classified bona fide
– BPCER  = % bona fide classified attack
– ACER   = (APCER + BPCER) / 2
– EER    = crossing of APCER and BPCER over the threshold sweep, linearly
           interpolated between the two bracketing operating points
– TDR@FDR = % attacks detected at the smallest threshold whose bona fide
           false-detection rate is within FDR

Reads / writes
    score CSV    sample_id,subject_id,label,attack_type,score
    report JSON  every MetricsReport field, DET operating points, and the
                 mean/std fold aggregation when several folds are evaluated
    report.md    Markdown summary rendered from templates/report.md.j2
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from jinja2 import Environment, FileSystemLoader, StrictUndefined

from face_manifest import Label
from pad_errors import MetricsError

log = logging.getLogger(__name__)

SCORE_COLUMNS = ["sample_id", "subject_id", "label", "attack_type", "score"]
DEFAULT_THRESHOLD = 0.5
DEFAULT_FDR = 1.0
TEMPLATE_DIR = Path(__file__).resolve().parent / "templates"
THRESHOLD_NOTE = ("APCER/BPCER/ACER use a fixed decision threshold on the attack "
                  "probability (default 0.5, set with evaluate.threshold)")
REPORT_FIELDS = ["accuracy", "apcer", "bpcer", "acer", "eer", "eer_threshold", "tdr_at_fdr"]


@dataclass(frozen=True)
class ScoredSample:
    sample_id: str
    label: Label
    attack_type: Optional[str]
    score: float
    subject_id: str = ""

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise MetricsError(f"sample {self.sample_id}: score {self.score} is not finite")


@dataclass
class MetricsReport:
    accuracy: float
    apcer: float
    bpcer: float
    acer: float
    eer: float
    eer_threshold: float
    tdr_at_fdr: float
    fdr: float
    operating_threshold: float
    n_bona_fide: int
    n_attack: int
    per_attack_type: Dict[str, float] = field(default_factory=dict)
    threshold_note: str = THRESHOLD_NOTE

    def as_dict(self) -> Dict:
        return asdict(self)


# ------------------------------------------------------------------ helpers
def _split(scores: Sequence[ScoredSample]) -> Tuple[np.ndarray, np.ndarray]:
    live = np.array([s.score for s in scores if s.label == Label.BONA_FIDE], dtype=np.float64)
    attack = np.array([s.score for s in scores if s.label == Label.ATTACK], dtype=np.float64)
    if len(live) == 0 or len(attack) == 0:
        raise MetricsError(f"metrics need both classes; got {len(live)} bona fide "
                           f"and {len(attack)} attack scores")
    return np.sort(live), np.sort(attack)


def _rates(live: np.ndarray, attack: np.ndarray, thresholds) -> Tuple[np.ndarray, np.ndarray]:
    """(APCER, BPCER) in percent at each threshold; inputs must be sorted."""
    t = np.asarray(thresholds, dtype=np.float64)
    apcer = 100.0 * np.searchsorted(attack, t, side="left") / len(attack)
    bpcer = 100.0 * (len(live) - np.searchsorted(live, t, side="left")) / len(live)
    return apcer, bpcer


def acer(apcer: float, bpcer: float) -> float:
    return (apcer + bpcer) / 2.0


def operating_points(scores: Sequence[ScoredSample]) -> List[Dict[str, float]]:
    """APCER/BPCER at every distinct score, for external DET plotting."""
    live, attack = _split(scores)
    thresholds = np.unique(np.concatenate([live, attack]))
    ap, bp = _rates(live, attack, thresholds)
    return [{"threshold": float(t), "apcer": float(a), "bpcer": float(b)}
            for t, a, b in zip(thresholds, ap, bp)]


# ------------------------------------------------------------------ metrics
def eer(scores: Sequence[ScoredSample]) -> Tuple[float, float]:
    """Returns (eer_percent, threshold)."""
    live, attack = _split(scores)
    thresholds = np.concatenate([[-np.inf], np.unique(np.concatenate([live, attack])), [np.inf]])
    ap, bp = _rates(live, attack, thresholds)
    diff = ap - bp                      # nondecreasing, -100 at -inf, +100 at +inf
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0:
        return float(ap[i]), float(thresholds[i])

    t0, t1 = thresholds[i - 1], thresholds[i]
    frac = -diff[i - 1] / (diff[i] - diff[i - 1])
    rate = ap[i - 1] + frac * (ap[i] - ap[i - 1])
    if not np.isfinite(t0):
        thr = t1
    elif not np.isfinite(t1):
        thr = t0
    else:
        thr = t0 + frac * (t1 - t0)
    return float(rate), float(thr)


def tdr_at_fdr(scores: Sequence[ScoredSample], fdr_percent: float = DEFAULT_FDR) -> float:
    if not 0.0 <= fdr_percent <= 100.0:
        raise MetricsError(f"fdr must be in [0, 100], got {fdr_percent}")
    live, attack = _split(scores)
    thresholds = np.concatenate([np.unique(np.concatenate([live, attack])), [np.inf]])
    ap, bp = _rates(live, attack, thresholds)
    ok = np.flatnonzero(bp <= fdr_percent)
    return float(100.0 - ap[ok[0]])


def compute_pad_metrics(scores: Sequence[ScoredSample], threshold: float = DEFAULT_THRESHOLD,
                        fdr_percent: float = DEFAULT_FDR) -> MetricsReport:
    live, attack = _split(scores)
    ap, bp = (float(v[0]) for v in _rates(live, attack, [threshold]))
    correct = (int(np.sum(attack >= threshold)) + int(np.sum(live < threshold)))
    accuracy = 100.0 * correct / (len(live) + len(attack))

    per_type: Dict[str, List[bool]] = {}
    for s in scores:
        if s.label == Label.ATTACK and s.attack_type:
            per_type.setdefault(s.attack_type, []).append(s.score < threshold)
    per_type_apcer = {k: 100.0 * float(np.mean(v)) for k, v in sorted(per_type.items())}

    eer_rate, eer_thr = eer(scores)
    return MetricsReport(
        accuracy=accuracy, apcer=ap, bpcer=bp, acer=acer(ap, bp),
        eer=eer_rate, eer_threshold=eer_thr,
        tdr_at_fdr=tdr_at_fdr(scores, fdr_percent), fdr=float(fdr_percent),
        operating_threshold=float(threshold),
        n_bona_fide=len(live), n_attack=len(attack),
        per_attack_type=per_type_apcer,
    )


def aggregate_folds(reports: Sequence[MetricsReport]) -> Dict[str, Dict[str, float]]:
    """mean ± sample std of each rate across folds (std 0 for a single fold)."""
    if not reports:
        raise MetricsError("no fold reports to aggregate")
    frame = pd.DataFrame([{k: getattr(r, k) for k in REPORT_FIELDS} for r in reports])
    stats = frame.agg(["mean", "std"]).fillna(0.0)
    return {k: {"mean": float(stats.at["mean", k]), "std": float(stats.at["std", k])}
            for k in REPORT_FIELDS}


# ------------------------------------------------------------------ score file IO
def scores_frame(scores: Sequence[ScoredSample]) -> pd.DataFrame:
    return pd.DataFrame(
        [[s.sample_id, s.subject_id, s.label.token, s.attack_type or "", s.score] for s in scores],
        columns=SCORE_COLUMNS)


def write_scores(scores: Sequence[ScoredSample], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scores_frame(scores).to_csv(path, index=False, float_format="%.8f", lineterminator="\n")
    return path


def read_scores(path) -> List[ScoredSample]:
    path = Path(path)
    if not path.exists():
        raise MetricsError(f"score file not found: {path}")
    table = pd.read_csv(path, dtype={"sample_id": str, "subject_id": str, "attack_type": str},
                        keep_default_na=False)
    missing = [c for c in SCORE_COLUMNS if c not in table.columns]
    if missing:
        raise MetricsError(f"{path}: score file lacks columns {missing}")
    out = []
    for lineno, row in enumerate(table.itertuples(index=False), start=2):
        try:
            out.append(ScoredSample(
                sample_id=row.sample_id,
                subject_id=row.subject_id,
                label=Label.parse(str(row.label)),
                attack_type=row.attack_type or None,
                score=float(row.score),
            ))
        except ValueError as exc:
            raise MetricsError(f"{path}:{lineno}: {exc}") from exc
    return out


# ------------------------------------------------------------------ reports
def build_report(report: MetricsReport, scores: Sequence[ScoredSample] = None,
                 folds: Sequence[MetricsReport] = None, attention_sanity: Optional[Dict] = None) -> Dict:
    doc = report.as_dict()
    if attention_sanity is not None:
        doc["attention_sanity"] = dict(attention_sanity)
    if scores is not None:
        doc["operating_points"] = operating_points(scores)
    if folds:
        doc["folds"] = [f.as_dict() for f in folds]
        doc["aggregate"] = aggregate_folds(folds)
    return doc


def write_report(doc: Dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def render_markdown(doc: Dict, title: str = "PAD evaluation") -> str:
    env = Environment(loader=FileSystemLoader(str(TEMPLATE_DIR)), undefined=StrictUndefined,
                      trim_blocks=True, lstrip_blocks=True, keep_trailing_newline=True)
    return env.get_template("report.md.j2").render(
        title=title, report=doc, fields=REPORT_FIELDS, folds=doc.get("folds"),
        aggregate=doc.get("aggregate"), sanity=doc.get("attention_sanity"))


def write_markdown(doc: Dict, path, title: str = "PAD evaluation") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_markdown(doc, title), encoding="utf-8")
    return path


def main(score_paths: Sequence[str], out_path: str, threshold: float = DEFAULT_THRESHOLD,
         fdr_percent: float = DEFAULT_FDR, attention_sanity: Optional[Dict] = None) -> Dict:
    """One score file → single report; several → per-fold reports plus the aggregate."""
    per_file = [read_scores(p) for p in score_paths]
    folds = [compute_pad_metrics(s, threshold, fdr_percent) for s in per_file]
    pooled = [s for scores in per_file for s in scores]
    report = compute_pad_metrics(pooled, threshold, fdr_percent)
    doc = build_report(report, pooled, folds if len(folds) > 1 else None, attention_sanity)
    out = write_report(doc, out_path)
    write_markdown(doc, out.with_suffix(".md"))
    print(f"✅ ACER {report.acer:.2f}%  EER {report.eer:.2f}%  → {out}")
    if attention_sanity is not None:
        mark = "✅" if attention_sanity["passed"] else "❌"
        print(f"{mark} planted regions out-attend clean ones in {attention_sanity['n_hits']}/"
              f"{attention_sanity['n_samples']} attack samples")
    return doc


if __name__ == "__main__":
    import sys
    main(sys.argv[2:], sys.argv[1])
