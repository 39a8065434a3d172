"""Character error rate, training throughput and real-time-factor measurement."""

from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from threadpoolctl import threadpool_limits


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit substitution, insertion and deletion costs."""
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def cer(ref: Sequence, hyp: Sequence) -> float:
    if len(ref) == 0:
        raise ValueError("CER is undefined for an empty reference")
    return edit_distance(ref, hyp) / len(ref)


def corpus_cer(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    """Total edits over total reference characters, in percent."""
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    total = sum(len(r) for r in refs)
    if total == 0:
        raise ValueError("CER is undefined for an empty reference set")
    return 100.0 * sum(edit_distance(r, h) for r, h in zip(refs, hyps)) / total


def measure_throughput(step_timings: Sequence[Tuple[int, float]], skip: int = 50) -> float:
    """Utterances per second over the steps after the first ``skip`` (warm-up) ones.

    ``step_timings`` holds (utterances processed, wall seconds) per training step.
    """
    window = list(step_timings)[skip:]
    if not window:
        raise ValueError(f"need more than {skip} steps to measure throughput, got {len(step_timings)}")
    utts = sum(n for n, _ in window)
    secs = sum(s for _, s in window)
    if utts == 0:
        raise ValueError("no utterances processed in the measurement window")
    if secs <= 0:
        raise ValueError("measurement window has zero duration")
    return utts / secs


@dataclass
class BenchItem:
    uid: str
    features: np.ndarray
    audio_seconds: float
    reference: Optional[Sequence[int]] = None


@dataclass
class BenchRow:
    uid: str
    audio_seconds: float
    decode_wall_seconds: float
    rtf: float


@dataclass
class BenchReport:
    rows: List[BenchRow] = field(default_factory=list)
    mean_rtf: float = 0.0
    stddev_rtf: float = 0.0
    utt_per_sec: float = 0.0
    cer: Optional[float] = None
    threads: int = 1
    batch_size: int = 1
    boundary: str = "normalized features ready -> final hypothesis (feature extraction excluded)"

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("rows")
        d["num_utterances"] = len(self.rows)
        return d

    def to_text(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["uid", "audio_seconds", "decode_wall_seconds", "rtf"])
            for r in self.rows:
                w.writerow([r.uid, f"{r.audio_seconds:.6f}", f"{r.decode_wall_seconds:.6f}", f"{r.rtf:.6f}"])


def rtf_stats(rows: Sequence[BenchRow]) -> Tuple[float, float]:
    values = [r.rtf for r in rows]
    return statistics.fmean(values), statistics.pstdev(values)


def measure_rtf(decode: Callable, corpus: Iterable[BenchItem], warmup: bool = True,
                clock: Callable[[], float] = time.perf_counter) -> BenchReport:
    """Decode one utterance at a time on a single thread and time each call.

    ``decode`` maps a (T, F) feature matrix to a hypothesis (token sequence or an
    object with ``tokens``). Timing starts once features are in memory, so
    feature extraction is outside the measurement.
    """
    items = list(corpus)
    if not items:
        raise ValueError("cannot benchmark an empty corpus")
    report = BenchReport()
    hyps = []
    with threadpool_limits(limits=1):
        if warmup:
            decode(items[0].features)
        for item in items:
            if np.asarray(item.features).ndim != 2:
                raise ValueError(f"{item.uid}: decoding is batch-1; expected a (T, F) matrix")
            if item.audio_seconds <= 0:
                raise ValueError(f"{item.uid}: audio duration must be positive")
            start = clock()
            hyp = decode(item.features)
            elapsed = clock() - start
            hyps.append(getattr(hyp, "tokens", hyp))
            report.rows.append(BenchRow(item.uid, item.audio_seconds, elapsed, elapsed / item.audio_seconds))
    report.mean_rtf, report.stddev_rtf = rtf_stats(report.rows)
    total = sum(r.decode_wall_seconds for r in report.rows)
    report.utt_per_sec = len(items) / total if total > 0 else float("inf")
    if all(it.reference is not None for it in items):
        report.cer = corpus_cer([it.reference for it in items], hyps)
    return report
