"""Attention-weight analysis across reverberation times.

Collects the per-utterance, per-block mixing weights of a weighted model,
bins them by the utterance's T60 label, and reports the mean weight vector
per bin.  Column ``mean_a1`` is the weight on the exponential-dilation
branch, ``mean_a2`` the weight on the dilation-1 branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import ReverbSample
from .model import WDTCNModel, forward

__all__ = [
    "AttentionRecord",
    "T60BinSummary",
    "BinningResult",
    "UnsupportedVariantError",
    "collect_attention",
    "default_t60_edges",
    "bin_by_t60",
    "average_binnings",
    "write_t60_bins_csv",
]


class UnsupportedVariantError(ValueError):
    """Raised when attention analysis is requested for the baseline variant."""


@dataclass
class AttentionRecord:
    utterance_id: str
    t60: float
    block_index: int
    a: np.ndarray  # length Q, sums to 1


@dataclass
class T60BinSummary:
    bin_lo: float
    bin_hi: float
    mean_a: np.ndarray
    count: int  # raw (utterance, block) records in the bin


@dataclass
class BinningResult:
    bins: list[T60BinSummary]
    spilled: list[AttentionRecord]  # records whose t60 falls outside the edges


def collect_attention(
    model: WDTCNModel,
    samples: list[ReverbSample],
    ids: list[str] | None = None,
) -> list[AttentionRecord]:
    """One record per (utterance, block); deterministic in corpus order."""
    if model.config.variant != "wd-tcn":
        raise UnsupportedVariantError(
            f"attention analysis requires the wd-tcn variant, got {model.config.variant!r}"
        )
    if ids is None:
        ids = [f"utt{i:04d}" for i in range(len(samples))]
    records = []
    for utt_id, sample in zip(ids, samples):
        _, trace = forward(sample.input, model)
        for block_index, a in enumerate(trace.attention_weights):
            records.append(
                AttentionRecord(utterance_id=utt_id, t60=sample.t60, block_index=block_index, a=a)
            )
    return records


def default_t60_edges(lo: float = 0.1, hi: float = 1.0, n_bins: int = 6) -> list[float]:
    """Equal-width bin edges; the last bin is closed at ``hi``."""
    return [lo + (hi - lo) * i / n_bins for i in range(n_bins + 1)]


def bin_by_t60(records: list[AttentionRecord], edges: list[float]) -> BinningResult:
    """Mean attention per T60 bin.

    Two-stage mean: over blocks within each utterance, then over
    utterances within the bin (equal to the flat mean when every utterance
    contributes the same number of blocks).  Bin counts are in raw record
    units, so bin counts plus the spill count partition the input exactly.
    Empty bins are omitted.
    """
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError(f"bin edges must be strictly increasing, got {edges}")

    by_utt: dict[str, list[AttentionRecord]] = {}
    utt_order: list[str] = []
    for rec in records:
        if rec.utterance_id not in by_utt:
            by_utt[rec.utterance_id] = []
            utt_order.append(rec.utterance_id)
        by_utt[rec.utterance_id].append(rec)

    n_bins = len(edges) - 1
    bin_means: list[list[np.ndarray]] = [[] for _ in range(n_bins)]
    bin_counts = [0] * n_bins
    spilled: list[AttentionRecord] = []
    for utt_id in utt_order:
        utt_records = by_utt[utt_id]
        t60 = utt_records[0].t60
        idx = None
        for b in range(n_bins):
            hi_ok = t60 <= edges[b + 1] if b == n_bins - 1 else t60 < edges[b + 1]
            if edges[b] <= t60 and hi_ok:
                idx = b
                break
        if idx is None:
            spilled.extend(utt_records)
            continue
        bin_means[idx].append(np.mean([r.a for r in utt_records], axis=0))
        bin_counts[idx] += len(utt_records)

    bins = [
        T60BinSummary(
            bin_lo=edges[b],
            bin_hi=edges[b + 1],
            mean_a=np.mean(bin_means[b], axis=0),
            count=bin_counts[b],
        )
        for b in range(n_bins)
        if bin_counts[b] > 0
    ]
    return BinningResult(bins=bins, spilled=spilled)


def average_binnings(per_model_bins: list[list[T60BinSummary]]) -> list[T60BinSummary]:
    """Unweighted mean over several models' bin summaries.

    All models must have been binned over the same edges and corpus, so the
    bin windows agree; record counts may differ (models can have different
    block counts) and are summed.
    """
    if not per_model_bins:
        raise ValueError("no bin summaries to average")
    first = per_model_bins[0]
    for other in per_model_bins[1:]:
        if len(other) != len(first) or any(
            (a.bin_lo, a.bin_hi) != (b.bin_lo, b.bin_hi) for a, b in zip(first, other)
        ):
            raise ValueError("bin structure differs between models; use one corpus and one edge list")
    return [
        T60BinSummary(
            bin_lo=ref.bin_lo,
            bin_hi=ref.bin_hi,
            mean_a=np.mean([bins[i].mean_a for bins in per_model_bins], axis=0),
            count=sum(bins[i].count for bins in per_model_bins),
        )
        for i, ref in enumerate(first)
    ]


def write_t60_bins_csv(path, bins: list[T60BinSummary]) -> None:
    """CSV with full-precision fields: bin_lo,bin_hi,count,mean_a1,mean_a2."""
    with open(path, "w") as fh:
        fh.write("bin_lo,bin_hi,count,mean_a1,mean_a2\n")
        for summary in bins:
            a1, a2 = float(summary.mean_a[0]), float(summary.mean_a[1])
            fh.write(f"{summary.bin_lo!r},{summary.bin_hi!r},{summary.count},{a1!r},{a2!r}\n")
