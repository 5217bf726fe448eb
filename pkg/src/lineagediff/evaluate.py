"""Sequence-level metrics for generated FASTA."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .codec import AMINO_ACIDS

MIN_VALID_LENGTH = 10
DEFAULT_PSEUDOCOUNT = 1e-6
_TAX_FIELD = re.compile(r"(?:^|\s)tax_id=(\S+)")


def validity_rate(sequences, min_length: int = MIN_VALID_LENGTH) -> float:
    seqs = list(sequences)
    if not seqs:
        return 0.0
    return sum(len(s) >= min_length for s in seqs) / len(seqs)


def length_histogram(sequences, bin_width: int = 10) -> dict[str, int]:
    """Counts per ``[lo, hi)`` length bin, keyed ``"lo-hi"`` in ascending order."""
    counts = Counter(len(s) // bin_width for s in sequences)
    return {f"{b * bin_width}-{(b + 1) * bin_width}": counts[b] for b in sorted(counts)}


def residue_frequencies(sequences, pseudocount: float = DEFAULT_PSEUDOCOUNT) -> np.ndarray:
    """Smoothed frequency vector over the 20 standard residues."""
    counts = Counter()
    for s in sequences:
        counts.update(s)
    raw = np.array([counts[a] for a in AMINO_ACIDS], dtype=np.float64) + pseudocount
    return raw / raw.sum()


def frequency_kl(generated, reference, pseudocount: float = DEFAULT_PSEUDOCOUNT) -> float:
    """KL(generated || reference) of residue frequencies, in nats."""
    p = residue_frequencies(generated, pseudocount)
    q = residue_frequencies(reference, pseudocount)
    return float(np.sum(p * (np.log(p) - np.log(q))))


def header_tax_id(header: str) -> str | None:
    m = _TAX_FIELD.search(header)
    return m.group(1) if m else None


def motif_match_rates(records, motifs: dict[str, str]) -> dict[str, float | None]:
    """Per class, the fraction of records labeled with that class whose sequence holds its motif.

    ``records`` are ``(header, sequence)`` pairs whose headers carry
    ``tax_id=<class>``; ``motifs`` maps the same class keys to motif strings.
    Classes with no records are reported as None.
    """
    hits: dict[str, list[bool]] = {str(k): [] for k in motifs}
    for header, seq in records:
        key = header_tax_id(header)
        if key in hits:
            hits[key].append(motifs[key] in seq)
    return {k: (sum(v) / len(v) if v else None) for k, v in hits.items()}


@dataclass
class EvalReport:
    num_sequences: int
    validity_rate: float
    length_histogram: dict[str, int]
    frequency_kl: float | None
    motif_match: dict[str, float | None] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(records, reference=None, motifs: dict[str, str] | None = None,
             pseudocount: float = DEFAULT_PSEUDOCOUNT) -> EvalReport:
    records = list(records)
    seqs = [s for _, s in records]
    return EvalReport(
        num_sequences=len(seqs),
        validity_rate=validity_rate(seqs),
        length_histogram=length_histogram(seqs),
        frequency_kl=None if reference is None else frequency_kl(seqs, list(reference), pseudocount),
        motif_match=motif_match_rates(records, motifs) if motifs else {},
    )
