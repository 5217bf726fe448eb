"""Protein sequence <-> continuous L x D one-hot matrices, plus FASTA I/O."""

from __future__ import annotations

import io
from typing import Iterable, Iterator, Sequence, Union

import numpy as np

from .errors import (
    DecodesEmpty,
    EmptySequence,
    InvalidResidue,
    MalformedFasta,
    SequenceTooLong,
)

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
STOP = 20
PAD = 21
VOCAB_SIZE = 22
TOKENS = tuple(AMINO_ACIDS) + ("*", "-")
TOKEN_TO_INDEX = {tok: i for i, tok in enumerate(TOKENS)}

DEFAULT_LENGTH = 256
FASTA_WIDTH = 60

SequenceLike = Union[str, Sequence[int]]


def to_indices(seq: SequenceLike, record_id: str | None = None) -> list[int]:
    """Validate a residue string (or index list) and return residue indices."""
    if isinstance(seq, str):
        out = []
        for pos, ch in enumerate(seq.upper()):
            idx = TOKEN_TO_INDEX.get(ch)
            if idx is None or idx >= STOP:
                raise InvalidResidue(record_id, ch, pos)
            out.append(idx)
        return out
    out = [int(i) for i in seq]
    for pos, idx in enumerate(out):
        if not 0 <= idx < STOP:
            raise InvalidResidue(record_id, idx, pos)
    return out


def to_string(indices: Iterable[int]) -> str:
    return "".join(AMINO_ACIDS[i] for i in indices)


def encode(seq: SequenceLike, L: int = DEFAULT_LENGTH, amplitude: float = 1.0) -> np.ndarray:
    """One-hot encode ``seq`` into an ``L x 22`` float64 matrix.

    Residues fill the leading rows, one STOP row follows, and the rest is PAD.
    Hot entries equal ``amplitude``.
    """
    if amplitude <= 0:
        raise ValueError(f"amplitude must be positive, got {amplitude}")
    residues = to_indices(seq)
    n = len(residues)
    if n == 0:
        raise EmptySequence("cannot encode an empty sequence")
    if n > L - 1:
        raise SequenceTooLong(f"sequence of length {n} does not fit L={L} (max {L - 1})")
    hot = np.full(L, PAD, dtype=np.int64)
    hot[:n] = residues
    hot[n] = STOP
    x = np.zeros((L, VOCAB_SIZE), dtype=np.float64)
    x[np.arange(L), hot] = amplitude
    return x


def encode_batch(seqs: Sequence[SequenceLike], L: int = DEFAULT_LENGTH,
                 amplitude: float = 1.0) -> np.ndarray:
    return np.stack([encode(s, L, amplitude) for s in seqs]) if seqs else \
        np.zeros((0, L, VOCAB_SIZE))


def decode_indices(x0) -> list[int]:
    """Argmax each row and cut at the first STOP or PAD. Ties go to the lower index."""
    arr = np.asarray(x0)
    if arr.ndim != 2:
        raise ValueError(f"expected an L x D matrix, got shape {arr.shape}")
    hot = arr.argmax(axis=1)
    stops = np.flatnonzero(hot >= STOP)
    end = int(stops[0]) if stops.size else len(hot)
    return hot[:end].tolist()


def decode(x0) -> str:
    residues = decode_indices(x0)
    if not residues:
        raise DecodesEmpty("first row decodes to STOP/PAD")
    return to_string(residues)


def decode_lenient(x0) -> str:
    """Like :func:`decode` but returns ``""`` instead of raising."""
    return to_string(decode_indices(x0))


# --- FASTA -------------------------------------------------------------------

def _as_text(data) -> str:
    if isinstance(data, (bytes, bytearray)):
        return data.decode("utf-8")
    if isinstance(data, str):
        return data
    content = data.read()
    return content.decode("utf-8") if isinstance(content, bytes) else content


def iter_fasta(data) -> Iterator[tuple[str, str]]:
    """Yield raw ``(header, sequence)`` pairs without alphabet validation."""
    header = None
    chunks: list[str] = []
    for lineno, line in enumerate(_as_text(data).splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith(">"):
            if header is not None:
                yield header, "".join(chunks)
            header = line[1:].strip()
            if not header:
                raise MalformedFasta(f"line {lineno}: empty header")
            chunks = []
        elif header is None:
            raise MalformedFasta(f"line {lineno}: sequence data before first header")
        else:
            chunks.append("".join(line.split()))
    if header is not None:
        yield header, "".join(chunks)


def parse_fasta(data) -> list[tuple[str, str]]:
    """Parse FASTA text/bytes/stream into ``(id, sequence)`` records.

    The id is the full header line without ``>``. Residues are upper-cased and
    validated against the 20 canonical amino acids.
    """
    records = []
    for header, seq in iter_fasta(data):
        to_indices(seq, record_id=header)
        records.append((header, seq.upper()))
    return records


def write_fasta(records: Iterable[tuple[str, SequenceLike]], width: int = FASTA_WIDTH) -> bytes:
    buf = io.StringIO()
    for rid, seq in records:
        text = seq.upper() if isinstance(seq, str) else to_string(seq)
        to_indices(text, record_id=rid)
        buf.write(f">{rid}\n")
        for i in range(0, len(text), width):
            buf.write(text[i:i + width] + "\n")
    return buf.getvalue().encode("utf-8")
