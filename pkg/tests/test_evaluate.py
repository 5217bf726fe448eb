import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lineagediff.codec import AMINO_ACIDS
from lineagediff.evaluate import (
    evaluate,
    frequency_kl,
    header_tax_id,
    length_histogram,
    motif_match_rates,
    residue_frequencies,
    validity_rate,
)
from lineagediff.toy import make_corpus, motif_rate

seqs = st.lists(st.text(alphabet=AMINO_ACIDS, min_size=1, max_size=40), min_size=1, max_size=20)


def test_validity_rate():
    assert validity_rate(["A" * 9, "A" * 10, "A" * 30, ""]) == 0.5
    assert validity_rate([]) == 0.0


def test_length_histogram():
    assert length_histogram(["A", "A" * 9, "A" * 10, "A" * 25]) == {"0-10": 2, "10-20": 1, "20-30": 1}


def test_residue_frequencies_sum_to_one():
    f = residue_frequencies(["AAC"])
    assert f.shape == (20,)
    assert math.isclose(f.sum(), 1.0)
    assert f[0] == pytest.approx(2 / 3, rel=1e-5)


@given(seqs)
@settings(max_examples=50, deadline=None)
def test_kl_zero_on_identical(sample):
    assert frequency_kl(sample, list(sample)) == 0.0


@given(seqs, seqs)
@settings(max_examples=50, deadline=None)
def test_kl_nonnegative(a, b):
    assert frequency_kl(a, b) >= -1e-12


def test_kl_uniform_vs_skewed_positive():
    rng = np.random.default_rng(0)
    uniform = ["".join(rng.choice(list(AMINO_ACIDS), 50)) for _ in range(50)]
    skewed = ["A" * 40 + "CDEFGHIKLMNPQRSTVWY"] * 10
    assert frequency_kl(uniform, skewed) > 0.1


def test_header_tax_id():
    assert header_tax_id("sample000001 tax_id=12 guidance=1.5 seed=0") == "12"
    assert header_tax_id("sample000001 tax_id=none") == "none"
    assert header_tax_id("plain") is None
    assert header_tax_id("x other_tax_id=3") is None


def test_motif_rates_all_present():
    records = [(f"s{i} tax_id=0", "CC" + "WYKV" + "C" * i) for i in range(7)]
    assert motif_match_rates(records, {"0": "WYKV"}) == {"0": 1.0}


def test_evaluate_bundle():
    rep = evaluate([("a tax_id=1", "A" * 12), ("b tax_id=1", "C" * 3)], ["A" * 12],
                   {"1": "AAAA"}).to_dict()
    assert rep["num_sequences"] == 2
    assert rep["validity_rate"] == 0.5
    assert rep["motif_match"] == {"1": 0.5}
    assert rep["frequency_kl"] > 0


# --- toy corpus -------------------------------------------------------------------

def test_toy_corpus_shape():
    corpus = make_corpus(n=300, seed=1)
    assert len(corpus.records) == 300
    assert len(set(corpus.motifs)) == 3 and all(len(m) == 4 for m in corpus.motifs)
    for rid, seq, cid in corpus.records:
        assert corpus.motifs[cid] in seq
        assert 12 <= len(seq) <= 24
        assert f"class={cid}" in rid
    assert sorted(set(corpus.labels)) == [0, 1, 2]


def test_toy_corpus_deterministic():
    assert make_corpus(n=50, seed=4) == make_corpus(n=50, seed=4)
    assert make_corpus(n=50, seed=4) != make_corpus(n=50, seed=5)


def test_motif_rate():
    assert motif_rate(["AVPMG", "VPM", "XXVPMGX"], "VPMG") == pytest.approx(2 / 3)
    assert motif_rate([], "A") == 0.0
