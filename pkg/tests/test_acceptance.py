"""Acceptance suite: one test per criterion, each printing a single pass/fail line.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary section at
the end of the session lists every criterion.
"""

import math
import time
from pathlib import Path

import numpy as np
import torch
from scipy import integrate, stats

from lineagediff.ablation import AblationConfig, run_ablation
from lineagediff.cli import main
from lineagediff.codec import AMINO_ACIDS, PAD, STOP, decode, encode
from lineagediff.denoiser import Denoiser, global_attention, local_attention
from lineagediff.diffusion import (
    DTYPE,
    GuidanceConfig,
    build_schedule,
    guided_epsilon,
    kl_gaussian_diag,
    loss_mse,
    p_mean_variance,
    posterior_mean_variance,
    q_sample,
    sample_loop,
)
from lineagediff.gradcheck import randomize, run_gradcheck, tiny_config
from lineagediff.taxonomy import lineage, parse_taxdump, reclassify
from lineagediff.toy import TOY_RECIPE, run_conditional_experiment

DATA = Path(__file__).parent / "data"


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=DTYPE)


def test_criterion_01_gradient_correctness(acceptance):
    start = time.perf_counter()
    reports = [run_gradcheck(tiny_config(m), seed=0) for m in "ABCDE"]
    elapsed = time.perf_counter() - start
    worst = max(reports, key=lambda r: r.max_rel_error)
    acceptance(1, worst.max_rel_error < 1e-4 and elapsed < 60,
               f"max rel error {worst.max_rel_error:.2e} (method {worst.method}, {worst.worst_param}); "
               f"{elapsed:.1f}s for A-E")


def test_criterion_02_guidance_identity(acceptance):
    cfg = tiny_config("B")
    model = randomize(Denoiser(cfg), 1, scale=0.5)
    sched = build_schedule(cfg.T)
    single = sample_loop(model, sched, GuidanceConfig(1.0, cfg.null_label), 2,
                         torch.Generator().manual_seed(9), 8)
    guided = sample_loop(model, sched, GuidanceConfig(1.0, cfg.null_label, force_two_pass=True), 2,
                         torch.Generator().manual_seed(9), 8)
    gap = (single - guided).abs().max().item()
    a = rand(3, 16, 6, seed=4)
    fixed = all(torch.equal(guided_epsilon(a, a.clone(), s), a) for s in (0, 1, 2, 7.5))
    acceptance(2, gap <= 1e-12 and fixed, f"s=1 two-pass vs single-pass max gap {gap:.1e}; "
               f"guided_epsilon(a, a, s) == a: {fixed}")


def test_criterion_03_local_global_coincidence(acceptance):
    x = rand(2, 16, 8)
    wq, wk, wv = rand(8, 8, seed=1), rand(8, 8, seed=2), rand(8, 8, seed=3)
    loc = local_attention(x, wq[None], wk[None], wv[None], patch=16)
    glo = global_attention(x, wq, wk, wv, torch.eye(8, dtype=DTYPE), heads=1)
    gap = (loc - glo).abs().max().item()

    leak = 0.0
    for patch in (2, 4, 8):
        n = 16 // patch
        w = rand(n, 8, 8, seed=patch)
        jac = torch.autograd.functional.jacobian(lambda z: local_attention(z, w, w, w, patch), x[0])
        block = torch.arange(16) // patch
        cross = block[:, None] != block[None, :]
        leak = max(leak, jac.permute(0, 2, 1, 3)[cross].abs().max().item())
    acceptance(3, gap <= 1e-12 and leak == 0.0,
               f"single-patch gap {gap:.1e}; cross-patch sensitivity {leak} for P in (2, 4, 8)")


def test_criterion_04_adaln_zero_identity(acceptance):
    deviation, head = 0.0, 0.0
    for method in "ABCDE":
        cfg = tiny_config(method, D_in=22)
        model = Denoiser(cfg, seed=5)
        tokens = rand(4, cfg.L + 2, cfg.width, seed=6)
        cond = rand(4, cfg.width, seed=7)
        deviation = max(deviation, (model.block_stack(tokens, cond) - tokens).abs().max().item())
        out = model(rand(4, cfg.L, cfg.D_in), torch.tensor([1, 3, 7, 10]), torch.tensor([0, 1, 2, 3]))
        head = max(head, out.eps_pred.abs().max().item(), out.v_raw.abs().max().item())

    cfg = tiny_config("A", D_in=22)
    model = Denoiser(cfg, seed=5)
    sched = build_schedule(cfg.T)
    g = torch.Generator().manual_seed(11)
    n = 300
    x0 = torch.nn.functional.one_hot(torch.randint(0, 22, (n, cfg.L), generator=g), 22).to(DTYPE)
    eps = torch.randn(x0.shape, generator=g, dtype=DTYPE)
    t = torch.randint(1, cfg.T + 1, (n,), generator=g)
    y = torch.randint(0, cfg.num_classes + 1, (n,), generator=g)
    with torch.no_grad():
        mse = loss_mse(model(q_sample(x0, t, eps, sched), t, y).eps_pred, eps).item()
    acceptance(4, deviation <= 1e-12 and head == 0.0 and abs(mse - 1.0) <= 0.02,
               f"block-stack deviation {deviation:.1e}; head max |out| {head}; "
               f"initial MSE {mse:.4f} over {eps.numel()} entries")


def _kl_quadrature(m1, v1, m2, v2):
    q, p = stats.norm(m1, math.sqrt(v1)), stats.norm(m2, math.sqrt(v2))
    lo, hi = m1 - 40 * math.sqrt(v1), m1 + 40 * math.sqrt(v1)
    value, _ = integrate.quad(lambda z: q.pdf(z) * (q.logpdf(z) - p.logpdf(z)), lo, hi,
                              epsabs=1e-13, epsrel=1e-13, limit=200)
    return value


def test_criterion_05_diffusion_algebra(acceptance):
    mono = 0.0
    identity = 0.0
    for T, kind in ((4, "linear"), (4, "cosine"), (10, "linear"), (50, "cosine"), (1000, "linear")):
        s = build_schedule(T, kind)
        mono = max(mono, float(np.max(np.diff(s.alpha_bar))))
        x0 = torch.nn.functional.one_hot(torch.randint(0, 22, (T, 8), generator=torch.Generator()
                                                       .manual_seed(T)), 22).to(DTYPE)
        eps = rand(T, 8, 22, seed=T + 1)
        t = torch.arange(1, T + 1)
        x_t = q_sample(x0, t, eps, s)
        eps_mean = p_mean_variance(eps, torch.zeros_like(eps), x_t, t, s).mean
        post_mean = posterior_mean_variance(x0, x_t, t, s).mean
        identity = max(identity, (eps_mean - post_mean).abs().max().item())

    kl_gap = 0.0
    for m1, v1, m2, v2 in ((0.0, 2.0, 0.0, 1.0), (0.3, 0.25, -0.4, 1.69), (1.5, 0.01, 1.4, 0.02),
                           (-2.0, 3.0, 0.5, 0.7)):
        closed = kl_gaussian_diag(m1, v1, m2, v2).item()
        kl_gap = max(kl_gap, abs(closed - _kl_quadrature(m1, v1, m2, v2)))

    s = build_schedule(10)
    n = 100_000
    x0 = torch.tensor([1.0, 0.0, -0.5], dtype=DTYPE).expand(n, 3)
    xt = q_sample(x0, torch.full((n,), 6), rand(n, 3, seed=2), s)
    ab = s.alpha_bar[5]
    mean_err = ((xt.mean(0) - math.sqrt(ab) * x0[0]).abs() / 1.0).max().item()
    var_err = ((xt.var(0) / (1 - ab)) - 1).abs().max().item()

    passed = mono <= 1e-15 and identity <= 1e-10 and kl_gap <= 1e-6 and mean_err <= 0.01 and var_err <= 0.01
    acceptance(5, passed, f"max alpha_bar increase {mono:.1e}; eps-mean vs posterior mean {identity:.1e}; "
               f"KL vs quadrature {kl_gap:.1e}; q_sample mean err {mean_err:.4f}, var rel err {var_err:.4f}")


def test_criterion_06_codec(acceptance):
    rng = np.random.default_rng(6)
    letters = np.array(list(AMINO_ACIDS))
    failures = 0
    for _ in range(10_000):
        seq = "".join(rng.choice(letters, size=int(rng.integers(1, 256))))
        failures += decode(encode(seq, L=256)) != seq

    tie = encode("WW", L=4)
    tie[0] = 0.0
    tie[0, 0] = tie[0, 2] = 1.0
    stop = encode("ACDEFGHIK", L=16)
    stop[3] = 0.0
    stop[3, STOP] = 0.7
    pad = encode("ACDEFGHIK", L=16)
    pad[5] = 0.0
    pad[5, PAD] = 1.0
    crafted = decode(tie) == "AW" and decode(stop) == "ACD" and decode(pad) == "ACDEF"
    acceptance(6, failures == 0 and crafted,
               f"{failures} round-trip failures in 10000 cases; tie-break/truncation checks: {crafted}")


def test_criterion_07_taxonomy(acceptance):
    def load():
        return parse_taxdump((DATA / "deep_nodes.dmp").read_bytes(), (DATA / "deep_names.dmp").read_bytes())

    expected = {1: 0, 2: 1, 10: 2, 11: 3, 12: 4, 13: 5, 14: 6, 15: 7,
                16: 8, 17: 8, 18: 8, 19: 8, 20: 9, 21: 9, 30: 10, 31: 11, 32: 12}
    tree = load()
    rc = reclassify(tree, layer=9)
    rooted = all(lineage(tree, t)[0].id == tree.root for t in tree.nodes)
    runs = [reclassify(load(), layer=9) for _ in range(5)]
    stable = all(r.mapping == rc.mapping and r.registry == rc.registry for r in runs)
    acceptance(7, rc.mapping == expected and rooted and stable,
               f"class map matches fixture: {rc.mapping == expected}; all lineages reach root: {rooted}; "
               f"5 runs identical: {stable}")


def test_criterion_08_toy_conditional_generation(acceptance):
    result = run_conditional_experiment(TOY_RECIPE)
    ok_rates = all(c >= 2 * u and c > 0 for c, u in zip(result.conditional, result.unconditional))
    passed = ok_rates and result.validity >= 0.9 and result.train_seconds <= 1800
    rates = ", ".join(f"class {k}: {c:.3f} vs {u:.3f}"
                      for k, (c, u) in enumerate(zip(result.conditional, result.unconditional)))
    acceptance(8, passed, f"motif rate conditional vs unconditional [{rates}]; "
               f"unconditional validity {result.validity:.3f}; training {result.train_seconds:.0f}s")


def test_criterion_09_ablation_harness(acceptance):
    cfg = AblationConfig(steps=10, samples=4)
    first = run_ablation(cfg)
    second = run_ablation(cfg)

    def strip(rows):
        return [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows]

    settings = [(r["sweep"], r["patch"], r["method"]) for r in first]
    expected = [("patch", p, "A") for p in (4, 8, 16, 32, 64)] + [("method", 16, m) for m in "ABCDE"]
    acceptance(9, settings == expected and strip(first) == strip(second),
               f"{len(first)} rows for {len(expected)} settings; rerun identical: {strip(first) == strip(second)}")


def test_criterion_10_reproducibility(acceptance, tmp_path):
    toy = tmp_path / "toy"
    assert main(["toy-corpus", "--out", str(toy), "--num", "120", "--seed", "3"]) == 0
    assert main(["taxonomy-build", "--nodes", str(toy / "nodes.dmp"), "--out", str(tmp_path / "map.tsv")]) == 0
    assert main(["dataset-prepare", "--fasta", str(toy / "sequences.fasta"), "--taxmap", str(tmp_path / "map.tsv"),
                 "--labels", str(toy / "labels.tsv"), "--out", str(tmp_path / "ds")]) == 0
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"model": {"L": 32, "width": 16, "heads": 2, "patch": 8, "blocks": 2, "T": 20},'
                   ' "train": {"batch_size": 16, "learning_rate": 0.001}}')
    ckpts, fastas = [], []
    for run in ("a", "b"):
        ck, fa = tmp_path / f"{run}.ckpt", tmp_path / f"{run}.fasta"
        assert main(["train", "--dataset", str(tmp_path / "ds"), "--config", str(cfg), "--steps", "20",
                     "--seed", "4", "--out", str(ck)]) == 0
        assert main(["sample", "--ckpt", str(ck), "--num", "50", "--tax-id", "1", "--seed", "8",
                     "--out", str(fa)]) == 0
        ckpts.append(ck.read_bytes())
        fastas.append(fa.read_bytes())
    same_ck, same_fa = ckpts[0] == ckpts[1], fastas[0] == fastas[1]
    acceptance(10, same_ck and same_fa,
               f"checkpoints bitwise equal: {same_ck} ({len(ckpts[0])} bytes); FASTA equal: {same_fa}")
