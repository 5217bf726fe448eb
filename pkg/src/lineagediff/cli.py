"""Command-line entry points.

Exit codes: 0 success, 2 input error, 3 numeric failure, 4 checkpoint or
config incompatibility, 5 self-check failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .ablation import AblationConfig, default_settings, run_ablation
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import decode_lenient, encode_batch, parse_fasta, write_fasta
from .denoiser import TINY_CONFIG, DenoiserConfig
from .diffusion import GuidanceConfig, build_schedule, sample_loop
from .errors import InputError, InvalidLabel, LineageDiffError, VersionMismatch
from .evaluate import MIN_VALID_LENGTH, evaluate
from .gradcheck import run_gradcheck, tiny_config
from .taxonomy import class_stats, parse_taxdump, reclassify
from .toy import make_corpus
from .training import TrainConfig, TrainingState, fit, new_state

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_COMPAT, EXIT_SELF_CHECK = 0, 2, 3, 4, 5
SEED_ENV = "TAXDIFF_SEED"
RECORDS_FILE = "records.tsv"
META_FILE = "meta.json"


class SelfCheckFailed(LineageDiffError):
    exit_code = EXIT_SELF_CHECK


# --- helpers ------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_seed(flag: int | None, fallback: int = 0) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise InputError(f"{SEED_ENV}={env!r} is not an integer") from None
    return fallback


def read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from exc


def read_json(path) -> dict:
    try:
        data = json.loads(read_bytes(path))
    except ValueError as exc:
        raise InputError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise InputError(f"{path} must hold a JSON object")
    return data


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(out_path, command: str, seed: int | None, config: dict, inputs, artifacts) -> Path:
    """One manifest per run, next to the primary artifact. No timestamps, so reruns compare equal."""
    manifest = {
        "command": command,
        "tool_version": __version__,
        "seed": seed,
        "config": config,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "artifacts": {k: str(v) for k, v in artifacts.items()},
    }
    path = Path(str(out_path) + ".manifest.json")
    write_json(path, manifest)
    return path


def report(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def read_tsv(path, columns: int) -> list[list[str]]:
    rows = []
    for lineno, line in enumerate(read_bytes(path).decode("utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != columns:
            raise InputError(f"{path}:{lineno}: expected {columns} tab-separated fields, got {len(fields)}")
        rows.append(fields)
    return rows


def load_dataset(path) -> tuple[list[tuple[str, int, int, str]], dict]:
    path = Path(path)
    meta = read_json(path / META_FILE)
    rows = read_tsv(path / RECORDS_FILE, 4)
    records = []
    for rid, taxid, cid, seq in rows[1:]:
        try:
            records.append((rid, int(taxid), int(cid), seq))
        except ValueError:
            raise InputError(f"{path / RECORDS_FILE}: bad ids in record {rid!r}") from None
    return records, meta


# --- taxonomy-build -----------------------------------------------------------

def cmd_taxonomy_build(args) -> int:
    tree = parse_taxdump(read_bytes(args.nodes), read_bytes(args.names) if args.names else None)
    rc = reclassify(tree, layer=args.layer)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["tax_id\tclass_id"] + [f"{t}\t{c}" for t, c in sorted(rc.mapping.items())]
    out.write_text("\n".join(lines) + "\n")

    stats = class_stats(list(rc.mapping.values()))
    registry = out.with_name(out.stem + ".classes.tsv")
    reg_lines = ["class_id\tanchor_tax_id\tname\tnum_taxa"]
    for cid, anchor in enumerate(rc.registry):
        reg_lines.append(f"{cid}\t{anchor}\t{tree.nodes[anchor].name}\t{stats[cid][0]}")
    registry.write_text("\n".join(reg_lines) + "\n")

    summary = {"num_taxa": len(rc.mapping), "num_classes": rc.num_classes,
               "null_label": rc.null_label, "layer": rc.layer}
    inputs = [args.nodes] + ([args.names] if args.names else [])
    write_manifest(out, "taxonomy-build", None, {"layer": args.layer}, inputs,
                   {"map": out, "registry": registry})
    report(summary)
    return EXIT_OK


# --- dataset-prepare ----------------------------------------------------------

def read_taxmap(path) -> tuple[dict[int, int], int]:
    rows = read_tsv(path, 2)
    try:
        mapping = {int(t): int(c) for t, c in rows[1:]}
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None
    registry = Path(path).with_name(Path(path).stem + ".classes.tsv")
    if registry.exists():
        num_classes = len(read_tsv(registry, 4)) - 1
    else:
        num_classes = max(mapping.values(), default=-1) + 1
    return mapping, num_classes


def cmd_dataset_prepare(args) -> int:
    fasta = parse_fasta(read_bytes(args.fasta))
    mapping, num_classes = read_taxmap(args.taxmap)
    labels = {}
    for rid, taxid in read_tsv(args.labels, 2):
        try:
            labels[rid] = int(taxid)
        except ValueError:
            if rid == "record_id":  # header row
                continue
            raise InputError(f"{args.labels}: tax id for {rid!r} is not an integer") from None

    kept, too_long, unlabeled = [], 0, 0
    for header, seq in fasta:
        rid = header.split()[0]
        if len(seq) > args.max_len:
            too_long += 1
            continue
        taxid = labels.get(rid)
        if taxid is None or taxid not in mapping:
            unlabeled += 1
            continue
        kept.append((rid, taxid, mapping[taxid], seq))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["record_id\ttax_id\tclass_id\tsequence"] + [f"{r}\t{t}\t{c}\t{s}" for r, t, c, s in kept]
    (out / RECORDS_FILE).write_text("\n".join(lines) + "\n")
    meta = {"num_classes": num_classes, "max_len": args.max_len, "kept": len(kept),
            "dropped_too_long": too_long, "dropped_unlabeled": unlabeled}
    write_json(out / META_FILE, meta)
    write_manifest(out / "dataset", "dataset-prepare", None, {"max_len": args.max_len},
                   [args.fasta, args.taxmap, args.labels], {"dataset": out})
    report(meta)
    return EXIT_OK


# --- train --------------------------------------------------------------------

def load_train_config(path) -> dict:
    """JSON with optional sections ``model``, ``train``, ``schedule`` and scalar ``amplitude``,
    ``log_every``, ``checkpoint_every``."""
    raw = read_json(path) if path else {}
    unknown = set(raw) - {"model", "train", "schedule", "amplitude", "log_every", "checkpoint_every"}
    if unknown:
        raise InputError(f"unknown config keys: {sorted(unknown)}")
    return raw


def cmd_train(args) -> int:
    records, meta = load_dataset(args.dataset)
    cfg = load_train_config(args.config)
    model_fields = {**cfg.get("model", {}), "D_in": 22, "num_classes": meta["num_classes"]}
    sched_fields = cfg.get("schedule", {})
    try:
        model_cfg = DenoiserConfig(**model_fields)
        train_fields = {**cfg.get("train", {})}
        train_fields["seed"] = resolve_seed(args.seed, train_fields.get("seed", 0))
        train_cfg = TrainConfig(**train_fields)
        sched = build_schedule(model_cfg.T, **sched_fields)
    except TypeError as exc:
        raise InputError(f"bad config: {exc}") from exc
    amplitude = float(cfg.get("amplitude", 1.0))
    log_every = int(cfg.get("log_every", 50))
    ckpt_every = int(cfg.get("checkpoint_every", 0))

    out = Path(args.out)
    if args.resume and out.exists():
        state, sched, train_cfg = load_checkpoint(out)
        if state.model.config != model_cfg:
            raise VersionMismatch("checkpoint model config differs from the requested config")
    else:
        state = new_state(model_cfg, train_cfg)
    state.extra = {"amplitude": amplitude}

    x0 = torch.from_numpy(encode_batch([r[3] for r in records], model_cfg.L, amplitude))
    y = torch.tensor([r[2] for r in records], dtype=torch.long)
    remaining = max(0, args.steps - state.step)
    metrics_path = Path(args.metrics or str(out) + ".metrics.jsonl")
    metrics_path.parent.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    with metrics_path.open("w") as log:
        def callback(st: TrainingState, m: dict):
            if st.step % log_every == 0 or st.step == args.steps:
                row = {"step": st.step, **m, "wall_ms": round(1000 * (time.perf_counter() - start))}
                log.write(json.dumps(row, sort_keys=True) + "\n")
                log.flush()
            if ckpt_every and st.step % ckpt_every == 0:
                save_checkpoint(st, out, sched, train_cfg)

        if remaining and len(records) == 0:
            raise InputError(f"dataset {args.dataset} is empty")
        if remaining:
            state = fit(state, x0, y, sched, train_cfg, remaining, callback)
    save_checkpoint(state, out, sched, train_cfg)
    config = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
              "schedule": sched.to_dict(), "amplitude": amplitude, "steps": args.steps}
    inputs = [Path(args.dataset) / RECORDS_FILE] + ([args.config] if args.config else [])
    write_manifest(out, "train", train_cfg.seed, config, inputs, {"checkpoint": out, "metrics": metrics_path})
    report({"step": state.step, "checkpoint": str(out)})
    return EXIT_OK


# --- sample -------------------------------------------------------------------

def _chunk_seed(seed: int, chunk: int) -> int:
    return int(np.random.SeedSequence([seed, chunk]).generate_state(1, dtype=np.uint64)[0] >> 1)


def generate(model, sched, guidance: GuidanceConfig, label: int, num: int, seed: int,
             chunk: int = 100, workers: int = 1) -> list[str]:
    """Decoded samples in index order. Each chunk has its own generator, so the
    result does not depend on ``workers``."""
    starts = list(range(0, num, chunk))

    def run(i: int):
        g = torch.Generator().manual_seed(_chunk_seed(seed, i))
        count = min(chunk, num - starts[i])
        return [decode_lenient(x) for x in sample_loop(model, sched, guidance, label, g, count)]

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, range(len(starts))))
    else:
        parts = [run(i) for i in range(len(starts))]
    return [s for part in parts for s in part]


def cmd_sample(args) -> int:
    state, sched, _ = load_checkpoint(args.ckpt)
    cfg = state.model.config
    model = state.ema_model()
    if args.unconditional:
        label, tag = cfg.null_label, "none"
    else:
        label, tag = args.tax_id, str(args.tax_id)
        if not 0 <= label < cfg.num_classes:
            raise InvalidLabel(f"--tax-id {label} outside [0, {cfg.num_classes})")
    seed = resolve_seed(args.seed)
    guidance = GuidanceConfig(scale=args.guidance_scale, null_label=cfg.null_label)
    start = time.perf_counter()
    seqs = generate(model, sched, guidance, label, args.num, seed, args.chunk, args.workers)
    records = [(f"sample{i:06d} tax_id={tag} guidance={args.guidance_scale:g} seed={seed}", s)
               for i, s in enumerate(seqs) if len(s) >= MIN_VALID_LENGTH]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(write_fasta(records))
    config = {"num": args.num, "tax_id": tag, "guidance_scale": args.guidance_scale,
              "chunk": args.chunk}
    write_manifest(out, "sample", seed, config, [args.ckpt], {"fasta": out})
    report({"generated": len(seqs), "kept": len(records), "discarded": len(seqs) - len(records),
            "wall_ms": round(1000 * (time.perf_counter() - start))})
    return EXIT_OK


# --- eval ---------------------------------------------------------------------

def read_reference(path) -> list[str]:
    path = Path(path)
    if path.is_dir():
        return [r[3] for r in load_dataset(path)[0]]
    return [s for _, s in parse_fasta(read_bytes(path))]


def cmd_eval(args) -> int:
    records = parse_fasta(read_bytes(args.fasta))
    reference = read_reference(args.reference) if args.reference else None
    motifs = None
    if args.motifs:
        motifs = {str(k): str(v).upper() for k, v in read_json(args.motifs).items()}
    result = evaluate(records, reference, motifs).to_dict()
    out = Path(args.out)
    write_json(out, result)
    inputs = [args.fasta] + [p for p in (args.motifs,) if p]
    if args.reference and not Path(args.reference).is_dir():
        inputs.append(args.reference)
    write_manifest(out, "eval", None, {"reference": str(args.reference)}, inputs, {"report": out})
    report({k: v for k, v in result.items() if k != "length_histogram"})
    return EXIT_OK


# --- gradcheck ----------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    if args.config == "tiny":
        overrides = {}
    else:
        overrides = read_json(args.config)
    seed = resolve_seed(args.seed)
    methods = args.method or ["A", "B", "C", "D", "E"]
    failures = []
    for method in methods:
        cfg = tiny_config(method, **overrides) if overrides else tiny_config(method)
        rep = run_gradcheck(cfg, seed=seed, inject_sign_bug=args.inject_sign_bug)
        status = "ok" if rep.passed else "FAIL"
        print(f"method {method}: max relative error {rep.max_rel_error:.3e} "
              f"(worst {rep.worst_param}) {status}")
        if not rep.passed:
            failures.append(rep)
    if failures:
        worst = max(failures, key=lambda r: r.max_rel_error)
        raise SelfCheckFailed(
            f"gradient check failed for method {worst.method}: parameter {worst.worst_param} "
            f"has relative error {worst.max_rel_error:.3e}")
    return EXIT_OK


# --- toy corpus and ablation --------------------------------------------------

def cmd_toy_corpus(args) -> int:
    """Write a motif corpus with a matching three-class taxonomy: sequences, labels, dmp files, motifs."""
    seed = resolve_seed(args.seed)
    corpus = make_corpus(n=args.num, seed=seed, min_len=args.min_len, max_len=args.max_len)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    taxa = [100 + c for c in range(corpus.num_classes)]
    nodes = ["1\t|\t1\t|\tno rank\t|"] + [f"{t}\t|\t1\t|\tspecies\t|" for t in taxa]
    names = ["1\t|\troot\t|\t\t|\tscientific name\t|"] + [
        f"{t}\t|\ttoy class {c}\t|\t\t|\tscientific name\t|" for c, t in enumerate(taxa)]
    (out / "nodes.dmp").write_text("\n".join(nodes) + "\n")
    (out / "names.dmp").write_text("\n".join(names) + "\n")
    rc = reclassify(parse_taxdump("\n".join(nodes) + "\n"))
    (out / "sequences.fasta").write_bytes(write_fasta([(r, s) for r, s, _ in corpus.records]))
    label_lines = [f"{r.split()[0]}\t{taxa[c]}" for r, _, c in corpus.records]
    (out / "labels.tsv").write_text("\n".join(label_lines) + "\n")
    motifs = {str(rc.mapping[taxa[c]]): m for c, m in enumerate(corpus.motifs)}
    write_json(out / "motifs.json", motifs)
    report({"records": len(corpus.records), "motifs": motifs})
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = AblationConfig(steps=args.steps, seed=resolve_seed(args.seed))
    settings = default_settings()
    if args.only:
        settings = [s for s in settings if s.sweep == args.only]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w") as fh:
        def emit(row):
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.flush()
            print(json.dumps(row, sort_keys=True))

        run_ablation(cfg, settings, on_row=emit)
    write_manifest(out, "ablate", cfg.seed, vars(cfg) | {"only": args.only}, [], {"rows": out})
    return EXIT_OK


# --- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lineagediff", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("taxonomy-build", help="collapse a taxdump onto layer-wise classes")
    s.add_argument("--nodes", required=True)
    s.add_argument("--names")
    s.add_argument("--layer", type=int, default=9)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_taxonomy_build)

    s = sub.add_parser("dataset-prepare", help="filter and label a FASTA file")
    s.add_argument("--fasta", required=True)
    s.add_argument("--taxmap", required=True)
    s.add_argument("--labels", required=True, help="TSV of record_id, tax_id")
    s.add_argument("--max-len", type=int, default=255)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dataset_prepare)

    s = sub.add_parser("train", help="train a denoiser")
    s.add_argument("--dataset", required=True)
    s.add_argument("--config")
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--metrics")
    s.add_argument("--resume", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate sequences from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--num", type=int, default=1000)
    who = s.add_mutually_exclusive_group(required=True)
    who.add_argument("--tax-id", type=int)
    who.add_argument("--unconditional", action="store_true")
    s.add_argument("--guidance-scale", type=float, default=1.5)
    s.add_argument("--seed", type=int)
    s.add_argument("--chunk", type=int, default=100)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", help="sequence-level metrics for generated FASTA")
    s.add_argument("--fasta", required=True)
    s.add_argument("--reference", help="dataset directory or FASTA file")
    s.add_argument("--motifs", help="JSON object mapping class id to motif")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of the tiny denoiser")
    s.add_argument("--config", default="tiny")
    s.add_argument("--seed", type=int)
    s.add_argument("--method", action="append", choices=["A", "B", "C", "D", "E"])
    s.add_argument("--inject-sign-bug", metavar="PARAM", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("toy-corpus", help="write the synthetic motif corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--num", type=int, default=3000)
    s.add_argument("--min-len", type=int, default=12)
    s.add_argument("--max-len", type=int, default=24)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_toy_corpus)

    s = sub.add_parser("ablate", help="patch-size and wiring sweep on the toy corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--seed", type=int)
    s.add_argument("--only", choices=["patch", "method"])
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LineageDiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
