"""``hipath`` command line: gen-data, train, eval, ablate, grad-check, replay.

Every command writes ``manifest.json`` into its output directory before doing
any work. The manifest holds the argv (input paths made absolute), the
resolved configuration, input file hashes and the planned artifact paths, so
``hipath replay manifest.json`` reruns the command.

Exit codes: 0 success, 1 verification failure or training divergence,
2 usage or input error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .checkpoint import CheckpointVersionError
from .config import ABLATIONS, PRESETS, TrainConfig, make_config, read_config_file
from .report import ReportError, Vocabulary
from .synthetic import (
    Generator, GeneratorSpec, load_embeddings, make_vocabulary, paper_scale_vocabulary, read_dataset,
    save_embeddings, split_indices, write_dataset,
)

log = logging.getLogger("hipath")

EXIT_OK, EXIT_VERIFY, EXIT_INPUT = 0, 1, 2

DATASET = "dataset.jsonl"
VOCAB = "vocab.json"
EMBEDDINGS = "embeddings.npy"
MANIFEST = "manifest.json"

# flags that name input files; stored absolute in the manifest
_PATH_FLAGS = ("--config", "--data", "--checkpoint", "--predictions", "--resume")


class InputError(Exception):
    """Bad or missing input; reported with exit code 2."""


# --- helpers ----------------------------------------------------------------

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def absolute_argv(argv: Sequence[str]) -> list[str]:
    out = list(argv)
    for i, tok in enumerate(out):
        for flag in _PATH_FLAGS:
            if tok == flag and i + 1 < len(out):
                out[i + 1] = str(Path(out[i + 1]).resolve())
            elif tok.startswith(flag + "="):
                out[i] = f"{flag}={Path(tok.split('=', 1)[1]).resolve()}"
    # the output directory is chosen at replay time
    cleaned, skip = [], False
    for tok in out:
        if skip:
            skip = False
            continue
        if tok == "--out-dir":
            skip = True
            continue
        if tok.startswith("--out-dir="):
            continue
        cleaned.append(tok)
    return cleaned


def write_manifest(out_dir: Path, args, argv: Sequence[str], config: dict, inputs: Sequence[Path],
                   artifacts: dict[str, str]) -> None:
    manifest = {
        "command": args.command,
        "argv": absolute_argv(argv),
        "config": config,
        "seed": args.seed,
        "workers": args.workers,
        "inputs": {str(Path(p).resolve()): sha256_file(p) for p in sorted(set(map(str, inputs)))},
        "artifacts": artifacts,
        "toolkit_version": __version__,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def parse_set(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise InputError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def split_config_file(path: Optional[str]) -> tuple[dict, dict]:
    """Return (training keys, ``data.*`` generator keys) from a config file."""
    if path is None:
        return {}, {}
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {path}")
    raw = read_config_file(p)
    data = {k[len("data."):]: v for k, v in raw.items() if k.startswith("data.")}
    train = {k: v for k, v in raw.items() if not k.startswith("data.")}
    return train, data


def resolve_train_config(args, extra: Optional[dict] = None) -> TrainConfig:
    file_keys, _ = split_config_file(args.config)
    overrides = dict(file_keys)
    overrides.update(extra or {})
    overrides.update(parse_set(getattr(args, "set", None) or []))
    overrides["seed"] = args.seed
    try:
        return make_config(args.preset, overrides=overrides)
    except (KeyError, ValueError) as exc:
        raise InputError(f"bad configuration: {exc}") from exc


def load_data_dir(path: str):
    d = Path(path)
    files = [d / DATASET, d / VOCAB, d / EMBEDDINGS]
    missing = [str(f) for f in files if not f.is_file()]
    if missing:
        raise InputError(f"dataset not found: missing {', '.join(missing)}")
    try:
        vocab = Vocabulary.load(d / VOCAB)
        table = load_embeddings(d / EMBEDDINGS).table
        cases, sidecar = read_dataset(d / DATASET, vocab)
    except (ReportError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"invalid dataset in {d}: {exc}") from exc
    if table.shape[0] != len(vocab.terms):
        raise InputError(f"embedding table has {table.shape[0]} rows for {len(vocab.terms)} terms")
    return cases, vocab, table, sidecar, files


def dims_from_data(sidecar: dict) -> dict:
    return {"model.d_vis": sidecar["d_vis"], "model.d_txt": sidecar["d_txt"]}


def select_split(cases: list, split: str) -> list:
    if split == "all":
        return cases
    train_idx, test_idx = split_indices(len(cases))
    return [cases[i] for i in (train_idx if split == "train" else test_idx)]


# --- generator spec -----------------------------------------------------------

def generator_spec(args, seed: int) -> GeneratorSpec:
    _, file_keys = split_config_file(args.config)
    fields = dict(file_keys)
    for name, flag in (("n_cases", "n_cases"), ("signal_strength", "signal"), ("noise_sigma", "noise"),
                       ("d_vis", "d_vis"), ("d_txt", "d_txt")):
        val = getattr(args, flag, None)
        if val is not None:
            fields[name] = val
    fields["seed"] = seed
    known = set(GeneratorSpec.__dataclass_fields__)
    unknown = set(fields) - known
    if unknown:
        raise InputError(f"unknown data keys: {', '.join(sorted(unknown))}")
    try:
        return GeneratorSpec(**fields)
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad generator settings: {exc}") from exc


def vocabulary_for(name: str) -> Vocabulary:
    return paper_scale_vocabulary() if name == "paper" else make_vocabulary()


def generate(spec: GeneratorSpec, vocab_name: str):
    vocab = vocabulary_for(vocab_name)
    gen = Generator(spec, vocab)
    return gen, gen.dataset()


# --- commands -----------------------------------------------------------------

def cmd_gen_data(args, argv) -> int:
    spec = generator_spec(args, args.seed)
    out = Path(args.out_dir)
    artifacts = {"dataset": DATASET, "sidecar": DATASET + ".config.json", "vocab": VOCAB, "embeddings": EMBEDDINGS}
    config = {"generator": spec.to_json(), "vocab": args.vocab}
    write_manifest(out, args, argv, config, [p for p in [args.config] if p], artifacts)
    gen, cases = generate(spec, args.vocab)
    write_dataset(cases, out / DATASET, spec.to_json())
    gen.vocab.save(out / VOCAB)
    save_embeddings(gen.embeddings, out / EMBEDDINGS)
    print(f"wrote {len(cases)} cases to {out / DATASET}")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    from .trainer import NonFiniteLoss, Trainer, write_metrics_log

    cases, vocab, table, sidecar, files = load_data_dir(args.data)
    extra = dims_from_data(sidecar)
    if args.ablate:
        extra.update({f"ablation.{k}": v for k, v in ABLATIONS[args.ablate].items()})
    cfg = resolve_train_config(args, extra)
    cfg.ablation = cfg.ablation.resolved()
    out = Path(args.out_dir)
    artifacts = {"checkpoint": "checkpoint.bin", "metrics": "metrics.jsonl"}
    inputs = files + [Path(p) for p in (args.config, args.resume) if p]
    write_manifest(out, args, argv, cfg.to_dict(), inputs, artifacts)

    train_cases = select_split(cases, args.split)
    if args.resume:
        try:
            trainer = Trainer.from_checkpoint(args.resume, vocab, table, train_cases)
        except FileNotFoundError as exc:
            raise InputError(f"checkpoint not found: {args.resume}") from exc
    else:
        trainer = Trainer(cfg, vocab, table, train_cases)
    header = {"config": cfg.to_dict(), "config_hash": cfg.config_hash(), "epochs": cfg.epochs, "lr": cfg.lr,
              "batch_size": cfg.batch_size, "seed": cfg.seed, "n_train": len(train_cases),
              "toolkit_version": __version__}
    try:
        trainer.run(until_step=args.max_steps,
                    on_epoch=lambda rec: log.info("epoch %d: %s", rec["epoch"], json.dumps(rec)))
    except NonFiniteLoss as exc:
        write_metrics_log(trainer.history, out / "metrics.jsonl", header)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    trainer.save(out / "checkpoint.bin")
    write_metrics_log(trainer.history, out / "metrics.jsonl", header)
    print(f"trained {trainer.step} steps; checkpoint at {out / 'checkpoint.bin'}")
    return EXIT_OK


def read_predictions(path: Path, cases: list, vocab: Vocabulary):
    by_id = {c.case_id: c for c in cases}
    preds, truths, probs = [], [], []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                case = by_id[rec["case_id"]]
                slot = case.slots[int(rec["slot"])]
                pred = rec["pred"]
                pred = vocab.resolve(pred) if isinstance(pred, str) else int(pred)
            except (json.JSONDecodeError, KeyError, IndexError, ValueError, ReportError) as exc:
                raise InputError(f"{path}:{lineno}: bad prediction record ({exc!r})") from exc
            if not 0 <= pred < len(vocab.terms):
                raise InputError(f"{path}:{lineno}: term id {pred} out of range")
            preds.append(pred)
            truths.append(slot.truth_term)
            probs.append(rec.get("probs"))
    if not preds:
        raise InputError(f"{path}: no predictions")
    have = [p is not None for p in probs]
    if any(have) and not all(have):
        raise InputError(f"{path}: 'probs' must be given for every record or none")
    prob_arr = np.asarray(probs, dtype=np.float64) if all(have) else None
    if prob_arr is not None and prob_arr.shape != (len(preds), len(vocab.terms)):
        raise InputError(f"{path}: probs must have {len(vocab.terms)} entries")
    return preds, truths, prob_arr


def cmd_eval(args, argv) -> int:
    from .metrics import evaluate_predictions
    from .trainer import evaluate, load_model

    if bool(args.checkpoint) == bool(args.predictions):
        raise InputError("give exactly one of --checkpoint or --predictions")
    cases, vocab, table, sidecar, files = load_data_dir(args.data)
    source = Path(args.checkpoint or args.predictions)
    if not source.is_file():
        raise InputError(f"file not found: {source}")
    out = Path(args.out_dir)
    artifacts = {"report_json": "metrics.json", "report_text": "metrics.txt"}
    if args.checkpoint:
        artifacts["predictions"] = "predictions.jsonl"
    write_manifest(out, args, argv, {"split": args.split, "topk": args.topk}, files + [source], artifacts)

    extra = {}
    if args.checkpoint:
        try:
            model = load_model(source, vocab, table)
        except CheckpointVersionError as exc:
            raise InputError(str(exc)) from exc
        result = evaluate(model, select_split(cases, args.split), vocab)
        extra = {"r_at_1": result.r_at_1, "top1_by_images": result.top1_by_images}
        with (out / "predictions.jsonl").open("w") as fh:
            for r in result.preds:
                fh.write(json.dumps({"case_id": r["case_id"], "slot": r["slot"], "pred": r["pred"],
                                     "probs": [float(x) for x in r["probs"]]}) + "\n")
        probs = np.stack([r["probs"] for r in result.preds])
        report = evaluate_predictions([r["pred"] for r in result.preds], [r["truth"] for r in result.preds],
                                      vocab, probs, args.topk)
    else:
        preds, truths, probs = read_predictions(source, cases, vocab)
        report = evaluate_predictions(preds, truths, vocab, probs, args.topk)
    payload = report.to_json()
    payload.update(extra)
    (out / "metrics.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    text = report.to_text()
    (out / "metrics.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_ablate(args, argv) -> int:
    from .trainer import ABLATION_ROWS, ablate, format_ablation

    rows = args.rows or list(ABLATION_ROWS)
    for r in rows:
        if r not in ABLATIONS:
            raise InputError(f"unknown ablation row {r!r}; choose from {', '.join(ABLATIONS)}")
    out = Path(args.out_dir)
    inputs = [Path(p) for p in [args.config] if p]
    if args.data:
        cases, vocab, table, sidecar, files = load_data_dir(args.data)
        inputs += files
        train_idx, test_idx = split_indices(len(cases))
        fixed = ([cases[i] for i in train_idx], [cases[i] for i in test_idx], vocab, table)
        data = fixed
        dims = dims_from_data(sidecar)
        data_cfg = {"data_dir": str(Path(args.data).resolve())}
    else:
        specs = {s: generator_spec(args, s) for s in args.seeds}
        dims = {"model.d_vis": specs[args.seeds[0]].d_vis, "model.d_txt": specs[args.seeds[0]].d_txt}
        data_cfg = {"generator": {s: spec.to_json() for s, spec in specs.items()}}

        def data(seed):
            gen, cases = generate(specs[seed], args.vocab)
            train_idx, test_idx = split_indices(len(cases))
            return [cases[i] for i in train_idx], [cases[i] for i in test_idx], gen.vocab, gen.embeddings.table

    base = resolve_train_config(args, dims)
    artifacts = {"table_json": "ablation.json", "table_text": "ablation.txt", "runs": "runs.jsonl"}
    config = {"train": base.to_dict(), "rows": rows, "seeds": list(args.seeds), **data_cfg}
    write_manifest(out, args, argv, config, inputs, artifacts)

    runs_path = out / "runs.jsonl"
    runs_path.write_text("")

    def on_run(row, seed, summary):
        with runs_path.open("a") as fh:
            fh.write(json.dumps({"row": row, "seed": seed, **summary}, sort_keys=True) + "\n")
        log.info("%s seed %d: %s", row, seed, summary)

    table = ablate(base, data, seeds=args.seeds, rows=rows, on_run=on_run)
    (out / "ablation.json").write_text(json.dumps(table, indent=1, sort_keys=True) + "\n")
    text = format_ablation(table)
    (out / "ablation.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_grad_check(args, argv) -> int:
    from .trainer import grad_check

    cfg = resolve_train_config(args)
    out = Path(args.out_dir)
    write_manifest(out, args, argv, {"train": cfg.to_dict(), "probes": args.probes, "h": args.step,
                                     "tolerance": args.tolerance}, [Path(p) for p in [args.config] if p],
                   {"report": "gradcheck.json"})
    rep = grad_check(cfg, n_probes=args.probes, h=args.step, seed=args.seed, tolerance=args.tolerance)
    payload = {"max_rel_err": rep.max_rel_err, "alpha_dead_zone_grad": rep.alpha_dead_zone_grad,
               "tolerance": rep.tolerance, "passed": rep.passed, "failing": rep.failing()}
    (out / "gradcheck.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    width = max(len(g) for g in rep.max_rel_err)
    for g, e in rep.max_rel_err.items():
        print(f"{g.ljust(width)}  {e:.3e}  {'ok' if e < rep.tolerance else 'FAIL'}")
    print(f"{'alpha dead zone'.ljust(width)}  grad={rep.alpha_dead_zone_grad}")
    if rep.passed:
        print("grad-check passed")
        return EXIT_OK
    names = rep.failing() + ([] if rep.alpha_dead_zone_grad == 0.0 else ["alpha (dead zone)"])
    print(f"grad-check FAILED: {', '.join(names)}", file=sys.stderr)
    return EXIT_VERIFY


def cmd_replay(args, argv) -> int:
    path = Path(args.manifest)
    if not path.is_file():
        raise InputError(f"manifest not found: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("command") == "replay":
        raise InputError("cannot replay a replay manifest")
    return main(list(manifest["argv"]) + ["--out-dir", args.out_dir])


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="plain-text config file with dotted 'key = value' lines")
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    common.add_argument("--out-dir", default=".", help="directory for artifacts and manifest.json")
    common.add_argument("--workers", type=int, default=1, help="torch intra-op threads")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override; beats --config")
    common.add_argument("-v", "--verbose", action="store_true")

    data_flags = argparse.ArgumentParser(add_help=False)
    data_flags.add_argument("--n-cases", dest="n_cases", type=int)
    data_flags.add_argument("--signal", type=float, help="planted signal strength in [0, 1]")
    data_flags.add_argument("--noise", type=float)
    data_flags.add_argument("--d-vis", dest="d_vis", type=int)
    data_flags.add_argument("--d-txt", dest="d_txt", type=int)
    data_flags.add_argument("--vocab", choices=("desk", "paper"), default="desk")

    p = argparse.ArgumentParser(prog="hipath", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common, data_flags], help="generate a synthetic dataset")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a model on a generated dataset")
    t.add_argument("--data", required=True, help="directory written by gen-data")
    t.add_argument("--ablate", choices=sorted(ABLATIONS))
    t.add_argument("--split", choices=("train", "all"), default="train")
    t.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    t.add_argument("--resume", help="continue from a checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score predictions or a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--predictions", help="JSONL of {case_id, slot, pred[, probs]}")
    e.add_argument("--split", choices=("test", "all"), default="test")
    e.add_argument("--topk", type=int, nargs="+", default=[1, 5])
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common, data_flags], help="multi-seed ablation table")
    a.add_argument("--data", help="fixed dataset directory; by default one dataset is generated per seed")
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.add_argument("--rows", nargs="+")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient verification")
    c.add_argument("--probes", type=int, default=3)
    c.add_argument("--step", type=float, default=1e-5)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.set_defaults(func=cmd_grad_check)

    r = sub.add_parser("replay", help="rerun the command recorded in a manifest")
    r.add_argument("manifest")
    r.add_argument("--out-dir", required=True)
    r.set_defaults(func=cmd_replay, seed=None, workers=None)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers is not None:
        if args.workers < 1:
            parser.error("--workers must be >= 1")
        torch.set_num_threads(args.workers)
        torch.use_deterministic_algorithms(True)
    try:
        return args.func(args, argv)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
