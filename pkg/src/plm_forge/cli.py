"""plm-forge command line: prep, train, finetune, sample, eval, fitness, rank."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import evaluate as ev
from . import sample as smp
from . import seqdata as sd
from .model import ModelConfig, PRESETS
from .train import (
    CheckpointError,
    DivergenceError,
    TrainConfig,
    finetune_init,
    load_checkpoint,
    train_loop,
    write_log_csv,
)

log = logging.getLogger("plm_forge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED, EXIT_INTERNAL = 0, 1, 2, 3, 4
SEED_ENV = "PLM_FORGE_SEED"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# config schema: flat "key = value" text, flags override file values
# ---------------------------------------------------------------------------


def _bool(s: str) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s: str) -> int | None:
    return None if str(s).strip().lower() in ("", "none") else int(s)


SCHEMA: dict[str, tuple[Callable[[str], Any], str]] = {
    "preset": (str, "named size preset (small|medium|base|large|xlarge); explicit keys win"),
    "n_layers": (int, "transformer layers"),
    "n_heads": (int, "attention heads"),
    "head_dim": (int, "per-head dimension"),
    "context_len": (int, "context length (defaults to the dataset's)"),
    "rotary_dim": (_opt_int, "rotary channels per head (default: head_dim)"),
    "tie_embeddings": (_bool, "share token embedding and output head"),
    "peak_lr": (float, "peak learning rate"),
    "warmup_steps": (int, "linear warm-up steps"),
    "total_steps": (int, "total optimizer steps"),
    "min_lr_ratio": (float, "cosine floor as a fraction of peak_lr"),
    "weight_decay": (float, "decoupled weight decay"),
    "clip_norm": (float, "global gradient-norm clip"),
    "batch_size_tokens": (int, "token budget per micro-batch"),
    "grad_accum": (int, "micro-batches per optimizer step"),
    "checkpoint_every": (int, "checkpoint cadence in steps"),
    "seed": (int, "random seed"),
}

MODEL_DEFAULTS = {"n_layers": 2, "n_heads": 4, "head_dim": 16, "rotary_dim": None, "tie_embeddings": False}


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{origin}:{lineno}: expected key = value")
        key, value = (x.strip() for x in line.split("=", 1))
        out[key] = _coerce(key, value, f"{origin}:{lineno}")
    return out


def _coerce(key: str, value: str, where: str) -> Any:
    if key not in SCHEMA:
        raise UsageError(f"{where}: unknown config key {key!r}")
    conv = SCHEMA[key][0]
    try:
        return conv(value)
    except ValueError as exc:
        raise UsageError(f"{where}: bad value for {key}: {exc}") from None


def resolve_config(args: argparse.Namespace) -> dict[str, Any]:
    cfg: dict[str, Any] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file {path} not found")
        cfg.update(parse_config_text(path.read_text(), str(path)))
    for key in SCHEMA:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = _coerce(key, val, f"--{key.replace('_', '-')}")
    return cfg


def _add_schema_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config keys (override --config values)")
    for key, (_, help_text) in SCHEMA.items():
        g.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, metavar="V", help=help_text)


def default_seed(explicit: int | None = None) -> int:
    if explicit is not None:
        return explicit
    env = os.environ.get(SEED_ENV)
    return int(env) if env else 0


def model_config_from(cfg: dict[str, Any], vocab_size: int, context_len: int) -> ModelConfig:
    if "preset" in cfg and cfg["preset"] not in PRESETS:
        raise UsageError(f"unknown preset {cfg['preset']!r}")
    base = asdict(PRESETS[cfg["preset"]]) if "preset" in cfg else dict(MODEL_DEFAULTS)
    for k in ("n_layers", "n_heads", "head_dim", "rotary_dim", "tie_embeddings"):
        if k in cfg:
            base[k] = cfg[k]
    base["context_len"] = cfg.get("context_len", context_len)
    base["vocab_size"] = vocab_size
    return ModelConfig.from_dict(base)


def train_config_from(cfg: dict[str, Any], base: TrainConfig | None = None) -> TrainConfig:
    fields = {k: cfg[k] for k in TrainConfig.__dataclass_fields__ if k in cfg}
    return replace(base, **fields) if base else TrainConfig(**fields)


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------


def _write_shard(batch: sd.PackedBatch, path_stem: Path) -> None:
    np.save(path_stem.with_suffix(".npy"), batch.inputs.astype(np.int32), allow_pickle=False)
    rows = [[list(b) for b in row] for row in batch.boundaries]
    path_stem.with_suffix(".boundaries.json").write_text(json.dumps(rows) + "\n")


def load_shard(data_dir: Path, partition: str) -> sd.PackedBatch:
    stem = data_dir / "shards" / partition
    npy = stem.with_suffix(".npy")
    if not npy.exists():
        raise DataError(f"{npy} not found; run `plm-forge prep` first")
    inputs = np.load(npy, allow_pickle=False)
    bounds = [[tuple(b) for b in row] for row in json.loads(stem.with_suffix(".boundaries.json").read_text())]
    return sd.PackedBatch.from_inputs(inputs, bounds)


def load_data_manifest(data_dir: Path) -> dict:
    path = data_dir / "manifest.json"
    if not path.exists():
        raise DataError(f"{path} not found; run `plm-forge prep` first")
    return json.loads(path.read_text())


def cmd_prep(args) -> int:
    records = sd.read_fasta(args.input)
    if not records:
        raise DataError(f"{args.input}: no FASTA records")
    out = Path(args.out)
    (out / "shards").mkdir(parents=True, exist_ok=True)
    seed = default_seed(args.seed)
    vocab = sd.DEFAULT_VOCAB

    if args.holdout_fraction > 0:
        try:
            split = sd.make_split(records, sd.SplitSpec(args.identity_threshold, args.holdout_fraction, seed))
        except sd.SplitError as exc:
            raise DataError(str(exc)) from None
        clustering = split.clustering
        parts = {"train": split.train, "heldout": split.heldout, "excluded": split.excluded}
        (out / "split.json").write_text(split.manifest_text())
    else:
        clustering = sd.cluster_greedy(records, args.identity_threshold)
        parts = {"train": list(records), "heldout": [], "excluded": []}
        (out / "split.json").write_text(json.dumps({"spec": None, "train": [r.id for r in records], "heldout": [], "excluded": []}, indent=1) + "\n")
    (out / "clusters.tsv").write_text(clustering.to_tsv())

    entries = []
    shards = {}
    for part in ("train", "heldout", "excluded"):
        toks = sd.augment(parts[part], vocab)
        entries += [{"id": t.record_id, "direction": t.direction.value, "length": len(t), "partition": part} for t in toks]
        if part == "excluded":
            continue
        sd.write_fasta(parts[part], out / f"{part}.fasta")
        batch = sd.pack(toks, args.context_len, args.oversize)
        _write_shard(batch, out / "shards" / part)
        shards[part] = {"rows": len(batch), "tokens": int((batch.inputs != vocab.pad_id).sum())}
    manifest = {
        "format": "plm-forge-dataset/1",
        "context_len": args.context_len,
        "vocabulary": vocab.to_list(),
        "identity_threshold": args.identity_threshold,
        "seed": seed,
        "shards": shards,
        "entries": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    print(f"{len(records)} records -> {len(entries)} tokenized entries; clusters={len(clustering.representatives)}; "
          f"train={len(parts['train'])} heldout={len(parts['heldout'])} excluded={len(parts['excluded'])}")
    return EXIT_OK


def _train_batches(data_dir: Path, model_cfg: ModelConfig, tc: TrainConfig) -> list[sd.PackedBatch]:
    packed = load_shard(data_dir, "train")
    if len(packed) == 0:
        raise DataError("training shard is empty")
    if packed.inputs.shape[1] != model_cfg.context_len:
        raise UsageError(f"model context_len {model_cfg.context_len} != dataset context_len {packed.inputs.shape[1]}")
    rows = max(1, tc.batch_size_tokens // model_cfg.context_len)
    return packed.split(rows)


def _run_training(batches, model_cfg, tc, state, out: Path, vocab, resumed: bool = False) -> int:
    out.mkdir(parents=True, exist_ok=True)
    reports: list = []

    def on_step(r):
        reports.append(r)
        log.info("step %d loss %.4f lr %.3g gnorm %.3f", r.step, r.loss, r.lr, r.global_grad_norm)

    code = EXIT_OK
    try:
        state, _ = train_loop(batches, model_cfg, tc, state, checkpoint_dir=out, vocab=vocab, on_step=on_step)
    except DivergenceError as exc:
        print(str(exc), file=sys.stderr)
        code = EXIT_DIVERGED
    write_log_csv(reports, out / "log.csv", append=resumed)
    if code == EXIT_OK and reports:
        print(f"finished step {state.step}: loss {reports[-1].loss:.4f}; checkpoint {out / 'checkpoint'}")
    return code


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    cfg["seed"] = default_seed(cfg.get("seed"))
    data_dir = Path(args.data)
    dm = load_data_manifest(data_dir)
    vocab = sd.Vocabulary.from_list(dm["vocabulary"])
    model_cfg = model_config_from(cfg, len(vocab), dm["context_len"])
    tc = train_config_from(cfg)
    batches = _train_batches(data_dir, model_cfg, tc)
    out = Path(args.out)
    state = None
    if args.resume and (out / "checkpoint").exists():
        ckpt = load_checkpoint(out / "checkpoint")
        if ckpt.model_config != model_cfg:
            raise UsageError("resume checkpoint has a different model config")
        state = ckpt.state
    return _run_training(batches, model_cfg, tc, state, out, vocab, resumed=state is not None)


def cmd_finetune(args) -> int:
    if not args.base_checkpoint:
        raise UsageError("finetune requires --base-checkpoint")
    cfg = resolve_config(args)
    ckpt = load_checkpoint(args.base_checkpoint)
    data_dir = Path(args.data)
    dm = load_data_manifest(data_dir)
    vocab = sd.Vocabulary.from_list(dm["vocabulary"])
    if ckpt.vocab is not None and ckpt.vocab != vocab:
        raise DataError("dataset vocabulary differs from checkpoint vocabulary")
    base_tc = train_config_from(cfg, ckpt.train_config or TrainConfig())
    batches = _train_batches(data_dir, ckpt.model_config, base_tc)
    steps_per_epoch = max(1, len(batches) // base_tc.grad_accum)
    state, tc = finetune_init(ckpt, base_tc, steps_per_epoch=steps_per_epoch, epochs=args.epochs)
    print(f"finetune: peak_lr={tc.peak_lr:g} total_steps={tc.total_steps} warmup_steps={tc.warmup_steps}")
    return _run_training(batches, ckpt.model_config, tc, state, Path(args.out), vocab)


def _floats(s: str) -> list[float]:
    try:
        return [float(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {s!r}") from None


def cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    vocab = ckpt.vocab or sd.DEFAULT_VOCAB
    base = smp.SamplerConfig(
        max_new_tokens=args.max_new_tokens,
        prompt=args.prompt,
        direction=sd.Direction(args.direction),
        seed=default_seed(args.seed),
    )
    records = smp.sweep(ckpt.state.params, ckpt.model_config, _floats(args.temperatures), _floats(args.top_ps),
                        args.n_per_cell, base, vocab, threads=args.threads)
    n_raw = len(records)
    if not args.no_dedupe:
        records = smp.dedupe(records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "library.fasta").write_text(smp.library_fasta(records))
    (out / "library.csv").write_text(smp.library_csv(records))
    print(f"generated {n_raw} records, {len(records)} after dedupe -> {out / 'library.fasta'}")
    return EXIT_OK


def _emit(rows: list[dict], fmt: str, path: str | None) -> None:
    if fmt == "json":
        text = json.dumps(rows, indent=1) + "\n"
    else:
        buf = io.StringIO()
        if rows:
            w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        text = buf.getvalue()
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    vocab = ckpt.vocab or sd.DEFAULT_VOCAB
    records = sd.read_fasta(args.fasta, vocab)
    if not records:
        raise DataError(f"{args.fasta}: no records")
    toks = [sd.tokenize(r, args.direction, vocab) for r in records]
    too_long = [r.id for r, t in zip(records, toks) if len(t) > ckpt.model_config.context_len]
    if too_long:
        raise DataError(f"{len(too_long)} sequences exceed the model context (e.g. {too_long[0]})")
    rep = ev.corpus_perplexity(ckpt.state.params, ckpt.model_config, toks, threads=args.threads)
    rows = [{"id": r.id, "length": len(r.residues), "perplexity": p} for r, p in zip(records, rep.per_sequence)]
    rows.append({"id": "CORPUS_PER_SEQUENCE_MEAN", "length": rep.n_tokens, "perplexity": rep.per_sequence_mean})
    rows.append({"id": "CORPUS_TOKEN_WEIGHTED", "length": rep.n_tokens, "perplexity": rep.token_weighted})
    _emit(rows, args.format, args.out)
    if args.svg:
        ev.histogram_svg(rep.per_sequence, args.svg, "per-sequence perplexity")
    if args.identity_ref:
        ref = sd.read_fasta(args.identity_ref, vocab)
        ident = [max(sd.sequence_identity(r.residues, x.residues) for x in ref) for r in records]
        svg = args.identity_svg or str(Path(args.out or ".").with_suffix("")) + ".identity.svg"
        ev.histogram_svg(ident, svg, "max sequence identity to reference")
    return EXIT_OK


def _scorers(checkpoints: Sequence[str], direction: str, threads: int, normalize: bool):
    scorers = {}
    for spec in checkpoints:
        name, _, path = spec.rpartition("=") if "=" in spec else (Path(spec).name, "", spec)
        ckpt = load_checkpoint(path)
        scorers[name or Path(path).name] = ev.likelihood_scorer(
            ckpt.state.params, ckpt.model_config, direction, ckpt.vocab or sd.DEFAULT_VOCAB, normalize, threads)
    return scorers


def cmd_fitness(args) -> int:
    scorers = _scorers(args.checkpoint, args.direction, args.threads, not args.sum_loglik)
    entries = ev.read_manifest(args.manifest)
    rows = ev.run_benchmark(scorers, entries, ensemble=args.ensemble)
    _emit([{"model": r.model, "dataset": r.dataset, "metric": r.metric, "value": r.value} for r in rows], args.format, args.out)
    if args.svg_dir:
        d = Path(args.svg_dir)
        d.mkdir(parents=True, exist_ok=True)
        first = next(iter(scorers))
        for e in entries:
            try:
                ds = ev.load_entry(e)
            except (OSError, ValueError):
                continue
            ev.scatter_svg(scorers[first](ds.sequences), ds.measurements, d / f"{e.name}.svg", e.name)
    failed = [r for r in rows if r.error]
    for r in failed:
        print(f"failed: model={r.model} dataset={r.dataset}: {r.error}", file=sys.stderr)
    return EXIT_DATA if failed else EXIT_OK


def cmd_rank(args) -> int:
    (scorer,) = _scorers([args.checkpoint], args.direction, args.threads, True).values()
    records = sd.read_fasta(args.input)
    kept = ev.rank_and_filter([r.residues for r in records], scorer, args.keep)
    # map back to records, preserving duplicates in rank order
    pool: dict[str, list[sd.SequenceRecord]] = {}
    for r in records:
        pool.setdefault(r.residues, []).append(r)
    out_recs, rows = [], []
    for seq, score in kept:
        rec = pool[seq].pop(0)
        out_recs.append(rec)
        rows.append({"id": rec.id, "score": score})
    sd.write_fasta(out_recs, args.out)
    _emit(rows, args.format, args.scores)
    print(f"kept {len(out_recs)} of {len(records)} -> {args.out}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads for scoring/sampling (1 = deterministic reference path)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    p = _Parser(prog="plm-forge", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prep", parents=[common], help="tokenize, split, cluster and pack a FASTA file")
    s.add_argument("--input", required=True, help="input FASTA")
    s.add_argument("--out", required=True, help="dataset directory")
    s.add_argument("--context-len", type=int, default=256)
    s.add_argument("--identity-threshold", type=float, default=0.5, help="clustering / split identity threshold")
    s.add_argument("--holdout-fraction", type=float, default=0.1, help="fraction of clusters held out (0 = no split)")
    s.add_argument("--oversize", choices=("truncate", "skip"), default="truncate")
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_prep)

    for name, func in (("train", cmd_train), ("finetune", cmd_finetune)):
        s = sub.add_parser(name, parents=[common], help=f"{name} a model")
        s.add_argument("--data", required=True, help="dataset directory from prep")
        s.add_argument("--out", required=True, help="output directory (checkpoint/ + log.csv)")
        s.add_argument("--config", help="flat key = value config file")
        _add_schema_flags(s)
        if name == "train":
            s.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint if present")
        else:
            s.add_argument("--base-checkpoint", help="converged checkpoint to continue from (required)")
            s.add_argument("--epochs", type=float, default=2.0, help="finetuning epochs (capped at 2)")
        s.set_defaults(func=func)

    s = sub.add_parser("sample", parents=[common], help="temperature x top-p generation sweep")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True, help="output directory (library.fasta + library.csv)")
    s.add_argument("--temperatures", default=",".join(map(str, smp.DEFAULT_TEMPERATURES)))
    s.add_argument("--top-ps", default=",".join(map(str, smp.DEFAULT_TOP_PS)))
    s.add_argument("--n-per-cell", type=int, default=10)
    s.add_argument("--prompt", default="", help="residue prefix, e.g. EVQ")
    s.add_argument("--max-new-tokens", type=int, default=1024)
    s.add_argument("--direction", choices=("N2C", "C2N"), default="N2C")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--no-dedupe", action="store_true", help="keep exact duplicate sequences")
    s.set_defaults(func=cmd_sample)

    fmt = dict(choices=("csv", "json"), default="csv", help="report format")

    s = sub.add_parser("eval", parents=[common], help="per-sequence and corpus perplexity")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--fasta", required=True)
    s.add_argument("--direction", choices=("N2C", "C2N"), default="N2C")
    s.add_argument("--out", help="report path (default stdout)")
    s.add_argument("--format", **fmt)
    s.add_argument("--svg", help="write a perplexity histogram SVG")
    s.add_argument("--identity-ref", help="reference FASTA for a max-identity histogram")
    s.add_argument("--identity-svg", help="path for the identity histogram SVG")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("fitness", parents=[common], help="zero-shot fitness benchmark")
    s.add_argument("--checkpoint", required=True, action="append", help="checkpoint dir, optionally NAME=DIR; repeat for several models")
    s.add_argument("--manifest", required=True, help="lines of name,path,metric[,threshold|k]")
    s.add_argument("--direction", choices=("N2C", "C2N", "mean-both"), default="N2C")
    s.add_argument("--sum-loglik", action="store_true", help="score with summed instead of mean log-likelihood")
    s.add_argument("--ensemble", action="store_true", help="add an average-of-ranks ensemble row")
    s.add_argument("--out", help="report path (default stdout)")
    s.add_argument("--format", **fmt)
    s.add_argument("--svg-dir", help="write score-vs-measurement scatter SVGs here")
    s.set_defaults(func=cmd_fitness)

    s = sub.add_parser("rank", parents=[common], help="keep the top fraction of a library by likelihood")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="library FASTA")
    s.add_argument("--keep", type=float, default=0.5, help="fraction to keep")
    s.add_argument("--out", required=True, help="output FASTA")
    s.add_argument("--scores", help="score report path (default stdout)")
    s.add_argument("--direction", choices=("N2C", "C2N", "mean-both"), default="N2C")
    s.add_argument("--format", **fmt)
    s.set_defaults(func=cmd_rank)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"plm-forge {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except sd.FastaError as exc:
        print(f"plm-forge {args.command}: invalid FASTA: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, CheckpointError, OSError, ValueError) as exc:
        print(f"plm-forge {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"plm-forge {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
