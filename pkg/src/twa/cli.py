"""Command-line entry point: ``twa <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Files a failing command already wrote are removed before exiting.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .annotations import AnnotationError, Dataset, dataset_stats, read_dataset, serialize_dataset
from .eval_compare import SystemScores, token_rank_change
from .experiment import (
    LADDER, ORACLE, PRESETS, VARIANTS, TaskData, make_task, pretrain_base, run_ladder,
    score_model, write_comparison,
)
from .model import ModelConfig, Seq2SeqModel
from .pairs import (
    DISPREFERRED_SOURCES, PREFERRED_SOURCES, SCORE_MODES, PairConfig, build_pairs, parse_pairs,
    serialize_pairs,
)
from .synthetic import TaskSpec, read_clean_targets, write_clean_targets
from .tokenize_align import Vocab, assign_token_weights, build_vocab, encode, token_strings
from .trainer import (
    METHODS, EmptyDatasetError, TrainConfig, TrainingError, read_config_file, train, write_log,
)

log = logging.getLogger("twa")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message if self.prog == "twa" else f"{self.prog}: {message}")


class Outputs:
    """Tracks files and directories a command creates so failures leave nothing behind."""

    def __init__(self):
        self.files: list[Path] = []
        self.dirs: list[Path] = []

    def directory(self, path) -> Path:
        path = Path(path)
        missing = []
        p = path
        while not p.exists():
            missing.append(p)
            p = p.parent
        path.mkdir(parents=True, exist_ok=True)
        self.dirs.extend(reversed(missing))
        return path

    def file(self, path) -> Path:
        path = Path(path)
        self.directory(path.parent)
        self.files.append(path)
        return path

    def write_text(self, path, text: str) -> Path:
        path = self.file(path)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        return path

    def cleanup(self) -> None:
        for f in self.files:
            if f.exists():
                f.unlink()
        for d in reversed(self.dirs):
            if d.exists() and not any(d.iterdir()):
                d.rmdir()


# --- helpers -----------------------------------------------------------------

def _existing(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    return path


def _dataset(path) -> Dataset:
    return read_dataset(_existing(path))


def _vocab(path) -> Vocab:
    try:
        return Vocab.load(_existing(path))
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DataError(f"{path}: not a vocabulary file ({e})") from e


def _model(path) -> Seq2SeqModel:
    try:
        return Seq2SeqModel.load(_existing(path))
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DataError(f"{path}: not a checkpoint file ({e})") from e


def _key_values(items, what) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"{what}: expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _task_spec(overrides: dict[str, str], base: TaskSpec) -> TaskSpec:
    kwargs = {}
    for key, raw in overrides.items():
        if not hasattr(base, key):
            raise UsageError(f"unknown task setting {key!r}")
        cur = getattr(base, key)
        kwargs[key] = type(cur)(raw) if not isinstance(cur, str) else raw
    try:
        return replace(base, **kwargs)
    except ValueError as e:
        raise UsageError(str(e)) from e


def _check_vocab(model: Seq2SeqModel, vocab: Vocab, what: str) -> None:
    if model.config.vocab_size != len(vocab):
        raise DataError(f"{what}: model vocabulary size {model.config.vocab_size} "
                        f"does not match vocabulary of {len(vocab)} tokens")


def _first_per_source(dataset: Dataset) -> Dataset:
    seen, out = set(), []
    for ex in dataset:
        if ex.source_id not in seen:
            seen.add(ex.source_id)
            out.append(ex)
    return Dataset(out)


def _reference_targets(dataset: Dataset) -> dict[str, str]:
    out = {}
    for ex in dataset:
        if ex.is_reference:
            out.setdefault(ex.source_id, ex.output_text)
    return out


def _write_csv(outputs: Outputs, path, header, rows) -> Path:
    path = outputs.file(path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _write_scores(outputs: Outputs, path, dataset: Dataset, systems) -> Path:
    rows = []
    for i, ex in enumerate(dataset):
        rows.append([ex.source_id] + [repr(float(s.values[i])) for s in systems])
    return _write_csv(outputs, path, ["source_id"] + [s.name for s in systems], rows)


# --- subcommands -------------------------------------------------------------

def cmd_gen(args, outputs: Outputs) -> None:
    preset = PRESETS[args.preset]
    spec = _task_spec(_key_values(args.set, "--set"), preset.spec)
    preset = replace(
        preset, spec=spec,
        n_sources=args.n_sources or preset.n_sources,
        n_systems=args.n_systems or preset.n_systems,
        n_validation=args.n_validation or preset.n_validation,
        n_test=args.n_test or preset.n_test,
    )
    task = make_task(preset, args.seed)
    out = outputs.directory(args.out_dir)
    outputs.write_text(out / "train.tsv", serialize_dataset(task.train))
    outputs.write_text(out / "validation.tsv", serialize_dataset(task.validation))
    outputs.write_text(out / "test.tsv", serialize_dataset(task.test))
    write_clean_targets(outputs.file(out / "clean_targets.tsv"), task.clean)
    task.vocab.save(outputs.file(out / "vocab.json"))
    print(f"wrote {len(task.train)} training, {len(task.validation)} validation and "
          f"{len(task.test)} test records to {out}")


def cmd_ingest(args, outputs: Outputs) -> None:
    data = _dataset(args.input)
    if args.output:
        outputs.write_text(args.output, serialize_dataset(data))
    if args.vocab_out:
        texts = [ex.source_text for ex in data] + [ex.output_text for ex in data]
        build_vocab(texts, args.vocab_size).save(outputs.file(args.vocab_out))
    n_err = sum(ex.has_error for ex in data)
    print(f"{len(data)} records, {len(data.source_ids)} sources, "
          f"{len(data.references())} references, {n_err} with error spans")


def cmd_align(args, outputs: Outputs) -> None:
    data = _dataset(args.dataset)
    vocab = _vocab(args.vocab)
    lines = []
    for ex in data:
        tok = encode(ex.output_text, vocab)
        w = assign_token_weights(tok, ex.spans, not args.keep_off_trajectory)
        lines.append(json.dumps({
            "source_id": ex.source_id,
            "system_id": ex.system_id,
            "tokens": token_strings(tok, vocab)[1:],
            "weights": [float(x) for x in w.weights],
            "spans": [list(s) for s in w.spans],
        }, ensure_ascii=False) + "\n")
    if args.output:
        outputs.write_text(args.output, "".join(lines))
    else:
        sys.stdout.write("".join(lines))


def cmd_pairs(args, outputs: Outputs) -> None:
    data = _dataset(args.dataset)
    vocab = _vocab(args.vocab) if args.vocab else None
    if args.score_mode == "mean" and vocab is None:
        raise UsageError("--score-mode mean needs --vocab")
    try:
        config = PairConfig(args.preferred, args.dispreferred, args.score_mode)
    except ValueError as e:
        raise UsageError(str(e)) from e
    try:
        pairs = build_pairs(data, config, vocab)
    except ValueError as e:
        raise DataError(str(e)) from e
    outputs.write_text(args.output, serialize_pairs(pairs))
    print(f"wrote {len(pairs)} pairs to {args.output}")


def _train_config(args) -> TrainConfig:
    values = read_config_file(_existing(args.config)) if args.config else {}
    values.update(_key_values(args.set, "--set"))
    if args.method:
        values["method"] = args.method
    values["seed"] = str(args.seed)
    try:
        return TrainConfig.from_mapping(values)
    except (ValueError, TypeError) as e:
        raise UsageError(f"training config: {e}") from e


def cmd_train(args, outputs: Outputs) -> None:
    config = _train_config(args)
    vocab = _vocab(args.vocab)
    if config.method == "dpo":
        if not args.pairs:
            raise UsageError("method dpo needs --pairs")
        with open(_existing(args.pairs), encoding="utf-8") as f:
            data = parse_pairs(f)
        if not data:
            raise DataError(f"{args.pairs}: no preference pairs")
    else:
        if not args.dataset:
            raise UsageError(f"method {config.method} needs --dataset")
        data = _dataset(args.dataset)
    if args.base:
        model = _model(args.base)
        _check_vocab(model, vocab, args.base)
    else:
        model = Seq2SeqModel(ModelConfig(
            len(vocab), args.embed_dim, args.hidden_dim, args.num_heads,
            args.max_len, args.max_len, seed=args.seed))
    validation = _dataset(args.validation) if args.validation else None
    clean = read_clean_targets(_existing(args.clean_targets)) if args.clean_targets else None
    if validation is not None and clean is None:
        clean = _reference_targets(validation)
    if validation is not None:
        missing = [ex.source_id for ex in validation if ex.source_id not in clean]
        if missing:
            raise DataError(f"no target for validation source {missing[0]!r}")
    result = train(model, data, config, vocab, validation, [ORACLE] if validation else None, clean)
    out = outputs.directory(args.out_dir)
    result.model.save(outputs.file(out / "checkpoint.json"))
    result.final_model.save(outputs.file(out / "final.json"))
    result.write_log(outputs.file(out / "log.csv"))
    _write_csv(outputs, out / "checkpoints.csv", ["step", "validation_score", "selected"], [
        [c.step, "" if c.validation_score is None else repr(c.validation_score),
         int(c.step == result.selected.step)] for c in result.checkpoints])
    print(f"selected step {result.selected.step}; checkpoint written to {out / 'checkpoint.json'}")


def cmd_eval(args, outputs: Outputs) -> None:
    data = _first_per_source(_dataset(args.dataset))
    vocab = _vocab(args.vocab)
    clean = read_clean_targets(_existing(args.clean_targets)) if args.clean_targets else _reference_targets(data)
    missing = [ex.source_id for ex in data if ex.source_id not in clean]
    if missing:
        raise DataError(f"no target for source {missing[0]!r}")
    named = _key_values(args.system, "--system")
    if len(named) < 1:
        raise UsageError("give at least one --system NAME=CHECKPOINT")
    systems = []
    for name, path in named.items():
        model = _model(path)
        _check_vocab(model, vocab, path)
        systems.append(SystemScores(name, score_model(model, data, clean, vocab)))
    out = outputs.directory(args.out_dir)
    _write_scores(outputs, out / "scores.csv", data, systems)
    for p in write_comparison(out, systems, args.n_resamples, args.seed, args.alpha):
        outputs.files.append(Path(p))
    for s in systems:
        print(f"{s.name}\t{s.mean:.4f}")


def cmd_rank_diff(args, outputs: Outputs) -> None:
    vocab = _vocab(args.vocab)
    base, trained = _model(args.base), _model(args.trained)
    _check_vocab(base, vocab, args.base)
    _check_vocab(trained, vocab, args.trained)
    data = _dataset(args.dataset)
    if args.limit:
        data = Dataset(data.examples[: args.limit])
    records = token_rank_change(base, trained, data.examples, vocab)
    _write_csv(outputs, args.output,
               ["example_index", "source_id", "system_id", "position", "token",
                "base_rank", "trained_rank", "delta", "in_error_span"],
               [[r.example_index, data.examples[r.example_index].source_id,
                 data.examples[r.example_index].system_id, r.position, r.token,
                 r.base_rank, r.trained_rank, r.delta, int(r.in_error_span)] for r in records])
    err = [r.delta for r in records if r.in_error_span]
    ok = [r.delta for r in records if not r.in_error_span]
    print(f"{len(records)} tokens; mean rank change error {np.mean(err) if err else 0:.3f}, "
          f"non-error {np.mean(ok) if ok else 0:.3f}")


def cmd_stats(args, outputs: Outputs) -> None:
    report = dataset_stats(_dataset(args.dataset), _vocab(args.vocab), args.bins)
    text = json.dumps(report.as_dict(), indent=2) + "\n"
    if args.output:
        outputs.write_text(args.output, text)
    else:
        sys.stdout.write(text)


@dataclass(frozen=True)
class ExperimentManifest:
    """Inputs of an ablation run read from a JSON file; relative paths resolve
    against the manifest's directory."""

    dataset: Path
    validation: Path
    test: Path
    vocab: Path
    base: Path
    out_dir: Path
    clean_targets: Path | None = None
    config: Path | None = None
    methods: tuple[str, ...] = tuple(LADDER)
    seed: int = 0

    @classmethod
    def load(cls, path) -> "ExperimentManifest":
        path = _existing(path)
        try:
            blob = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: {e}") from e
        root = path.parent
        known = {"dataset", "validation", "test", "vocab", "base", "out_dir",
                 "clean_targets", "config", "methods", "seed"}
        unknown = set(blob) - known
        if unknown:
            raise DataError(f"{path}: unknown manifest keys {sorted(unknown)}")
        try:
            kwargs = {k: root / blob[k] for k in ("dataset", "validation", "test", "vocab", "base", "out_dir")}
        except KeyError as e:
            raise DataError(f"{path}: missing manifest key {e}") from e
        for k in ("clean_targets", "config"):
            if blob.get(k):
                kwargs[k] = root / blob[k]
        if "methods" in blob:
            kwargs["methods"] = tuple(blob["methods"])
        kwargs["seed"] = int(blob.get("seed", 0))
        manifest = cls(**kwargs)
        manifest.check()
        return manifest

    def check(self) -> None:
        for name in ("dataset", "validation", "test", "vocab", "base", "clean_targets", "config"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise DataError(f"manifest {name}: no such file: {p}")
        bad = [m for m in self.methods if m not in VARIANTS]
        if bad:
            raise DataError(f"manifest methods: unknown {bad}; choose from {sorted(VARIANTS)}")


def cmd_ablate(args, outputs: Outputs) -> None:
    preset = PRESETS[args.preset]
    if args.manifest:
        m = ExperimentManifest.load(args.manifest)
        vocab = _vocab(m.vocab)
        test = _first_per_source(_dataset(m.test))
        clean = read_clean_targets(m.clean_targets) if m.clean_targets else {}
        validation = _dataset(m.validation)
        for ds in (validation, test):
            for sid, text in _reference_targets(ds).items():
                clean.setdefault(sid, text)
        task = TaskData(vocab, _dataset(m.dataset), validation, test, clean)
        base = _model(m.base)
        _check_vocab(base, vocab, str(m.base))
        if m.config:
            finetune = TrainConfig.from_mapping(read_config_file(m.config))
            preset = replace(preset, finetune=finetune)
        methods, seed, out_dir = list(m.methods), m.seed, m.out_dir
    else:
        if not args.out_dir:
            raise UsageError("ablate needs --out-dir or --manifest")
        seed, out_dir = args.seed, Path(args.out_dir)
        methods = args.variants or list(LADDER)
        bad = [v for v in methods if v not in VARIANTS]
        if bad:
            raise UsageError(f"unknown variants {bad}; choose from {sorted(VARIANTS)}")
        task = make_task(preset, seed)
        base = _model(args.base) if args.base else pretrain_base(preset, task, seed)
        _check_vocab(base, task.vocab, "base model")
    out = outputs.directory(out_dir)
    result = run_ladder(preset, seed, methods, task=task, base=base)
    base.save(outputs.file(out / "base.json"))
    for name, run in result.runs.items():
        run.model.save(outputs.file(out / f"{name}.json"))
        write_log(outputs.file(out / f"{name}_log.csv"), run.log)
    systems = [SystemScores("base", result.base_scores)]
    systems += [SystemScores(n, s) for n, s in result.scores.items()]
    _write_scores(outputs, out / "scores.csv", task.test, systems)
    for p in write_comparison(out, systems, args.n_resamples, seed, args.alpha):
        outputs.files.append(Path(p))
    with open(out / "ranks.csv", encoding="utf-8") as f:
        sys.stdout.write(f.read())


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="twa", description="Token-level weighted training pipelines.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("gen", help="generate the synthetic corruption task")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--preset", choices=sorted(PRESETS), default="default")
    g.add_argument("--n-sources", type=int)
    g.add_argument("--n-systems", type=int)
    g.add_argument("--n-validation", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="task setting override")
    g.set_defaults(func=cmd_gen)

    i = sub.add_parser("ingest", help="validate a dataset and write it back canonically")
    i.add_argument("--input", required=True)
    i.add_argument("--output")
    i.add_argument("--vocab-out")
    i.add_argument("--vocab-size", type=int, default=256)
    i.set_defaults(func=cmd_ingest)

    a = sub.add_parser("align", help="per-token weights as JSON lines")
    a.add_argument("--dataset", required=True)
    a.add_argument("--vocab", required=True)
    a.add_argument("--keep-off-trajectory", action="store_true",
                   help="keep weight 1 on non-error tokens after the first error")
    a.add_argument("--output")
    a.set_defaults(func=cmd_align)

    pr = sub.add_parser("pairs", help="build preference pairs")
    pr.add_argument("--dataset", required=True)
    pr.add_argument("--output", required=True)
    pr.add_argument("--preferred", choices=PREFERRED_SOURCES, default="reference_and_submissions")
    pr.add_argument("--dispreferred", choices=DISPREFERRED_SOURCES, default="all_submissions")
    pr.add_argument("--score-mode", choices=SCORE_MODES, default="sum")
    pr.add_argument("--vocab")
    pr.set_defaults(func=cmd_pairs)

    t = sub.add_parser("train", help="train or fine-tune a model")
    t.add_argument("--dataset")
    t.add_argument("--pairs")
    t.add_argument("--vocab", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--config", help="key=value file of training settings")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="training setting override")
    t.add_argument("--method", choices=METHODS)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--base", help="checkpoint to start from")
    t.add_argument("--validation")
    t.add_argument("--clean-targets")
    t.add_argument("--embed-dim", type=int, default=32)
    t.add_argument("--hidden-dim", type=int, default=64)
    t.add_argument("--num-heads", type=int, default=2)
    t.add_argument("--max-len", type=int, default=32)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score systems and cluster them into ranks")
    e.add_argument("--dataset", required=True)
    e.add_argument("--vocab", required=True)
    e.add_argument("--system", action="append", required=True, metavar="NAME=CHECKPOINT")
    e.add_argument("--clean-targets")
    e.add_argument("--out-dir", required=True)
    e.add_argument("--n-resamples", type=int, default=1000)
    e.add_argument("--alpha", type=float, default=0.05)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rank-diff", help="per-token rank changes between two checkpoints")
    r.add_argument("--base", required=True)
    r.add_argument("--trained", required=True)
    r.add_argument("--dataset", required=True)
    r.add_argument("--vocab", required=True)
    r.add_argument("--output", required=True)
    r.add_argument("--limit", type=int)
    r.set_defaults(func=cmd_rank_diff)

    s = sub.add_parser("stats", help="token counts and error proportions")
    s.add_argument("--dataset", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--bins", type=int, default=10)
    s.add_argument("--output")
    s.set_defaults(func=cmd_stats)

    ab = sub.add_parser("ablate", help="run the ablation ladder and rank the variants")
    ab.add_argument("--manifest", help="JSON manifest of input paths, methods, seed and out_dir")
    ab.add_argument("--out-dir")
    ab.add_argument("--seed", type=int, default=0)
    ab.add_argument("--preset", choices=sorted(PRESETS), default="default")
    ab.add_argument("--variants", nargs="+", metavar="NAME")
    ab.add_argument("--base", help="pretrained base checkpoint; pretrained from scratch if omitted")
    ab.add_argument("--n-resamples", type=int, default=1000)
    ab.add_argument("--alpha", type=float, default=0.05)
    ab.set_defaults(func=cmd_ablate)
    return p



def main(argv=None) -> int:
    outputs = Outputs()
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args, outputs)
        return EXIT_OK
    except UsageError as e:
        code, msg = EXIT_USAGE, f"usage error: {e}"
    except TrainingError as e:
        code, msg = EXIT_NUMERIC, f"numerical failure: {e}"
    except (DataError, AnnotationError, EmptyDatasetError, FileNotFoundError, ValueError) as e:
        code, msg = EXIT_DATA, f"data error: {e}"
    outputs.cleanup()
    print(f"twa: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
