"""Command-line entry point: ``rumorssl <subcommand> [flags]``.

Exit status is 0 on success, 1 for usage, configuration or input errors and 2
when a run fails after validation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .encoders import load_checkpoint, save_checkpoint
from .graphdata import (
    BINARY_LABELS,
    DEFAULT_DX,
    FOUR_CLASS_LABELS,
    Corpus,
    CorpusError,
    content_hash,
    generate_synthetic_corpus,
    parse_corpus,
    serialize_corpus,
    split_corpus,
    summarize_corpus,
)
from .gradsuite import TOLERANCE, run_gradient_suite
from .joao import AUG_KINDS
from .metrics import aggregate_runs, results_csv
from .training import (
    DEFAULT_K_VALUES,
    TrainConfig,
    build_bundle,
    evaluate,
    pretrain,
    run_fewshot,
    run_pretrain_finetune,
    run_semi_supervised,
    sub_seed,
)

log = logging.getLogger("rumorssl")

LABEL_SETS = {"binary": BINARY_LABELS, "four": FOUR_CLASS_LABELS}


class ConfigError(ValueError):
    """Bad configuration value or unknown key."""


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything a run needs: training hyperparameters plus data and output plumbing."""

    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: str | None = None
    unlabeled_corpus: str | None = None
    out_dir: str = "runs"
    labels: str = "binary"
    d_x: int = DEFAULT_DX
    k_values: tuple[int, ...] = DEFAULT_K_VALUES
    n_splits: int = 10
    fewshot_seeds: int = 5

    def __post_init__(self):
        if self.labels not in LABEL_SETS:
            raise ConfigError(f"labels: must be one of {sorted(LABEL_SETS)}")
        if self.d_x < 1:
            raise ConfigError("d_x: must be positive")
        if self.n_splits < 1 or self.fewshot_seeds < 1:
            raise ConfigError("n_splits and fewshot_seeds must be at least 1")
        self.k_values = tuple(int(k) for k in self.k_values)
        if not self.k_values or min(self.k_values) < 1:
            raise ConfigError("k_values: need positive integers")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "train"}
        d["k_values"] = list(self.k_values)
        d.update(self.train.to_dict())
        return d


_RUN_KEYS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name != "train"}
_TRAIN_KEYS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _check_type(key: str, value, default):
    """Coerce ``value`` to the type of ``default`` or raise a ConfigError naming ``key``."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        kind = type(default[0]) if default else float
        return tuple(_check_type(key, v, kind(0)) for v in value)
    if default is None or isinstance(default, str):
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported value {value!r}")


def resolve_config(values: dict) -> RunConfig:
    """Apply ``values`` over the defaults, rejecting unknown keys and wrong types."""
    run_defaults, train_defaults = RunConfig(), TrainConfig()
    run_kw, train_kw = {}, {}
    for key, value in values.items():
        if key in _TRAIN_KEYS:
            train_kw[key] = _check_type(key, value, getattr(train_defaults, key))
        elif key in _RUN_KEYS:
            run_kw[key] = _check_type(key, value, getattr(run_defaults, key))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        train = TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(train=train, **run_kw)


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Read a JSON config file (may be absent) and apply flag ``overrides`` on top."""
    values: dict = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc.msg}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object")
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return resolve_config(values)


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _add_train_flags(p: argparse.ArgumentParser, method_required: bool = False) -> None:
    p.add_argument("--corpus", help="labeled (and optionally unlabeled) corpus, JSON Lines")
    p.add_argument("--unlabeled-corpus", dest="unlabeled_corpus", help="extra unlabeled claims")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--method", required=method_required, choices=["infograph", "joao", "graphmae"])
    p.add_argument("--labels", choices=sorted(LABEL_SETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int)
    p.add_argument("--finetune-epochs", dest="finetune_epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--splits", dest="n_splits", type=int, help="repeated random splits")
    p.add_argument("--split-ratios", dest="split_ratios", type=_csv_floats)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rumorssl", description="Graph self-supervised rumor detection.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="validate a corpus file and write its canonical form")
    p.add_argument("--input", required=True)
    p.add_argument("--out")
    p.add_argument("--labels", choices=sorted(LABEL_SETS), default="binary")
    p.add_argument("--d-x", dest="d_x", type=int, default=DEFAULT_DX)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--n-labeled", dest="n_labeled", type=int, default=200)
    p.add_argument("--n-unlabeled", dest="n_unlabeled", type=int, default=2000)
    p.add_argument("--separation", type=float, default=0.6)
    p.add_argument("--avg-posts", dest="avg_posts", type=float, default=12.0)
    p.add_argument("--vocab-size", dest="vocab_size", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="self-supervised pretraining on the unlabeled pool")
    _add_train_flags(p, method_required=False)

    p = sub.add_parser("finetune", help="pretrain then finetune over repeated splits")
    _add_train_flags(p)
    p.add_argument("--checkpoint", help="pretrained encoder; skips pretraining")

    p = sub.add_parser("semi", help="joint semi-supervised training over repeated splits")
    _add_train_flags(p)

    p = sub.add_parser("fewshot", help="accuracy as a function of labeled sample size k")
    _add_train_flags(p)
    p.add_argument("--k-values", dest="k_values", type=_csv_ints)
    p.add_argument("--seeds", dest="fewshot_seeds", type=int)
    p.add_argument("--from-scratch", dest="from_scratch", action="store_true",
                   help="skip pretraining (supervised baseline)")

    p = sub.add_parser("eval", help="score a classifier checkpoint, or replay a results file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--unlabeled-corpus", dest="unlabeled_corpus")
    p.add_argument("--checkpoint", help="classifier checkpoint written by finetune/semi")
    p.add_argument("--config", help="config used to train the checkpoint")
    p.add_argument("--method", choices=["infograph", "joao", "graphmae"])
    p.add_argument("--replay", help="results.json to re-execute and compare bit for bit")

    p = sub.add_parser("gradcheck", help="finite-difference check of every training loss")
    p.add_argument("--batches", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    return parser


_NON_CONFIG_FLAGS = {"command", "verbose", "config", "checkpoint", "from_scratch"}


def _config_from_args(args: argparse.Namespace, strategy: str | None = None) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG_FLAGS}
    if strategy is not None:
        overrides["strategy"] = strategy
    cfg = load_config(args.config, overrides)
    if cfg.corpus is None:
        raise ConfigError("corpus: a corpus path is required (flag --corpus or config key)")
    for key in ("corpus", "unlabeled_corpus"):
        path = getattr(cfg, key)
        if path is not None and not Path(path).is_file():
            raise ConfigError(f"{key}: no such file {path}")
    return cfg


# ------------------------------------------------------------------ corpus


def load_corpus(cfg: RunConfig) -> tuple[Corpus, dict]:
    """Parse the configured corpus files; returns the corpus and its provenance record."""
    labels = LABEL_SETS[cfg.labels]
    corpus = parse_corpus(cfg.corpus, labels, cfg.d_x)
    provenance = {"path": str(cfg.corpus), "hash": content_hash(cfg.corpus)}
    if cfg.unlabeled_corpus:
        extra = parse_corpus(cfg.unlabeled_corpus, labels, cfg.d_x)
        seen = {c.claim_id for c, _ in corpus.labeled + corpus.unlabeled}
        for claim, graph in extra.labeled + extra.unlabeled:
            if claim.claim_id in seen:
                raise CorpusError("claim id also present in the main corpus", claim.claim_id)
            corpus.unlabeled.append((claim, graph))
        provenance["unlabeled_path"] = str(cfg.unlabeled_corpus)
        provenance["unlabeled_hash"] = content_hash(cfg.unlabeled_corpus)
    provenance["summary"] = summarize_corpus(corpus)
    return corpus, provenance


def _check_provenance(recorded: dict, current: dict) -> None:
    for key in ("hash", "unlabeled_hash"):
        if recorded.get(key) != current.get(key):
            raise CorpusError(f"corpus {key} {current.get(key)} differs from the recorded {recorded.get(key)}")


# ------------------------------------------------------------------ outputs


def _out_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _write_log(path: Path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def _write_policies(path: Path, history: Sequence[np.ndarray]) -> None:
    rows = []
    for epoch, table in enumerate(history, start=1):
        for a1, row in zip(AUG_KINDS, table):
            rows.append({"epoch": epoch, "a1": a1, **{a2: repr(float(v)) for a2, v in zip(AUG_KINDS, row)}})
    path.write_text(results_csv(rows), encoding="utf-8")


def split_seed(cfg: RunConfig, index: int) -> int:
    return sub_seed(cfg.train.seed, f"split-{index}")


# ------------------------------------------------------------------ pipelines


def execute_runs(cfg: RunConfig, corpus: Corpus, encoder_state=None, out: Path | None = None) -> dict:
    """Run ``cfg.n_splits`` repeated-split experiments for the configured strategy.

    Returns per-split metrics sorted by split index and the aggregate cells.
    """
    runs, logs, policies = [], [], []
    for i in range(cfg.n_splits):
        tcfg = dataclasses.replace(cfg.train, seed=split_seed(cfg, i))
        if tcfg.strategy == "semi_supervised":
            bundle, metrics = run_semi_supervised(corpus, tcfg)
        else:
            bundle, metrics = run_pretrain_finetune(corpus, tcfg, encoder_state=encoder_state)
            metrics.pop("pretrained_encoder")
        if out is not None:
            save_checkpoint(out / f"split-{i}.ckpt", bundle.classifier_state())
        logs.extend({"split": i, **rec} for rec in bundle.log)
        policies.extend(bundle.policy_history)
        runs.append({"split": i, "seed": tcfg.seed, **metrics})
    accs = [r["test"]["accuracy"] for r in runs]
    mean, std, cell = aggregate_runs(accs)
    aggregate = {"accuracy": {"mean": mean, "std": std, "cell": cell}}
    for name in corpus.label_set:
        f1 = [r["test"]["per_class"][name]["f1"] for r in runs]
        m, s, c = aggregate_runs(f1)
        aggregate[f"f1_{name}"] = {"mean": m, "std": s, "cell": c}
    return {"runs": runs, "aggregate": aggregate, "log": logs, "policies": policies}


def _results_doc(command: str, cfg: RunConfig, provenance: dict, body: dict) -> dict:
    return {
        "command": command,
        "version": __version__,
        "config": cfg.to_dict(),
        "corpus": provenance,
        "std": "population",
        **body,
    }


def _split_rows(result: dict) -> list[dict]:
    rows = [{"split": r["split"], "seed": r["seed"], "accuracy": r["test"]["accuracy"],
             **{f"f1_{k}": v["f1"] for k, v in r["test"]["per_class"].items()}} for r in result["runs"]]
    agg = result["aggregate"]
    rows.append({"split": "mean±std", "seed": "", "accuracy": agg["accuracy"]["cell"],
                 **{k: v["cell"] for k, v in agg.items() if k != "accuracy"}})
    return rows


def cmd_ingest(args) -> int:
    corpus = parse_corpus(args.input, LABEL_SETS[args.labels], args.d_x)
    summary = summarize_corpus(corpus)
    if args.out:
        serialize_corpus(corpus, args.out)
        summary["hash"] = content_hash(args.out)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_synth(args) -> int:
    corpus = generate_synthetic_corpus(args.n_labeled, args.n_unlabeled, vocab_size=args.vocab_size,
                                       avg_posts=args.avg_posts, class_separation=args.separation,
                                       seed=args.seed)
    serialize_corpus(corpus, args.out)
    print(json.dumps({**summarize_corpus(corpus), "hash": content_hash(args.out)}, indent=2))
    return 0


def cmd_pretrain(cfg: RunConfig, corpus: Corpus, provenance: dict) -> int:
    out = _out_dir(cfg)
    bundle = build_bundle(cfg.train, corpus.d_x, len(corpus.label_set))
    history = pretrain(bundle, [g for _, g in corpus.unlabeled])
    save_checkpoint(out / "encoder.ckpt", bundle.encoder.state_dict())
    _write_log(out / "train_log.jsonl", history)
    if bundle.policy_history:
        _write_policies(out / "policy.csv", bundle.policy_history)
    _write_json(out / "results.json", _results_doc("pretrain", cfg, provenance, {"log": history}))
    print(f"encoder checkpoint written to {out / 'encoder.ckpt'}")
    return 0


def cmd_train(command: str, cfg: RunConfig, corpus: Corpus, provenance: dict, encoder_state=None) -> int:
    out = _out_dir(cfg)
    result = execute_runs(cfg, corpus, encoder_state, out)
    _write_log(out / "train_log.jsonl", result.pop("log"))
    policies = result.pop("policies")
    if policies:
        _write_policies(out / "policy.csv", policies)
    doc = _results_doc(command, cfg, provenance, result)
    if encoder_state is not None:
        doc["encoder_checkpoint"] = True
    _write_json(out / "results.json", doc)
    (out / "results.csv").write_text(results_csv(_split_rows(result)), encoding="utf-8")
    print(f"{cfg.train.method} {cfg.train.strategy}: accuracy {result['aggregate']['accuracy']['cell']} "
          f"over {cfg.n_splits} splits")
    return 0


def cmd_fewshot(cfg: RunConfig, corpus: Corpus, provenance: dict, from_scratch: bool) -> int:
    out = _out_dir(cfg)
    seeds = [sub_seed(cfg.train.seed, f"fewshot-{i}") for i in range(cfg.fewshot_seeds)]
    summary = run_fewshot(corpus, cfg.train, cfg.k_values, seeds, pretrained=not from_scratch)
    body = {"pretrained": not from_scratch, "seeds": seeds,
            "per_k": {str(k): v for k, v in summary.items()}}
    _write_json(out / "results.json", _results_doc("fewshot", cfg, provenance, body))
    rows = [{"k": k, "mean": v["mean"], "std": v["std"], "cell": v["cell"]} for k, v in summary.items()]
    (out / "results.csv").write_text(results_csv(rows), encoding="utf-8")
    for row in rows:
        print(f"k={row['k']}: {row['cell']}")
    return 0


def replay(results_path: str | Path, corpus_path: str | Path, unlabeled_path: str | Path | None = None) -> tuple[bool, dict]:
    """Re-execute a results file's runs from its recorded config and compare metrics exactly."""
    doc = json.loads(Path(results_path).read_text(encoding="utf-8"))
    values = dict(doc["config"])
    values["corpus"] = str(corpus_path)
    values["unlabeled_corpus"] = str(unlabeled_path) if unlabeled_path else None
    cfg = resolve_config(values)
    corpus, provenance = load_corpus(cfg)
    _check_provenance(doc["corpus"], provenance)
    if doc["command"] not in ("semi", "finetune") or doc.get("encoder_checkpoint"):
        raise ConfigError(f"replay supports semi and finetune results without an external checkpoint, "
                          f"not {doc['command']!r}")
    fresh = execute_runs(cfg, corpus)
    recorded = [r["test"] for r in doc["runs"]]
    current = json.loads(json.dumps([r["test"] for r in fresh["runs"]]))
    return recorded == current, {"recorded": doc["aggregate"], "replayed": fresh["aggregate"]}


def cmd_eval(args) -> int:
    if args.replay:
        same, detail = replay(args.replay, args.corpus, args.unlabeled_corpus)
        print(json.dumps({"identical": same, **detail}, indent=2))
        return 0 if same else 2
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint or --replay")
    cfg = load_config(args.config, {"corpus": args.corpus, "unlabeled_corpus": args.unlabeled_corpus,
                                    "method": args.method})
    corpus, _ = load_corpus(cfg)
    if not corpus.labeled:
        raise CorpusError("no labeled claims to evaluate")
    bundle = build_bundle(cfg.train, corpus.d_x, len(corpus.label_set))
    bundle.load_classifier_state(load_checkpoint(args.checkpoint))
    print(json.dumps(evaluate(bundle, corpus, corpus.labeled), indent=2))
    return 0


def cmd_gradcheck(args) -> int:
    report = run_gradient_suite(args.batches, args.seed)
    ok = True
    for name, row in report.items():
        ok &= row["ok"]
        print(f"{name:<24} worst rel err {row['worst_rel_err']:.3e}  {'ok' if row['ok'] else 'FAIL'}")
    print(f"tolerance {TOLERANCE:g}: {'all passed' if ok else 'FAILED'}")
    return 0 if ok else 2


def _check_pools(command: str, cfg: RunConfig, corpus: Corpus, encoder_state) -> None:
    needs_unlabeled = (
        command == "pretrain"
        or (command in ("finetune", "fewshot") and cfg.train.pretrain_epochs > 0 and encoder_state is None)
        or (command == "semi" and cfg.train.use_unlabeled)
    )
    if needs_unlabeled and not corpus.unlabeled:
        raise ConfigError(f"{command} needs unlabeled claims (label null) in the corpus or --unlabeled-corpus")
    if command != "pretrain":
        split_corpus(corpus, cfg.train.split_ratios, 0)  # ratios workable for the class counts


_VALIDATION_ERRORS = (UsageError, ConfigError, CorpusError, ValueError, OSError)


def run_command(argv: Sequence[str] | None = None) -> int:
    """Parse ``argv`` and run the subcommand; returns the process exit code."""
    # Validation phase: anything raised before a pipeline starts exits with 1.
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command in ("pretrain", "finetune", "semi", "fewshot"):
            strategy = {"semi": "semi_supervised", "finetune": "pretrain_finetune"}.get(args.command)
            cfg = _config_from_args(args, strategy)
            corpus, provenance = load_corpus(cfg)
            encoder_state = None
            if args.command == "finetune" and args.checkpoint:
                encoder_state = load_checkpoint(args.checkpoint)
            _check_pools(args.command, cfg, corpus, encoder_state)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    try:
        if args.command == "ingest":
            return cmd_ingest(args)
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, corpus, provenance)
        if args.command == "fewshot":
            return cmd_fewshot(cfg, corpus, provenance, args.from_scratch)
        return cmd_train(args.command, cfg, corpus, provenance, encoder_state)
    except (UsageError, ConfigError, CorpusError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level report
        log.debug("run failed", exc_info=True)
        print(f"error: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
