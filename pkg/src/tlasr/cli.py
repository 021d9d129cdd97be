"""Command-line entry point.

Every subcommand resolves its options as defaults < ``--config`` file <
explicit flags, runs, and writes ``run_manifest.json`` next to its outputs.
The manifest's ``config`` block is itself a valid ``--config`` file (a whole
manifest is accepted too), so ``tlasr <cmd> --config run_manifest.json``
replays a run bit for bit.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import __version__
from .corpus import Corpus, CorpusFormatError, GeneratorConfig, Vocabulary, generate, load_corpus, save_corpus
from .decode import beam_search, greedy_decode
from .evaluation import classify_rare, corpus_wer, wer_breakdown, word_counts
from .experiments import PRESETS, run_experiment, write_manifest
from .lattice import InfeasibleBandError
from .training import Checkpoint, TrainConfig, TrainingDivergedError, finetune_minwer, train_rnnt


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# config resolution --------------------------------------------------------------


def _read_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    if data.get("tool") == "tlasr" and "config" in data:
        data = data["config"]
    return data


def _merge_into(base: dict, update: dict) -> None:
    for key, value in update.items():
        if isinstance(base.get(key), dict) and isinstance(value, dict):
            _merge_into(base[key], value)
        else:
            base[key] = value


def _resolve(defaults: dict, args: argparse.Namespace, flag_map: Dict[str, str]) -> dict:
    """Defaults, then the config file, then flags the user actually passed."""
    cfg = json.loads(json.dumps(defaults))
    file_cfg = _read_config(args.config)
    unknown = set(file_cfg) - set(cfg)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    _merge_into(cfg, file_cfg)
    for dest, dotted in flag_map.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        node = cfg
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = value
    return cfg


def _require(cfg: dict, *keys: str):
    missing = [k for k in keys if cfg.get(k) in (None, [], "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


# subcommands --------------------------------------------------------------------


def _gen_corpus(args) -> int:
    cfg = _resolve(
        {"out": None, "generator": GeneratorConfig().to_dict()},
        args,
        {"out": "out", "seed": "generator.seed", "base_seed": "generator.base_seed",
         "n_languages": "generator.n_languages", "relatedness": "generator.relatedness",
         "noise": "generator.noise_std", "n_utts": "generator.n_utts", "n_test": "generator.n_test",
         "severity": "generator.domain_severity"},
    )
    _require(cfg, "out")
    gen_cfg = cfg["generator"]
    if len(gen_cfg["n_utts"]) == 1 or (args.n_languages is not None and args.n_utts is None):
        # one size given: use it for every language
        gen_cfg["n_utts"] = [gen_cfg["n_utts"][0]] * gen_cfg["n_languages"]
    try:
        gen = GeneratorConfig.from_dict(cfg["generator"])
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for name, (train, test) in generate(gen).items():
        for split, corpus in (("train", train), ("test", test)):
            path = out / f"{name}.{split}.jsonl"
            save_corpus(path, corpus)
            files.append(str(path))
    write_manifest(out, "gen-corpus", cfg, {"outputs": files})
    print("\n".join(files))
    return 0


def _load_corpora(paths: Sequence[str]) -> Dict[str, Corpus]:
    corpora: Dict[str, Corpus] = {}
    for p in paths:
        c = load_corpus(p)
        if c.language in corpora:
            corpora[c.language].utterances.extend(c.utterances)
        else:
            corpora[c.language] = c
    return corpora


def _infer_vocab_size(corpora: Sequence[Corpus]) -> int:
    """Labels including the word boundary: from generator metadata when present."""
    for c in corpora:
        gen = c.metadata.get("generator", {})
        if "n_chars" in gen:
            return Vocabulary(int(gen["n_chars"])).size
    top = max((int(t) for c in corpora for u in c for t in u.tokens), default=0)
    return top + 1


def _train_defaults(loss: str) -> dict:
    tc = TrainConfig(loss=loss).to_dict()
    # filled from the data (or the seed checkpoint) unless set explicitly
    tc["model"]["vocab_size"] = None
    tc["model"]["feature_dim"] = None
    return {"train": [], "dev": None, "out": None, "train_config": tc}


_TRAIN_FLAGS = {
    "train": "train", "dev": "dev", "out": "out",
    "epochs": "train_config.epochs", "batch_size": "train_config.batch_size",
    "lr": "train_config.schedule.base_lr", "warmup_steps": "train_config.schedule.warmup_steps",
    "hold_steps": "train_config.schedule.hold_steps", "seed": "train_config.rng_seed",
    "seed_checkpoint": "train_config.seed_checkpoint", "transplant": "train_config.transplant",
    "sampling": "train_config.language_sampling", "beam": "train_config.beam", "n_best": "train_config.n_best",
}


def _prepare_training(args, loss: str):
    cfg = _resolve(_train_defaults(loss), args, _TRAIN_FLAGS)
    _require(cfg, "train", "out")
    corpora = _load_corpora(cfg["train"])
    tc_dict = cfg["train_config"]
    if loss == "minwer":
        _require(tc_dict, "seed_checkpoint")
        tc_dict["model"] = asdict(Checkpoint.load(tc_dict["seed_checkpoint"]).model_config)
    model = tc_dict["model"]
    if model.get("vocab_size") is None:
        model["vocab_size"] = _infer_vocab_size(list(corpora.values()))
    if model.get("feature_dim") is None:
        dims = sorted({u.features.shape[1] for c in corpora.values() for u in c})
        if len(dims) != 1:
            raise StageError(loss, f"training corpora disagree on feature dimension: {dims}")
        model["feature_dim"] = dims[0]
    try:
        tc = TrainConfig.from_dict(tc_dict)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    cfg["train_config"] = tc.to_dict()
    dev = list(load_corpus(cfg["dev"])) if cfg["dev"] else None
    return cfg, tc, corpora, dev


def _finish_training(cfg: dict, ckpt: Checkpoint, command: str) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    ckpt.save(out / "model.ckpt")
    with open(out / "trace.jsonl", "w", encoding="utf-8") as f:
        for rec in ckpt.trace:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    write_manifest(out, command, cfg, {"outputs": [str(out / "model.ckpt"), str(out / "trace.jsonl")]})
    print(out / "model.ckpt")
    return 0


def _train(args) -> int:
    cfg, tc, corpora, dev = _prepare_training(args, "rnnt")
    data = {name: c.utterances for name, c in corpora.items()}
    try:
        ckpt = train_rnnt(data if len(data) > 1 else next(iter(data.values())), tc, dev=dev, stage="rnnt")
    except InfeasibleBandError as exc:
        raise StageError("rnnt", str(exc)) from None
    return _finish_training(cfg, ckpt, "train")


def _finetune(args) -> int:
    cfg, tc, corpora, dev = _prepare_training(args, "minwer")
    vocab = Vocabulary(tc.model.vocab_size - 1)
    utts = [u for name in sorted(corpora) for u in corpora[name]]
    ckpt = finetune_minwer(utts, tc, dev=dev, vocab=vocab)
    return _finish_training(cfg, ckpt, "finetune-minwer")


def _decode(args) -> int:
    cfg = _resolve(
        {"checkpoint": None, "corpus": None, "out": None, "beam": 1, "n_best": 1, "max_symbols_per_frame": 5},
        args,
        {"checkpoint": "checkpoint", "corpus": "corpus", "out": "out", "beam": "beam", "n_best": "n_best"},
    )
    _require(cfg, "checkpoint", "corpus", "out")
    if cfg["beam"] < 1 or not 1 <= cfg["n_best"] <= cfg["beam"]:
        raise UsageError("need beam >= 1 and 1 <= n_best <= beam")
    ckpt = Checkpoint.load(cfg["checkpoint"])
    vocab = Vocabulary(ckpt.model_config.vocab_size - 1)
    corpus = load_corpus(cfg["corpus"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        for utt in corpus:
            try:
                if cfg["beam"] == 1:
                    tokens = greedy_decode(ckpt.params, utt.features, cfg["max_symbols_per_frame"])
                    nbest = None
                else:
                    hyps = beam_search(ckpt.params, utt.features, cfg["beam"], cfg["n_best"], cfg["max_symbols_per_frame"])
                    tokens = hyps[0].tokens
                    nbest = [{"words": vocab.detokenize(h.tokens), "log_prob": h.log_prob} for h in hyps]
            except (ValueError, FloatingPointError) as exc:
                raise StageError("decode", f"utterance {utt.id}: {exc}") from None
            rec = {"id": utt.id, "words": vocab.detokenize(tokens), "tokens": [int(t) for t in tokens]}
            if nbest is not None:
                rec["nbest"] = nbest
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    write_manifest(out.parent, "decode", cfg, {"outputs": [str(out)]}, path=_file_manifest(out))
    print(out)
    return 0


def _file_manifest(out: Path) -> Path:
    """Single-file outputs get a sibling manifest named after them."""
    return out.with_name(out.name + ".manifest.json")


def _read_records(path: str) -> Dict[str, List[str]]:
    """``id -> words`` from a hypothesis file or a corpus file."""
    records = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: {exc}") from None
            if "format" in rec and lineno == 1:
                continue
            if "id" not in rec or "words" not in rec:
                raise CorpusFormatError(f"{path}:{lineno}: record needs 'id' and 'words'")
            records[rec["id"]] = list(rec["words"])
    return records


def _evaluate(args) -> int:
    cfg = _resolve(
        {"hyps": None, "refs": None, "train_corpus": None, "threshold": 5, "format": "text", "out": None},
        args,
        {"hyps": "hyps", "refs": "refs", "train_corpus": "train_corpus", "threshold": "threshold",
         "format": "format", "out": "out"},
    )
    _require(cfg, "hyps", "refs")
    hyps, refs = _read_records(cfg["hyps"]), _read_records(cfg["refs"])
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise StageError("evaluate", f"no hypothesis for utterance {missing[0]} ({len(missing)} missing)")
    pairs = [(refs[k], hyps[k]) for k in refs]
    if cfg["train_corpus"]:
        counts = word_counts(u.words for u in load_corpus(cfg["train_corpus"]))
        report = wer_breakdown(pairs, classify_rare(counts, cfg["threshold"]), cfg["threshold"])
    else:
        report = corpus_wer(pairs)
    text = _format_wer(report.to_dict(), cfg["format"])
    if cfg["out"]:
        out = Path(cfg["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        write_manifest(out.parent, "evaluate", cfg, {"outputs": [str(out)]}, path=_file_manifest(out))
    sys.stdout.write(text)
    return 0


def _format_wer(report: dict, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report, sort_keys=True) + "\n"
    from .evaluation import round_half_even

    def cell(v):
        if v is None:
            return "n/a"
        return round_half_even(v, 2) if isinstance(v, float) else str(v)

    keys = [k for k in ("wer", "substitutions", "deletions", "insertions", "n_ref",
                        "rare_wer", "nonrare_wer", "threshold") if k in report]
    if fmt == "tsv":
        return "\t".join(keys) + "\n" + "\t".join(cell(report[k]) for k in keys) + "\n"
    width = max(map(len, keys))
    return "".join(f"{k.ljust(width)}  {cell(report[k])}\n" for k in keys)


def _experiment(args) -> int:
    cfg = _resolve(
        {"preset": None, "out": None, "seeds": [0], "config": {}},
        args,
        {"preset": "preset", "out": "out", "seeds": "seeds"},
    )
    _require(cfg, "preset", "out")
    if cfg["preset"] not in PRESETS:
        raise UsageError(f"unknown preset {cfg['preset']!r}; choose from {', '.join(PRESETS)}")
    if args.set:
        cfg["config"] = {**cfg["config"], **_parse_sets(args.set)}
    try:
        result = run_experiment(cfg["preset"], cfg["out"], cfg["seeds"], cfg["config"] or None)
    except (TypeError, KeyError) as exc:
        raise UsageError(f"bad experiment config: {exc}") from None
    sys.stdout.write(Path(result.files["report.txt"]).read_text(encoding="utf-8"))
    return 0


def _parse_sets(items: Sequence[str]) -> dict:
    out = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


# parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tlasr", description="Transducer ASR lab: corpora, training, decoding, scoring.")
    parser.add_argument("--version", action="version", version=f"tlasr {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, help_text, func):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(usage=p.format_usage)
        p.add_argument("--config", help="JSON config file or run manifest; flags override it")
        p.set_defaults(func=func)
        return p

    p = add("gen-corpus", "generate synthetic train/test corpora for a language family", _gen_corpus)
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="utterance sampling seed")
    p.add_argument("--base-seed", type=int, help="language family seed")
    p.add_argument("--n-languages", type=int)
    p.add_argument("--relatedness", type=float)
    p.add_argument("--noise", type=float, help="emission noise standard deviation")
    p.add_argument("--n-utts", type=int, nargs="+", help="training utterances per language")
    p.add_argument("--n-test", type=int)
    p.add_argument("--severity", type=float, help="domain shift severity")

    for name, func, text in (
        ("train", _train, "alignment-restricted RNNT training (mono- or multilingual)"),
        ("finetune-minwer", _finetune, "MinWER fine-tuning from a seed checkpoint"),
    ):
        p = add(name, text, func)
        p.add_argument("--train", nargs="+", help="training corpus files (one language each)")
        p.add_argument("--dev", help="dev corpus file for the loss trace")
        p.add_argument("--out", help="output directory")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float, help="base learning rate")
        p.add_argument("--warmup-steps", type=int)
        p.add_argument("--hold-steps", type=int)
        p.add_argument("--seed", type=int, help="batching and init seed")
        p.add_argument("--seed-checkpoint", help="checkpoint to initialise from")
        p.add_argument("--transplant", choices=("encoder_only", "full", "none"))
        p.add_argument("--sampling", choices=("balanced", "proportional"))
        p.add_argument("--beam", type=int)
        p.add_argument("--n-best", type=int)

    p = add("decode", "decode a corpus to JSONL hypotheses", _decode)
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--out", help="hypothesis JSONL file")
    p.add_argument("--beam", type=int, help="1 means greedy")
    p.add_argument("--n-best", type=int)

    p = add("evaluate", "score hypotheses against references", _evaluate)
    p.add_argument("--hyps", help="hypothesis JSONL (id, words)")
    p.add_argument("--refs", help="reference JSONL or corpus file")
    p.add_argument("--train-corpus", help="training corpus for the rare-word split")
    p.add_argument("--threshold", type=int, help="rare-word count threshold")
    p.add_argument("--format", choices=("text", "tsv", "json"))
    p.add_argument("--out", help="report file")

    p = add("experiment", "run a preset comparison", _experiment)
    p.add_argument("preset", nargs="?", help=", ".join(PRESETS))
    p.add_argument("--out", help="output directory")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one experiment config field")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = None
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.func(args)
    except UsageError as exc:
        if args is not None:
            sys.stderr.write(args.usage())
        print(exc, file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"tlasr: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"tlasr: {exc}", file=sys.stderr)
        return 2
    except (CorpusFormatError, InfeasibleBandError, OSError, ValueError) as exc:
        print(f"tlasr: stage {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
