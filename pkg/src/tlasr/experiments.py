"""Toy versions of the comparative studies: staging (rows A-E), in- vs
out-of-domain seeding, rare-word breakdown, zero-shot languages and the
warm-up ablation.

Every preset is a frozen :class:`ExperimentConfig`.  Runs are deterministic
given the config and the seed list, so a manifest that records both is
enough to replay them.  Stages shared between presets (the multilingual
seed, the monolingual baseline, the seeded models) are memoised in-process
under a key built from everything that determines them.
"""

from __future__ import annotations

import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .corpus import DomainSpec, LanguageSpec, Utterance, domain_shift, make_language_family, synthesize
from .evaluation import ReportRow, TableLayout, WerReport, classify_rare, emit_report, werr, word_counts
from .model import ModelConfig
from .training import (
    Checkpoint,
    LrSchedule,
    TrainConfig,
    epochs_to_reach,
    evaluate,
    finetune_minwer,
    train_rnnt,
)

log = logging.getLogger(__name__)

PRESETS = ("table1", "table2_domains", "table3_rare", "zero_shot", "warmup_ablation")
MANIFEST_NAME = "run_manifest.json"


@dataclass(frozen=True)
class ExperimentConfig:
    # corpus regime
    n_chars: int = 10
    feature_dim: int = 8
    relatedness: float = 0.97
    lexicon_size: int = 60
    word_len_range: Tuple[int, int] = (2, 4)
    words_per_utt: Tuple[int, int] = (2, 4)
    zipf_exponent: float = 1.0
    noise_std: float = 0.8
    duration_range: Tuple[int, int] = (2, 3)
    n_high: int = 2
    n_low: int = 2
    high_size: int = 2000
    low_size: int = 300
    test_size: int = 150
    dev_size: int = 40
    ood_severity: float = 1.0
    ood_size: int = 2000
    unrelated_offset: int = 1000
    # model and training
    encoder_hidden: int = 32
    predictor_hidden: int = 16
    joiner_hidden: int = 32
    batch_size: int = 8
    b_left: int = 1
    b_right: int = 1
    pretrain_epochs: int = 8
    mono_epochs: int = 20
    minwer_epochs: int = 2
    pretrain_schedule: LrSchedule = LrSchedule(base_lr=0.1, decay_factor=0.5, decay_interval=400)
    mono_schedule: LrSchedule = LrSchedule(base_lr=0.1, decay_factor=0.5, decay_interval=200)
    minwer_schedule: LrSchedule = LrSchedule(base_lr=0.02)
    staged_schedule: LrSchedule = LrSchedule(
        warmup_steps=80, hold_steps=80, base_lr=0.1, init_lr=0.0, decay_factor=0.5, decay_interval=200
    )
    beam: int = 8
    n_best: int = 4
    rnnt_weight: float = 0.0
    rare_threshold: int = 5

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        data = dict(data)
        for name in ("pretrain_schedule", "mono_schedule", "minwer_schedule", "staged_schedule"):
            if isinstance(data.get(name), dict):
                data[name] = LrSchedule(**data[name])
        for name in ("word_len_range", "words_per_utt", "duration_range"):
            if name in data:
                data[name] = tuple(data[name])
        return cls(**data)

    def merged(self, overrides: Optional[dict]) -> "ExperimentConfig":
        if not overrides:
            return self
        return ExperimentConfig.from_dict({**self.to_dict(), **overrides})


# The zero-shot preset uses a lower-dimensional, more crowded feature space:
# there a family encoder's decision boundaries are specific enough that an
# unrelated phone inventory does not inherit them.
PRESET_CONFIGS: Dict[str, ExperimentConfig] = {
    "table1": ExperimentConfig(),
    "table2_domains": ExperimentConfig(),
    "table3_rare": ExperimentConfig(),
    "zero_shot": ExperimentConfig(feature_dim=4, noise_std=0.5),
    "warmup_ablation": ExperimentConfig(),
}


# shared stages ------------------------------------------------------------------

_CACHE: Dict[str, object] = {}


def clear_cache() -> None:
    _CACHE.clear()


def _memo(key: dict, build: Callable[[], object]):
    k = json.dumps(key, sort_keys=True)
    if k not in _CACHE:
        _CACHE[k] = build()
    return _CACHE[k]


def _regime_key(cfg: ExperimentConfig) -> dict:
    """Config fields that shape corpora and training (not reporting)."""
    d = cfg.to_dict()
    d.pop("rare_threshold")
    return d


@dataclass
class World:
    """Corpora of one seed: a language family and its splits."""

    languages: List[LanguageSpec]
    domain: DomainSpec
    train: Dict[str, List[Utterance]]
    test: Dict[str, List[Utterance]]
    dev: Dict[str, List[Utterance]]
    targets: List[str]

    @property
    def vocab(self):
        return self.languages[0].vocabulary


def _family(cfg: ExperimentConfig, base_seed: int, n: int, first_index: int = 0, names=None):
    return make_language_family(
        base_seed,
        n,
        cfg.relatedness,
        n_chars=cfg.n_chars,
        feature_dim=cfg.feature_dim,
        lexicon_size=cfg.lexicon_size,
        word_len_range=tuple(cfg.word_len_range),
        zipf_exponent=cfg.zipf_exponent,
        names=names,
        first_index=first_index,
    )


def _splits(cfg, lang, domain, n_train, stream):
    wpu = tuple(cfg.words_per_utt)
    train = synthesize(lang, domain, n_train, stream, wpu)
    test = synthesize(lang, domain, cfg.test_size, stream + 1, wpu)
    dev = synthesize(lang, domain, cfg.dev_size, stream + 2, wpu)
    return train, test, dev


def build_world(cfg: ExperimentConfig, seed: int) -> World:
    def build():
        langs = _family(cfg, seed, cfg.n_high + cfg.n_low)
        domain = DomainSpec(cfg.noise_std, tuple(cfg.duration_range))
        train, test, dev = {}, {}, {}
        for i, lang in enumerate(langs):
            size = cfg.high_size if i < cfg.n_high else cfg.low_size
            train[lang.name], test[lang.name], dev[lang.name] = _splits(cfg, lang, domain, size, 1000 * seed + 10 * i)
        return World(langs, domain, train, test, dev, [lang.name for lang in langs[cfg.n_high :]])

    return _memo({"world": _regime_key(cfg), "seed": seed}, build)


def _model_config(cfg: ExperimentConfig, vocab_size: int, seed: int) -> ModelConfig:
    return ModelConfig(
        feature_dim=cfg.feature_dim,
        encoder_hidden=cfg.encoder_hidden,
        predictor_hidden=cfg.predictor_hidden,
        joiner_hidden=cfg.joiner_hidden,
        vocab_size=vocab_size,
        rng_seed=seed,
    )


def _train_config(cfg: ExperimentConfig, seed: int, vocab_size: int, **kw) -> TrainConfig:
    base = dict(
        batch_size=cfg.batch_size,
        b_left=cfg.b_left,
        b_right=cfg.b_right,
        beam=cfg.beam,
        n_best=cfg.n_best,
        rnnt_weight=cfg.rnnt_weight,
        rng_seed=seed,
        model=_model_config(cfg, vocab_size, seed),
    )
    base.update(kw)
    return TrainConfig(**base)


def _pretrain(cfg, seed, world: World, tag: str, corpora) -> Checkpoint:
    """Multilingual RNNT seed model on ``corpora`` (language -> utterances)."""
    tc = _train_config(cfg, seed, world.vocab.size, schedule=cfg.pretrain_schedule, epochs=cfg.pretrain_epochs)
    dev = [u for name in sorted(corpora) for u in world.dev[name][:20]]
    return _memo(
        {"pretrain": _regime_key(cfg), "seed": seed, "tag": tag},
        lambda: train_rnnt(corpora, tc, dev=dev, stage="pretrain"),
    )


def _mono(cfg, seed, world: World, lang: str, seed_ckpt=None, tag="cold", schedule=None) -> Checkpoint:
    """Monolingual RNNT training, cold or encoder-seeded."""
    tc = _train_config(
        cfg,
        seed,
        world.vocab.size,
        schedule=schedule or cfg.mono_schedule,
        epochs=cfg.mono_epochs,
        transplant="none" if seed_ckpt is None else "encoder_only",
    )
    return _memo(
        {"mono": _regime_key(cfg), "seed": seed, "lang": lang, "tag": tag, "schedule": asdict(tc.schedule)},
        lambda: train_rnnt(world.train[lang], tc, dev=world.dev[lang], seed=seed_ckpt, stage="rnnt"),
    )


def _minwer(cfg, seed, world: World, lang: str, seed_ckpt: Checkpoint, tag: str) -> Checkpoint:
    tc = _train_config(
        cfg, seed, world.vocab.size, loss="minwer", schedule=cfg.minwer_schedule,
        epochs=cfg.minwer_epochs, transplant="full",
    )
    return _memo(
        {"minwer": _regime_key(cfg), "seed": seed, "lang": lang, "tag": tag},
        lambda: finetune_minwer(world.train[lang], tc, seed=seed_ckpt, dev=world.dev[lang], vocab=world.vocab),
    )


def _score(cfg, world: World, ckpt: Checkpoint, lang: str) -> WerReport:
    """Test-set WER with the rare/non-rare split from the target's training counts."""
    rare = classify_rare(word_counts(u.words for u in world.train[lang]), cfg.rare_threshold)
    return evaluate(ckpt.params, world.test[lang], world.vocab, rare, cfg.rare_threshold)


# presets ----------------------------------------------------------------------


TABLE1_ROWS = (
    ("A", "A. Monolingual ASR (baseline)"),
    ("B", "B. Multilingual ASR (seed)"),
    ("C", "C. B seeded monolingual RNNT ASR"),
    ("D", "D. B seeded monolingual MinWER ASR"),
    ("E", "E. C seeded monolingual MinWER ASR"),
)


def _table1_seed(cfg: ExperimentConfig, seed: int) -> dict:
    world = build_world(cfg, seed)
    B = _pretrain(cfg, seed, world, "in", world.train)
    out = {"wer": {}, "reports": {}, "convergence": {}}
    for lang in world.targets:
        A = _mono(cfg, seed, world, lang)
        C = _mono(cfg, seed, world, lang, seed_ckpt=B, tag="in")
        D = _minwer(cfg, seed, world, lang, B, tag="B")
        E = _minwer(cfg, seed, world, lang, C, tag="C")
        for row, ckpt in zip("ABCDE", (A, B, C, D, E)):
            rep = _score(cfg, world, ckpt, lang)
            out["wer"].setdefault(row, {})[lang] = rep.wer
            out["reports"].setdefault(row, {})[lang] = rep.to_dict()
        target = A.trace[-1]["dev_loss"]
        reached = epochs_to_reach(C.trace, target)
        out["convergence"][lang] = {
            "cold_epochs": cfg.mono_epochs,
            "cold_final_dev_loss": target,
            "seeded_epochs_to_reach": reached,
            "ratio": None if reached is None else reached / cfg.mono_epochs,
            "cold_trace": [r["dev_loss"] for r in A.trace],
            "seeded_trace": [r["dev_loss"] for r in C.trace],
        }
    return out


def _ood_corpora(cfg: ExperimentConfig, seed: int, world: World) -> Dict[str, List[Utterance]]:
    """The same languages recorded in a shifted domain, all at ``ood_size``."""

    def build():
        shifted = domain_shift(world.domain, cfg.ood_severity, cfg.feature_dim, seed=seed)
        return {
            lang.name: synthesize(lang, shifted, cfg.ood_size, 1000 * seed + 500 + 10 * i, tuple(cfg.words_per_utt))
            for i, lang in enumerate(world.languages)
        }

    return _memo({"ood": _regime_key(cfg), "seed": seed}, build)


def _domains_seed(cfg: ExperimentConfig, seed: int) -> dict:
    world = build_world(cfg, seed)
    B_in = _pretrain(cfg, seed, world, "in", world.train)
    B_out = _pretrain(cfg, seed, world, "out", _ood_corpora(cfg, seed, world))
    out = {"wer": {}, "reports": {}}
    for lang in world.targets:
        A = _mono(cfg, seed, world, lang)
        C_in = _mono(cfg, seed, world, lang, seed_ckpt=B_in, tag="in")
        C_out = _mono(cfg, seed, world, lang, seed_ckpt=B_out, tag="out")
        E_in = _minwer(cfg, seed, world, lang, C_in, tag="C")
        E_out = _minwer(cfg, seed, world, lang, C_out, tag="C_out")
        for row, ckpt in (("A", A), ("E_in", E_in), ("E_out", E_out), ("B_in", B_in), ("B_out", B_out)):
            rep = _score(cfg, world, ckpt, lang)
            out["wer"].setdefault(row, {})[lang] = rep.wer
            out["reports"].setdefault(row, {})[lang] = rep.to_dict()
    return out


def _zero_shot_seed(cfg: ExperimentConfig, seed: int) -> dict:
    langs = _family(cfg, seed, cfg.n_high)
    domain = DomainSpec(cfg.noise_std, tuple(cfg.duration_range))
    related = _family(cfg, seed, 1, first_index=cfg.n_high + cfg.n_low, names=["related"])[0]
    unrelated = _family(cfg, seed + cfg.unrelated_offset, 1, names=["unrelated"])[0]
    train, test, dev = {}, {}, {}
    for i, lang in enumerate(langs + [related, unrelated]):
        size = cfg.high_size if i < cfg.n_high else cfg.low_size
        train[lang.name], test[lang.name], dev[lang.name] = _splits(cfg, lang, domain, size, 1000 * seed + 10 * i)
    world = World(langs + [related, unrelated], domain, train, test, dev, ["related", "unrelated"])
    B = _pretrain(cfg, seed, world, "zero_shot", {lang.name: train[lang.name] for lang in langs})
    out = {"wer": {}, "reports": {}}
    for lang in ("related", "unrelated"):
        A = _mono(cfg, seed, world, lang, tag="zs-cold")
        C = _mono(cfg, seed, world, lang, seed_ckpt=B, tag="zs-seeded")
        E = _minwer(cfg, seed, world, lang, C, tag="zs-C")
        for row, ckpt in (("A", A), ("E", E)):
            rep = _score(cfg, world, ckpt, lang)
            out["wer"].setdefault(row, {})[lang] = rep.wer
            out["reports"].setdefault(row, {})[lang] = rep.to_dict()
    out["werr"] = {lang: werr(out["wer"]["A"][lang], out["wer"]["E"][lang]) for lang in ("related", "unrelated")}
    return out


def _warmup_seed(cfg: ExperimentConfig, seed: int) -> dict:
    world = build_world(cfg, seed)
    B = _pretrain(cfg, seed, world, "in", world.train)
    zero = replace(cfg.staged_schedule, warmup_steps=0, hold_steps=0)
    out = {"epochs_to_target": {}, "target": {}, "traces": {}, "wer": {}}
    for lang in world.targets:
        A = _mono(cfg, seed, world, lang)
        target = A.trace[-1]["dev_loss"]
        staged = _mono(cfg, seed, world, lang, seed_ckpt=B, tag="staged", schedule=cfg.staged_schedule)
        direct = _mono(cfg, seed, world, lang, seed_ckpt=B, tag="direct", schedule=zero)
        out["target"][lang] = target
        for name, ckpt in (("staged", staged), ("direct", direct)):
            out["epochs_to_target"].setdefault(name, {})[lang] = epochs_to_reach(ckpt.trace, target)
            out["traces"].setdefault(name, {})[lang] = [r["dev_loss"] for r in ckpt.trace]
            out["wer"].setdefault(name, {})[lang] = _score(cfg, world, ckpt, lang).wer
    return out


_RUNNERS = {
    "table1": _table1_seed,
    "table2_domains": _domains_seed,
    "table3_rare": _domains_seed,
    "zero_shot": _zero_shot_seed,
    "warmup_ablation": _warmup_seed,
}


# reporting --------------------------------------------------------------------


def _median_cells(per_seed: List[dict], key: str) -> dict:
    rows = {}
    for res in per_seed:
        for row, cells in res[key].items():
            for lang, v in cells.items():
                rows.setdefault(row, {}).setdefault(lang, []).append(v)
    return {row: {lang: _median(vs) for lang, vs in cells.items()} for row, cells in rows.items()}


def _median(values):
    values = [v for v in values if v is not None]
    return statistics.median(values) if values else None


def _rows(wer: dict, labels, langs) -> List[ReportRow]:
    return [ReportRow(label, [wer[key][lang] for lang in langs]) for key, label in labels]


def _render_tables(preset: str, cfg: ExperimentConfig, summary: dict, langs: List[str], title: str):
    """(layout, rows) pairs for one summary (one seed or the median)."""
    wer = summary["wer"]
    if preset == "table1":
        return [(TableLayout(f"{title}: staged pretraining", langs), _rows(wer, TABLE1_ROWS, langs))]
    if preset == "table2_domains":
        return [
            (TableLayout(f"{title}: in-domain pretraining", langs),
             _rows(wer, (("A", "A. Monolingual ASR (baseline)"), ("E_in", "Seeded monolingual MinWER ASR")), langs)),
            (TableLayout(f"{title}: out-of-domain pretraining", langs),
             _rows(wer, (("A", "A. Monolingual ASR (baseline)"), ("E_out", "Seeded monolingual MinWER ASR")), langs)),
        ]
    if preset == "table3_rare":
        reports = summary["rare"]
        tables = []
        for block, key in (("in-domain", "E_in"), ("out-of-domain", "E_out")):
            cols = [f"rare {lang}" for lang in langs] + [f"non-rare {lang}" for lang in langs]
            rows = []
            for row_key, label in (("A", "A. Monolingual ASR"), (key, "Seeded monolingual MinWER ASR")):
                rows.append(ReportRow(label, [reports[row_key][lang][0] for lang in langs]
                                      + [reports[row_key][lang][1] for lang in langs]))
            tables.append((TableLayout(f"{title}: {block} pretraining, rare vs non-rare (threshold {cfg.rare_threshold})",
                                       cols, average=False, werr=False, werr_per_column=True), rows))
        return tables
    if preset == "zero_shot":
        return [(TableLayout(f"{title}: zero-shot languages", ["related", "unrelated"],
                             average=False, werr=False, werr_per_column=True),
                 _rows(wer, (("A", "Monolingual ASR"), ("E", "Seeded monolingual MinWER ASR")), ["related", "unrelated"]))]
    raise ValueError(preset)


def _warmup_text(title: str, summary: dict, langs: List[str], fmt: str = "text") -> str:
    rows = [["schedule", *langs]]
    for name in ("staged", "direct"):
        epochs = [summary["epochs_to_target"][name][lang] for lang in langs]
        rows.append([name, *("n/a" if e is None else str(e) for e in epochs)])
    if fmt == "tsv":
        return "\n".join([f"# {title}", *("\t".join(r) for r in rows)]) + "\n"
    lines = [f"{r[0]:<8}  " + "  ".join(f"{c:>18}" for c in r[1:]) for r in rows]
    return "\n".join([title, *lines]) + "\n"


def _rare_cells(res: dict) -> dict:
    return {
        row: {lang: (rep["rare_wer"], rep["nonrare_wer"]) for lang, rep in cells.items()}
        for row, cells in res["reports"].items()
    }


def _median_rare(per_seed: List[dict]) -> dict:
    out = {}
    for res in per_seed:
        for row, cells in _rare_cells(res).items():
            for lang, (r, n) in cells.items():
                slot = out.setdefault(row, {}).setdefault(lang, ([], []))
                slot[0].append(r)
                slot[1].append(n)
    return {row: {lang: (_median(r), _median(n)) for lang, (r, n) in cells.items()} for row, cells in out.items()}


@dataclass
class ExperimentResult:
    preset: str
    config: ExperimentConfig
    seeds: List[int]
    per_seed: Dict[int, dict]
    median: dict
    files: Dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "preset": self.preset,
            "config": self.config.to_dict(),
            "seeds": list(self.seeds),
            "per_seed": {str(s): r for s, r in self.per_seed.items()},
            "median": self.median,
        }


def resolve_config(preset: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    if preset not in PRESET_CONFIGS:
        raise ValueError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    return PRESET_CONFIGS[preset].merged(overrides)


def run_experiment(
    preset: str,
    out_dir,
    seeds: Sequence[int] = (0,),
    config: Optional[dict] = None,
) -> ExperimentResult:
    """Run ``preset`` for every seed and write reports into ``out_dir``.

    Files: ``report.txt`` and ``report.tsv`` (one table block per seed plus
    the per-cell median over seeds), ``results.json`` with raw numbers and
    the run manifest.
    """
    cfg = resolve_config(preset, config)
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one seed")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    per_seed = {}
    for s in seeds:
        log.info("preset %s seed %d", preset, s)
        per_seed[s] = _RUNNERS[preset](cfg, s)
    results = list(per_seed.values())

    if preset == "warmup_ablation":
        median = {"epochs_to_target": _median_cells(results, "epochs_to_target"), "wer": _median_cells(results, "wer")}
    else:
        median = {"wer": _median_cells(results, "wer")}
    if preset == "table1":
        median["convergence_ratio"] = {
            lang: _median([r["convergence"][lang]["ratio"] if r["convergence"][lang]["ratio"] is not None else float("inf")
                           for r in results])
            for lang in results[0]["convergence"]
        }
    if preset == "zero_shot":
        median["werr"] = _median_cells([{"werr": {"E": r["werr"]}} for r in results], "werr")["E"]
    if preset == "table3_rare":
        median["rare"] = _median_rare(results)

    langs = sorted(next(iter(median["wer"].values())).keys())
    text, tsv = [], []
    blocks = [(f"seed {s}", per_seed[s]) for s in seeds] + [(f"median over seeds {seeds}", median)]
    for title, summary in blocks:
        if preset == "warmup_ablation":
            heading = f"{title}: epochs to reach the cold-start final dev loss"
            text.append(_warmup_text(heading, summary, langs))
            tsv.append(_warmup_text(heading, summary, langs, "tsv"))
            continue
        if preset == "table3_rare" and "rare" not in summary:
            summary = dict(summary, rare=_rare_cells(summary))
        for layout, rows in _render_tables(preset, cfg, summary, langs, title):
            text.append(emit_report(rows, layout, "text"))
            tsv.append(emit_report(rows, layout, "tsv"))

    result = ExperimentResult(preset, cfg, seeds, per_seed, median)
    files = {
        "report.txt": "\n".join(text),
        "report.tsv": "\n".join(tsv),
        "results.json": json.dumps(result.to_json(), indent=2, sort_keys=True) + "\n",
    }
    for name, body in files.items():
        (out / name).write_text(body, encoding="utf-8")
        result.files[name] = str(out / name)
    write_manifest(
        out,
        "experiment",
        {"preset": preset, "out": str(out_dir), "seeds": seeds, "config": cfg.to_dict()},
        {"outputs": sorted(result.files.values())},
    )
    log.info("preset %s done in %.1fs", preset, time.perf_counter() - started)
    return result


def write_manifest(out_dir, command: str, resolved: dict, extra: Optional[dict] = None, path=None) -> Path:
    """Record everything needed to replay a run; the file is stable JSON.

    Written to ``out_dir/run_manifest.json`` unless ``path`` is given.
    """
    from . import __version__

    body = {"tool": "tlasr", "version": __version__, "command": command, "config": resolved}
    if extra:
        body.update(extra)
    path = Path(path) if path is not None else Path(out_dir) / MANIFEST_NAME
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
