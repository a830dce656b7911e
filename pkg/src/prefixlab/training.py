"""Experiment driver: training loops, evaluation, sweeps, and reports.

A run is (config, corpus splits, seed list). Per seed we train a model,
keep the best-validation checkpoint, and score the test split with beam
search + ROUGE. Reports are written as CSV (deterministic: repr floats,
no timestamps) plus a human-readable summary that carries the wall clock
and parameter accounting. The embedded config echo re-runs to identical
CSVs.
"""

from __future__ import annotations

import configparser
import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import BOS_ID, EOS_ID, Corpus, Vocab, subsample
from .decoding import beam_decode
from .errors import ConfigError, InputError, TrainingDivergedError
from .masks import AttentionDesign, BlockSpec, LayerSchedule
from .model import AttentionPlanner, ModelConfig, PrefixSeq2Seq
from .optim import Adam
from .rouge import score_pair
from .sparsity import NoiseStream, SparsityConfig
from .spectrum import SpectrumReport, band_spectrum, write_pgm

DEFAULT_SEEDS = (13, 42, 2022)


@dataclass(frozen=True)
class TrainConfig:
    """One experiment's knobs; defaults follow the reference hyperparameters."""

    # model
    n_layers_enc: int = 4
    n_layers_dec: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 64
    max_seq_len: int = 64
    # run
    mode: str = "prefixtune"
    design: str = "dense"
    lr: float = 5e-5
    epochs: int = 30
    batch_size: int = 8
    prefix_length: int = 16
    schedule: str = "all"
    # blocking
    enc_segments: int = 2
    dec_segments: int = 1
    lower_band: int = -1  # -1: per-stack default of ceil(7L/12)
    # sparsity
    top_p: float = 0.95
    tau_trunc: float = 1.0
    tau_soft: float = 1.0
    softsa_variant: str = "row_gumbel"
    renormalize_trunc: bool = False
    # decoding / evaluation
    beam: int = 5
    max_decode_len: int = 16
    eval_test: bool = True
    select_by: str = "loss"
    patience: int = 0  # epochs without val improvement before stopping; 0 = off
    # reproducibility / warm start
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    init_checkpoint: str = ""
    prefix_init: str = "activation"  # activation | random

    def __post_init__(self):
        if self.mode not in ("finetune", "prefixtune"):
            raise ConfigError(f"mode must be finetune or prefixtune, got {self.mode!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.beam < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1, beam >= 1 required")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.select_by not in ("loss", "rouge"):
            raise ConfigError("select_by must be loss or rouge")
        if self.prefix_init not in ("activation", "random"):
            raise ConfigError("prefix_init must be activation or random")
        AttentionDesign.parse(self.design)
        LayerSchedule.parse(self.schedule)

    # -- derived pieces -------------------------------------------------------

    def design_enum(self) -> AttentionDesign:
        return AttentionDesign.parse(self.design)

    def block_spec(self) -> BlockSpec:
        band = None if self.lower_band < 0 else self.lower_band
        return BlockSpec(self.enc_segments, self.dec_segments, band)

    def sparsity(self) -> SparsityConfig:
        return SparsityConfig(self.top_p, self.tau_trunc, self.tau_soft,
                              self.renormalize_trunc, self.softsa_variant)

    def layer_schedule(self) -> LayerSchedule:
        return LayerSchedule.parse(self.schedule)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(self.n_layers_enc, self.n_layers_dec, self.n_heads,
                           self.d_model, self.d_ff, vocab_size, self.max_seq_len)

    def effective_prefix_length(self) -> int:
        return self.prefix_length if self.mode == "prefixtune" else 0

    # -- serialization --------------------------------------------------------

    def to_ini(self, path) -> Path:
        parser = configparser.ConfigParser()
        values = {}
        for f in fields(self):
            v = getattr(self, f.name)
            values[f.name] = ",".join(str(s) for s in v) if f.name == "seeds" else str(v)
        parser["run"] = values
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            parser.write(fh)
        return path

    @classmethod
    def from_ini(cls, path, overrides: dict | None = None) -> "TrainConfig":
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        if "run" not in parser:
            raise ConfigError(f"{path}: missing [run] section")
        raw = dict(parser["run"])
        raw.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
        return cls.from_strings(raw)

    @classmethod
    def from_strings(cls, raw: dict) -> "TrainConfig":
        kwargs = {}
        typed = {f.name: f for f in fields(cls)}
        for key, value in raw.items():
            if key not in typed:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, value)
        return cls(**kwargs)


def _coerce(key: str, value):
    if not isinstance(value, str):
        return value
    ftypes = {f.name: f.type for f in fields(TrainConfig)}
    t = ftypes[key]
    if key == "seeds":
        seeds = tuple(int(s) for s in value.replace(" ", "").split(",") if s)
        if not seeds:
            raise ConfigError("seeds must be non-empty")
        return seeds
    if t == "int":
        return int(value)
    if t == "float":
        return float(value)
    if t == "bool":
        low = value.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"bad boolean for {key}: {value!r}")
        return low in ("true", "1", "yes")
    return value


@dataclass
class SeedResult:
    seed: int
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int
    stopped_epoch: int
    test_scores: dict[str, float] | None
    checkpoint_dir: str | None = None


@dataclass
class RunReport:
    config: TrainConfig
    seed_results: list[SeedResult] = field(default_factory=list)
    wall_clock: float = 0.0
    backbone_params: int = 0
    prefix_params: int = 0

    def mean_scores(self) -> dict[str, float] | None:
        scored = [r.test_scores for r in self.seed_results if r.test_scores]
        if not scored:
            return None
        return {k: float(np.mean([s[k] for s in scored])) for k in scored[0]}


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def _shape_key(example) -> tuple:
    return (len(example.source), example.spans, len(example.target))


def _group_arrays(examples):
    """(src, tgt_in, labels, spans) arrays for same-shape examples."""
    src = np.array([e.source for e in examples])
    tgt_in = np.array([(BOS_ID,) + e.target for e in examples])
    labels = np.array([e.target + (EOS_ID,) for e in examples])
    return src, tgt_in, labels, examples[0].spans


def _batch_groups(corpus: Corpus, idx):
    groups: dict[tuple, list] = {}
    for i in idx:
        ex = corpus.examples[i]
        groups.setdefault(_shape_key(ex), []).append(ex)
    return [(_group_arrays(exs), len(exs)) for exs in groups.values()]


def _batch_loss(model, planner, corpus, idx, noise_stream=None, step=0):
    parts = []
    total = 0
    for (src, tgt_in, labels, spans), count in _batch_groups(corpus, idx):
        loss = model.batch_loss(src, tgt_in, labels, planner, spans=spans,
                                noise_stream=noise_stream, step=step)
        parts.append(ad.scale(loss, float(count)))
        total += count
    return ad.scale(parts[0] if len(parts) == 1 else ad.add_n(parts), 1.0 / total)


def evaluate_loss(model, planner, corpus: Corpus, batch_size: int = 32) -> float:
    total = 0.0
    n = len(corpus)
    for lo in range(0, n, batch_size):
        idx = range(lo, min(lo + batch_size, n))
        loss = _batch_loss(model, planner, corpus, idx)
        total += loss.item() * (len(range(lo, min(lo + batch_size, n))))
    return total / n


# ---------------------------------------------------------------------------
# single-seed training
# ---------------------------------------------------------------------------

def build_model(config: TrainConfig, vocab_size: int, seed: int,
                train_corpus: Corpus | None = None) -> PrefixSeq2Seq:
    """Model for one run: fresh init, optional warm start, prefix init."""
    model = PrefixSeq2Seq(config.model_config(vocab_size),
                          prefix_length=config.effective_prefix_length(),
                          schedule=config.layer_schedule(), seed=seed)
    if config.init_checkpoint:
        source, _ = load_checkpoint(config.init_checkpoint)
        shared = set(source.params) & set(model.params)
        for name in shared:
            if source.params[name].shape == model.params[name].shape:
                model.params[name].data = source.params[name].data.copy()
    if model.bank.prefix_length > 0 and config.prefix_init == "activation" \
            and train_corpus is not None and len(train_corpus) > 0:
        planner = AttentionPlanner(config.design_enum(), config.block_spec(),
                                   config.sparsity(), model.config,
                                   model.bank, "eval")
        probe = train_corpus.examples[: min(8, len(train_corpus))]
        src, tgt_in, _, spans = _group_arrays(list(probe))
        model.init_prefixes_from_activations(src, tgt_in, planner,
                                             np.random.default_rng(seed),
                                             spans=spans)
    model.set_mode(config.mode)
    return model


def decode_and_score(model, planner, corpus: Corpus, beam: int,
                     max_len: int) -> tuple[dict[str, float], list[dict]]:
    if len(corpus) == 0:
        raise InputError("empty evaluation corpus")
    rows = []
    totals = {"rouge1": 0.0, "rouge2": 0.0, "rougeL": 0.0}
    for i, ex in enumerate(corpus.examples):
        decoded = beam_decode(model, np.array(ex.source), planner, BOS_ID,
                              EOS_ID, max_len, beam, ex.spans)
        scores = score_pair(decoded, list(ex.target))
        row = {"example": i,
               "decoded": " ".join(corpus.vocab.token_of(t) for t in decoded),
               "reference": corpus.vocab.decode(ex.target)}
        for name, sc in scores.items():
            row[name] = sc.f1
            totals[name] += sc.f1
        rows.append(row)
    means = {k: v / len(corpus) for k, v in totals.items()}
    return means, rows


def train_single(config: TrainConfig, splits: dict[str, Corpus], seed: int,
                 workdir: Path | None = None) -> SeedResult:
    train_corpus = splits["train"]
    val_corpus = splits.get("val")
    test_corpus = splits.get("test")
    vocab_size = len(train_corpus.vocab)
    model = build_model(config, vocab_size, seed, train_corpus)
    design = config.design_enum()
    planner_train = AttentionPlanner(design, config.block_spec(),
                                     config.sparsity(), model.config,
                                     model.bank, "train")
    planner_eval = AttentionPlanner(design, config.block_spec(),
                                    config.sparsity(), model.config,
                                    model.bank, "eval")
    noise_stream = NoiseStream(seed)
    optimizer = Adam(model.trainable_parameters(), lr=config.lr)
    shuffle_rng = np.random.default_rng(seed)

    def val_metric() -> float:
        if val_corpus is None or len(val_corpus) == 0:
            return math.nan
        if config.select_by == "rouge":
            means, _ = decode_and_score(model, planner_eval, val_corpus,
                                        config.beam, config.max_decode_len)
            return -means["rougeL"]  # lower is better, like a loss
        return evaluate_loss(model, planner_eval, val_corpus)

    n = len(train_corpus)
    train_losses: list[float] = []
    val_losses: list[float] = []
    best = (math.inf, 0, {k: t.data.copy() for k, t in model.params.items()})
    step = 0
    stopped_epoch = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo: lo + config.batch_size]
            with ad.Tape() as tape:
                loss = _batch_loss(model, planner_train, train_corpus, idx,
                                   noise_stream, step)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError("non-finite training loss", step)
            tape.backward(loss)
            optimizer.step()
            epoch_loss += value * len(idx)
            step += 1
        train_losses.append(epoch_loss / n)
        current = val_metric()
        val_losses.append(current)
        stopped_epoch = epoch
        if not math.isnan(current) and current < best[0]:
            best = (current, epoch,
                    {k: t.data.copy() for k, t in model.params.items()})
        if config.patience and epoch - best[1] >= config.patience:
            break

    if config.epochs > 0 and not math.isnan(best[0]):
        for name, data in best[2].items():
            model.params[name].data = data
    best_epoch = best[1]

    test_scores = None
    if config.eval_test and test_corpus is not None and len(test_corpus) > 0:
        test_scores, _ = decode_and_score(model, planner_eval, test_corpus,
                                          config.beam, config.max_decode_len)

    checkpoint_dir = None
    if workdir is not None:
        workdir = Path(workdir)
        ckpt = workdir / f"checkpoint-seed{seed}"
        save_checkpoint(ckpt, model, extra={"train_config": asdict(config),
                                            "seed": seed,
                                            "best_epoch": best_epoch})
        train_corpus.vocab.save(ckpt / "vocab.txt")
        checkpoint_dir = str(ckpt)
    return SeedResult(seed, train_losses, val_losses, best_epoch,
                      stopped_epoch, test_scores, checkpoint_dir)


# ---------------------------------------------------------------------------
# multi-seed runs and reports
# ---------------------------------------------------------------------------

def run_train(config: TrainConfig, splits: dict[str, Corpus],
              workdir: Path | None = None) -> RunReport:
    start = time.perf_counter()
    report = RunReport(config=config)
    for seed in config.seeds:
        report.seed_results.append(train_single(config, splits, seed, workdir))
    report.wall_clock = time.perf_counter() - start
    probe = build_model(replace(config, init_checkpoint=""),
                        len(splits["train"].vocab), config.seeds[0])
    part = probe.partition()
    report.backbone_params = sum(probe.params[p].size for p in part.backbone)
    report.prefix_params = sum(probe.params[p].size for p in part.prefixes)
    if workdir is not None:
        write_run_report(report, Path(workdir))
    return report


def _write_csv(path: Path, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in row.items()})


def write_run_report(report: RunReport, outdir: Path) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    loss_rows = []
    for res in report.seed_results:
        for epoch, (tr, va) in enumerate(zip(res.train_losses, res.val_losses),
                                         start=1):
            loss_rows.append({"seed": res.seed, "epoch": epoch,
                              "train_loss": tr, "val_loss": va})
    _write_csv(outdir / "losses.csv",
               ["seed", "epoch", "train_loss", "val_loss"], loss_rows)

    rouge_rows = []
    for res in report.seed_results:
        if res.test_scores:
            rouge_rows.append({"seed": res.seed, **res.test_scores})
    mean = report.mean_scores()
    if mean:
        rouge_rows.append({"seed": "mean", **mean})
    _write_csv(outdir / "rouge.csv", ["seed", "rouge1", "rouge2", "rougeL"],
               rouge_rows)

    report.config.to_ini(outdir / "config_echo.ini")
    analytic = analytic_prefix_count(report.config)
    with open(outdir / "summary.txt", "w", encoding="utf-8") as fh:
        fh.write(f"mode={report.config.mode} design={report.config.design}\n")
        fh.write(f"backbone parameters: {report.backbone_params}\n")
        fh.write(f"prefix parameters:   {report.prefix_params} "
                 f"(analytic {analytic})\n")
        for res in report.seed_results:
            line = (f"seed {res.seed}: best epoch {res.best_epoch}"
                    f"/{res.stopped_epoch}")
            if res.test_scores:
                line += (f", test R1/R2/RL = {res.test_scores['rouge1']:.4f}/"
                         f"{res.test_scores['rouge2']:.4f}/"
                         f"{res.test_scores['rougeL']:.4f}")
            fh.write(line + "\n")
        if mean:
            fh.write(f"mean test R1/R2/RL = {mean['rouge1']:.4f}/"
                     f"{mean['rouge2']:.4f}/{mean['rougeL']:.4f}\n")
        fh.write(f"wall clock: {report.wall_clock:.2f} s\n")


def analytic_prefix_count(config: TrainConfig) -> int:
    """Sum over prefixed attention sites of 2 * P_l * d_model."""
    if config.effective_prefix_length() == 0:
        return 0
    schedule = config.layer_schedule()
    total = 0
    for depth in (config.n_layers_enc, config.n_layers_dec, config.n_layers_dec):
        total += sum(2 * config.prefix_length * config.d_model
                     for sel in schedule.selected(depth) if sel)
    return total


# ---------------------------------------------------------------------------
# evaluation / diagnostics entry points
# ---------------------------------------------------------------------------

def _planner_from_manifest(model: PrefixSeq2Seq, manifest: dict,
                           phase: str) -> tuple[AttentionPlanner, TrainConfig]:
    raw = manifest.get("extra", {}).get("train_config")
    config = TrainConfig(**{**raw, "seeds": tuple(raw["seeds"])}) if raw \
        else TrainConfig()
    planner = AttentionPlanner(config.design_enum(), config.block_spec(),
                               config.sparsity(), model.config, model.bank,
                               phase)
    return planner, config


def load_for_eval(checkpoint_dir) -> tuple[PrefixSeq2Seq, AttentionPlanner,
                                           TrainConfig, Vocab | None]:
    model, manifest = load_checkpoint(checkpoint_dir)
    planner, config = _planner_from_manifest(model, manifest, "eval")
    vocab_path = Path(checkpoint_dir) / "vocab.txt"
    vocab = Vocab.load(vocab_path) if vocab_path.exists() else None
    return model, planner, config, vocab


def run_eval(checkpoint_dir, corpus: Corpus, beam: int | None = None,
             outdir: Path | None = None,
             max_decode_len: int | None = None) -> dict[str, float]:
    model, planner, config, _ = load_for_eval(checkpoint_dir)
    if len(corpus) and max(max(e.source) for e in corpus) >= model.config.vocab_size:
        raise InputError("corpus vocabulary exceeds the checkpoint's vocab size")
    means, rows = decode_and_score(model, planner, corpus,
                                   beam or config.beam,
                                   max_decode_len or config.max_decode_len)
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        _write_csv(outdir / "per_example.csv",
                   ["example", "decoded", "reference", "rouge1", "rouge2",
                    "rougeL"], rows)
        _write_csv(outdir / "rouge.csv", ["rouge1", "rouge2", "rougeL"],
                   [means])
    return means


def run_lowresource(config: TrainConfig, splits: dict[str, Corpus],
                    ks=(5, 10, 25, 50),
                    workdir: Path | None = None) -> list[dict]:
    """Train one model per (k%, seed) subsample; emit the sweep table."""
    rows = []
    for k in ks:
        for seed in config.seeds:
            sub = {**splits, "train": subsample(splits["train"], k, seed)}
            single = replace(config, seeds=(seed,))
            result = train_single(single, sub, seed, workdir=None)
            rows.append({"k": k, "seed": seed, "n_train": len(sub["train"]),
                         **(result.test_scores or {})})
    if workdir is not None:
        workdir = Path(workdir)
        workdir.mkdir(parents=True, exist_ok=True)
        _write_csv(workdir / "sweep.csv",
                   ["k", "seed", "n_train", "rouge1", "rouge2", "rougeL"], rows)
        curve = []
        for k in ks:
            vals = [r["rougeL"] for r in rows if r["k"] == k and "rougeL" in r]
            curve.append({"k": k, "mean_rougeL": float(np.mean(vals))})
        _write_csv(workdir / "curve.csv", ["k", "mean_rougeL"], curve)
    return rows


def collect_encoder_attention(model: PrefixSeq2Seq, planner: AttentionPlanner,
                              corpus: Corpus,
                              n_examples: int) -> list[list[np.ndarray]]:
    """Per-layer lists of per-example [H, T, P+T] encoder attention matrices."""
    if len(corpus) == 0:
        raise InputError("empty corpus")
    per_layer: list[list[np.ndarray]] = [[] for _ in range(model.config.n_layers_enc)]
    for ex in corpus.examples[: n_examples]:
        _, maps = model.encode(np.array(ex.source)[None, :], planner,
                               spans=ex.spans, collect_attn=True)
        for layer, attn in enumerate(maps):
            per_layer[layer].append(attn[0])
    return per_layer


def run_spectrum(checkpoint_dir, corpus: Corpus, n_examples: int = 200,
                 outdir: Path | None = None, prefix_slice: bool = True,
                 lower_band: int | None = None) -> SpectrumReport:
    model, planner, config, _ = load_for_eval(checkpoint_dir)
    lengths = model.bank.lengths["enc"]
    if prefix_slice and min(lengths) <= 0:
        raise ConfigError("prefix-slice spectrum needs prefixes on every "
                          "encoder layer")
    band = lower_band if lower_band is not None \
        else config.block_spec().band(model.config.n_layers_enc)
    per_layer = collect_encoder_attention(model, planner, corpus, n_examples)
    report = band_spectrum(per_layer, band, min(lengths) if prefix_slice else 0,
                           prefix_slice=prefix_slice)
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        bands = sorted(report.curves)
        _write_csv(outdir / "spectrum.csv", ["k"] + bands, report.to_csv_rows())
        with open(outdir / "auc.txt", "w", encoding="utf-8") as fh:
            for band_name in bands:
                fh.write(f"{band_name}: auc={report.auc[band_name]!r} "
                         f"samples={report.sample_counts[band_name]}\n")
    return report


def run_attn_dump(checkpoint_dir, corpus: Corpus, example_index: int = 0,
                  outdir: Path | None = None) -> list[np.ndarray]:
    """Head-averaged encoder attention heatmaps plus the layer mask dump."""
    model, planner, config, _ = load_for_eval(checkpoint_dir)
    if not 0 <= example_index < len(corpus):
        raise InputError(f"example index {example_index} out of range")
    ex = corpus.examples[example_index]
    _, maps = model.encode(np.array(ex.source)[None, :], planner,
                           spans=ex.spans, collect_attn=True)
    averaged = [attn[0].mean(axis=0) for attn in maps]
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        for layer, mat in enumerate(averaged):
            write_pgm(outdir / f"attention-layer{layer + 1}.pgm", mat)
            transform = planner.encoder_transform(layer, len(ex.source), ex.spans)
            np.savetxt(outdir / f"mask-layer{layer + 1}.csv",
                       transform.mask, delimiter=",", fmt="%d")
    return averaged
