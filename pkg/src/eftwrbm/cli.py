"""Command-line entry point: synth, train, detect, eval and gradcheck.

Configuration comes from an optional ``key=value`` file (``--config``) with
command-line flags taking precedence.  Every run writes the fully resolved
configuration to ``config.txt`` in its output directory.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import frontend as fe
from .inference import estimate_spp, integrate_1d
from .model import PARAM_NAMES, FactorModel, ShapeError, load_model, save_model
from .training import DivergenceError, TrainConfig, energy_gradients, run_gradcheck, train

log = logging.getLogger("eftwrbm")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_VERIFY = 0, 2, 3, 4

MANIFEST_COLUMNS = ("utterance_id", "clean_path", "noise_kind", "snr_db", "label_path",
                    "noisy_path", "measured_snr_db", "split")
MODEL_FILE = "model.eftw"
STATS_FILE = "stats.spec"
# keeps written mixtures inside the 16-bit range; applied to clean and noise alike
PEAK_LEVEL = 0.9


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # training
    epochs: int = 40
    learning_rate: float = 0.001
    cd_steps: int = 1
    barrier_beta: float = 0.5
    momentum: float = 0.1
    momentum_cutoff_epoch: int | None = None  # None: half of epochs
    minibatch_frames: int = 32
    seed: int = 0
    enhanced: bool = True
    init_biases: bool = True
    # model shape
    n_hidden: int = 30
    n_factors: int = 60
    n_t: int = 6
    # synthetic corpus
    n_train: int = 20
    n_test: int = 5
    utterance_seconds: float = 3.0
    f0_min: float = 100.0
    f0_max: float = 250.0
    n_harmonics: int = 12
    burst_min: float = 0.25
    burst_max: float = 0.7
    gap_min: float = 0.15
    gap_max: float = 0.5
    speech_probability: float = 1.0
    noise: list = field(default_factory=lambda: ["white"])
    snr: list = field(default_factory=lambda: [5.0])
    # paths
    corpus_dir: str = ""
    model_path: str = ""
    input_wav: str = ""
    out_dir: str = "out"
    # subcommand parameters
    spp_csv: bool = False
    variants: list = field(default_factory=lambda: ["EFTW-RBM", "FTW-RBM", "untrained", "oracle"])
    gradcheck_trials: int = 200
    gradcheck_tol: float = 1e-6
    gradcheck_fault: str = ""  # test fixture: name of a gradient block to corrupt

    def validate(self):
        try:
            self.train_config()
            self.corpus_spec(self.noise[0], self.snr[0])
        except (ValueError, IndexError) as exc:
            raise ConfigError(str(exc)) from None
        for kind in self.noise:
            if kind not in fe.NOISE_KINDS:
                raise ConfigError(f"unknown noise kind {kind!r}; choose from {fe.NOISE_KINDS}")
        for name in ("n_hidden", "n_factors", "n_t", "gradcheck_trials"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("n_train and n_test must be non-negative")
        unknown = set(self.variants) - set(VARIANT_NAMES)
        if unknown:
            raise ConfigError(f"unknown variants {sorted(unknown)}; choose from {VARIANT_NAMES}")
        return self

    def train_config(self) -> TrainConfig:
        cutoff = self.epochs // 2 if self.momentum_cutoff_epoch is None else self.momentum_cutoff_epoch
        return TrainConfig(
            epochs=self.epochs, learning_rate=self.learning_rate, cd_steps=self.cd_steps,
            barrier_beta=self.barrier_beta, momentum=self.momentum,
            momentum_cutoff_epoch=cutoff, minibatch_frames=self.minibatch_frames,
            seed=self.seed, enhanced=self.enhanced, init_biases=self.init_biases)

    def corpus_spec(self, noise_kind, snr_db) -> fe.SyntheticCorpusSpec:
        return fe.SyntheticCorpusSpec(
            n_utterances=self.n_train + self.n_test, utterance_seconds=self.utterance_seconds,
            f0_range=(self.f0_min, self.f0_max), n_harmonics=self.n_harmonics,
            burst_seconds=(self.burst_min, self.burst_max),
            gap_seconds=(self.gap_min, self.gap_max),
            speech_probability=self.speech_probability, noise_kind=noise_kind,
            snr_db=float(snr_db), seed=self.seed)

    def echo(self):
        """Resolved configuration as ``key=value`` lines (sorted by field order)."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "momentum_cutoff_epoch" and value is None:
                value = self.epochs // 2
            lines.append(f"{f.name}={format_value(value)}")
        return "\n".join(lines) + "\n"


VARIANT_NAMES = ("EFTW-RBM", "FTW-RBM", "untrained", "oracle")


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_value(name, text):
    """Convert a config string using the type of the matching RunConfig field."""
    default = RunConfig()
    if not hasattr(default, name):
        raise ConfigError(f"unknown configuration key {name!r}")
    current = getattr(default, name)
    text = text.strip()
    try:
        if name == "momentum_cutoff_epoch":
            return None if text.lower() in ("", "none") else int(text)
        if name == "snr":
            return [float(v) for v in text.split(",") if v.strip()]
        if isinstance(current, list):
            return [v.strip() for v in text.split(",") if v.strip()]
        if isinstance(current, bool):
            return _parse_bool(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {exc}") from None
    return text


def read_config_file(path):
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = parse_value(key.strip(), value)
    return values


FLAG_KEYS = {
    "seed": "seed", "snr": "snr", "noise": "noise", "epochs": "epochs", "beta": "barrier_beta",
    "hidden": "n_hidden", "factors": "n_factors", "context": "n_t", "out": "out_dir",
}


def resolve_config(args) -> RunConfig:
    values = read_config_file(args.config) if args.config else {}
    for flag, key in FLAG_KEYS.items():
        raw = getattr(args, flag)
        if raw is not None:
            values[key] = parse_value(key, raw)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = parse_value(key.strip(), value)
    return replace(RunConfig(), **values).validate()


def _prepare_out(cfg):
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.echo())
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# synth


def _scaled(wav, gain):
    return fe.Waveform(wav.samples * gain, wav.sample_rate)


def cmd_synth(cfg: RunConfig):
    """Write clean/noisy WAVs, frame labels and a manifest under ``out_dir``."""
    out = _prepare_out(cfg)
    rows = []
    for kind in cfg.noise:
        utts = fe.generate_corpus(cfg.corpus_spec(kind, cfg.snr[0]))
        for i, utt in enumerate(utts):
            uid = f"utt{i:03d}"
            split = "train" if i < cfg.n_train else "test"
            clean_rel, label_rel = f"clean/{uid}.wav", f"labels/{uid}.csv"
            mixes = [(snr, fe.noisy_mixture(utt, snr)) for snr in cfg.snr]
            # one gain per utterance across all SNRs, so the clean file is shared
            peak = max(np.max(np.abs(m.samples)) for _, m in mixes)
            gain = min(1.0, PEAK_LEVEL / peak) if peak > 0 else 1.0
            for sub in ("clean", "labels", "noisy"):
                (out / sub).mkdir(exist_ok=True)
            fe.save_wav(out / clean_rel, _scaled(utt.clean, gain))
            _write_labels(out / label_rel, utt.labels)
            for snr, mix in mixes:
                noisy_rel = f"noisy/{kind}_{format_value(float(snr))}dB_{uid}.wav"
                fe.save_wav(out / noisy_rel, _scaled(mix, gain))
                measured = fe.measured_snr(utt.clean, mix) if np.any(utt.clean.samples) else float("nan")
                rows.append({
                    "utterance_id": uid, "clean_path": clean_rel, "noise_kind": kind,
                    "snr_db": format_value(float(snr)), "label_path": label_rel,
                    "noisy_path": noisy_rel, "measured_snr_db": repr(float(measured)),
                    "split": split,
                })
    write_manifest(out / "manifest.csv", rows)
    log.info("wrote %d manifest rows to %s", len(rows), out)
    return EXIT_OK


def _write_labels(path, labels):
    times = (np.arange(len(labels)) * fe.HOP + fe.WINDOW / 2) / fe.SAMPLE_RATE
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame", "time_s", "label"])
        for i, (t, lab) in enumerate(zip(times, labels)):
            writer.writerow([i, repr(float(t)), int(lab)])


def read_labels(path):
    with open(path, newline="") as fh:
        return np.array([int(r["label"]) for r in csv.DictReader(fh)], dtype=np.int8)


def write_manifest(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_manifest(corpus_dir):
    path = Path(corpus_dir) / "manifest.csv"
    if not path.is_file():
        raise ConfigError(f"no manifest.csv in {corpus_dir}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _select(rows, cfg, split):
    snr = format_value(float(cfg.snr[0]))
    return [r for r in rows if r["split"] == split and r["noise_kind"] == cfg.noise[0]
            and r["snr_db"] == snr]


def _load_mag(path):
    return fe.stft_magnitude(fe.resample(fe.load_wav(path)))


# ---------------------------------------------------------------------------
# train


def training_data(cfg: RunConfig):
    """(noisy, clean) magnitude pairs from ``corpus_dir`` or the in-memory generator."""
    if cfg.corpus_dir:
        root = Path(cfg.corpus_dir)
        rows = _select(read_manifest(root), cfg, "train")
        if not rows:
            raise ConfigError(f"no training rows for noise={cfg.noise[0]} snr={cfg.snr[0]} in {root}")
        return [(_load_mag(root / r["noisy_path"]), _load_mag(root / r["clean_path"])) for r in rows]
    spec = replace(cfg.corpus_spec(cfg.noise[0], cfg.snr[0]), n_utterances=cfg.n_train)
    return [(fe.stft_magnitude(fe.noisy_mixture(u, cfg.snr[0])), fe.stft_magnitude(u.clean))
            for u in fe.generate_corpus(spec)]


def cmd_train(cfg: RunConfig):
    out = _prepare_out(cfg)
    pairs = training_data(cfg)
    if not pairs:
        raise ConfigError("training needs at least one utterance (n_train >= 1)")
    stats = fe.compute_stats([noisy for noisy, _ in pairs])
    corpus = [(fe.standardize(noisy, stats), fe.standardize(clean, stats)) for noisy, clean in pairs]
    model = FactorModel.for_spectrogram(fe.N_BINS, cfg.n_t, cfg.n_hidden, cfg.n_factors, rng=cfg.seed)
    state = train(model, corpus, cfg.train_config())
    model_path = Path(cfg.model_path) if cfg.model_path else out / MODEL_FILE
    save_model(model, model_path)
    save_stats(model_path.with_name(STATS_FILE), stats)
    state.write_log(out / "train_log.csv")
    log.info("saved %s", model_path)
    return EXIT_OK


def save_stats(path, stats):
    Path(path).write_bytes(fe.spectrogram_to_bytes(np.zeros((stats.mean.size, 0)), stats))


def load_stats(path):
    _, stats = fe.spectrogram_from_bytes(Path(path).read_bytes())
    if stats is None:
        raise ConfigError(f"{path} holds no standardization statistics")
    return stats


# ---------------------------------------------------------------------------
# detect


def _model_and_stats(cfg):
    model_path = Path(cfg.model_path) if cfg.model_path else Path(cfg.out_dir) / MODEL_FILE
    stats_path = model_path.with_name(STATS_FILE)
    if not model_path.is_file() or not stats_path.is_file():
        raise ConfigError(f"missing model or statistics next to {model_path}")
    try:
        return load_model(model_path), load_stats(stats_path)
    except (ValueError, ShapeError) as exc:
        raise ConfigError(f"cannot load model: {exc}") from None


def cmd_detect(cfg: RunConfig):
    """SPP matrix (binary, optional CSV) and 1D curve CSV for each input."""
    out = _prepare_out(cfg)
    model, stats = _model_and_stats(cfg)
    if cfg.input_wav:
        jobs = [(Path(cfg.input_wav).stem, Path(cfg.input_wav))]
    elif cfg.corpus_dir:
        root = Path(cfg.corpus_dir)
        rows = _select(read_manifest(root), cfg, "test")
        jobs = [(r["utterance_id"], root / r["noisy_path"]) for r in rows]
    else:
        raise ConfigError("detect needs input_wav or corpus_dir")
    (out / "spp").mkdir(exist_ok=True)
    for name, path in jobs:
        spec = fe.standardize(_load_mag(path), stats)
        spp = estimate_spp(model, spec, enhanced=cfg.enhanced)
        (out / "spp" / f"{name}.spp").write_bytes(
            fe.spectrogram_to_bytes(spp.values, magic=fe.SPP_MAGIC))
        if cfg.spp_csv:
            np.savetxt(out / "spp" / f"{name}_spp.csv", spp.values, delimiter=",", fmt="%.9g")
        scores = integrate_1d(spp)
        with open(out / "spp" / f"{name}_curve.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["time_s", "score"])
            for t, s in zip(spp.frame_times, scores):
                writer.writerow([repr(float(t)), repr(float(s))])
    log.info("wrote SPP for %d inputs to %s", len(jobs), out / "spp")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def variants_for(cfg):
    tc = cfg.train_config()
    shape = dict(n_hidden=cfg.n_hidden, n_factors=cfg.n_factors, n_t=cfg.n_t, train_config=tc)
    table = {
        "EFTW-RBM": ev.Variant("EFTW-RBM", enhanced=True, **shape),
        "FTW-RBM": ev.Variant("FTW-RBM", enhanced=False, **shape),
        "untrained": ev.Variant("untrained", trained=False, **shape),
        "oracle": ev.Variant("oracle", oracle=True, **shape),
    }
    return [table[name] for name in cfg.variants]


def cmd_eval(cfg: RunConfig):
    out = _prepare_out(cfg)
    report = ev.run_benchmark(variants_for(cfg), cfg.corpus_spec(cfg.noise[0], cfg.snr[0]),
                              snr_list=cfg.snr, noise_kinds=cfg.noise,
                              n_train=cfg.n_train, n_test=cfg.n_test)
    for metric in ("auc", "sdr"):
        (out / f"{metric}.csv").write_text(ev.report_to_csv(report, metric))
    tables = "AUC (1D detection)\n" + ev.format_table(report, "auc") + "\n\n" \
        + "SDR (2D SPP)\n" + ev.format_table(report, "sdr") + "\n"
    (out / "tables.txt").write_text(tables)
    (out / "detail.jsonl").write_text(ev.detail_jsonl(report))
    print(tables, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(cfg: RunConfig):
    out = _prepare_out(cfg)
    gradient_fn = faulty_gradients(cfg.gradcheck_fault) if cfg.gradcheck_fault else energy_gradients
    passed, worst = run_gradcheck(cfg.gradcheck_trials, cfg.seed, cfg.gradcheck_tol,
                                  gradient_fn=gradient_fn)
    report = {"passed": passed, "tolerance": cfg.gradcheck_tol, "trials": cfg.gradcheck_trials,
              "worst_relative_error": worst,
              "failed_blocks": [n for n, e in worst.items() if not e < cfg.gradcheck_tol]}
    (out / "gradcheck.json").write_text(json.dumps(report, indent=2) + "\n")
    for name, err in worst.items():
        status = "ok" if err < cfg.gradcheck_tol else "FAIL"
        print(f"{name:10s} {err:.3e} {status}")
    return EXIT_OK if passed else EXIT_VERIFY


def faulty_gradients(block):
    """Analytic gradients with the sign of one block flipped (fault injection)."""
    if block not in PARAM_NAMES:
        raise ConfigError(f"unknown gradient block {block!r}")

    def fn(model, state):
        grads = energy_gradients(model, state)
        setattr(grads, block, -getattr(grads, block))
        return grads

    return fn


# ---------------------------------------------------------------------------

COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "detect": cmd_detect,
    "eval": cmd_eval, "gradcheck": cmd_gradcheck,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="eftwrbm", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", metavar="PATH", help="key=value configuration file")
    parser.add_argument("--seed", metavar="N")
    parser.add_argument("--snr", metavar="LIST", help="comma-separated SNRs in dB")
    parser.add_argument("--noise", metavar="LIST", help="comma-separated noise kinds")
    parser.add_argument("--epochs", metavar="N")
    parser.add_argument("--beta", metavar="X", help="non-negativity barrier strength")
    parser.add_argument("--hidden", metavar="K")
    parser.add_argument("--factors", metavar="F")
    parser.add_argument("--context", metavar="NT", help="number of retained context frames")
    parser.add_argument("--out", metavar="DIR")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any configuration key (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
