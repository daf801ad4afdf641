"""Detection metrics (ROC/AUC, SDR) and the benchmark runner."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import rankdata

from . import frontend as fe
from .inference import estimate_spp, integrate_1d, ratio_mask
from .model import FactorModel
from .training import TrainConfig, train

log = logging.getLogger(__name__)


@dataclass
class RocResult:
    thresholds: np.ndarray
    hit_rates: np.ndarray
    false_alarm_rates: np.ndarray
    auc: float


@dataclass
class SdrResult:
    sdr: float
    per_utterance: list = field(default_factory=list)


def _check_labels(labels):
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise ValueError("ROC needs at least one positive and one negative label")
    return labels


def mann_whitney_auc(scores, labels):
    """Rank-sum AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_labels(labels)
    ranks = rankdata(scores)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc(scores, labels) -> RocResult:
    """ROC sweep over the unique scores (descending) and the exact AUC."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_labels(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    thresholds = np.unique(scores)[::-1]
    decided = scores[None, :] >= thresholds[:, None]
    hits = np.concatenate([[0.0], decided[:, labels].mean(axis=1)])
    fas = np.concatenate([[0.0], decided[:, ~labels].mean(axis=1)])
    thresholds = np.concatenate([[np.inf], thresholds])
    return RocResult(thresholds, hits, fas, mann_whitney_auc(scores, labels))


def sdr(noisy_mag, spp, clean_mag) -> float:
    """Squared error of the masked noisy magnitude against the clean one,
    relative to the clean energy (lower is better; 1 for an all-zero mask)."""
    Y = np.asarray(getattr(noisy_mag, "values", noisy_mag), dtype=np.float64)
    P = np.asarray(getattr(spp, "values", spp), dtype=np.float64)
    S = np.asarray(getattr(clean_mag, "values", clean_mag), dtype=np.float64)
    if not Y.shape == P.shape == S.shape:
        raise ValueError(f"shape mismatch: Y {Y.shape}, P {P.shape}, S {S.shape}")
    denom = np.sum(S ** 2)
    if denom == 0:
        raise ValueError("clean spectrogram is identically zero")
    return float(np.sum((Y * P - S) ** 2) / denom)


def mean_sdr(triples) -> SdrResult:
    values = [sdr(y, p, s) for y, p, s in triples]
    return SdrResult(float(np.mean(values)), values)


# ---------------------------------------------------------------------------
# Benchmark


@dataclass
class Variant:
    """A model configuration evaluated by the benchmark.

    ``trained=False`` evaluates the freshly initialized model.  ``oracle``
    skips the model and uses the ideal ratio mask clamp(S / Y).
    """

    name: str
    enhanced: bool = True
    trained: bool = True
    n_hidden: int = 30
    n_factors: int = 60
    n_t: int = 6
    train_config: TrainConfig = field(default_factory=TrainConfig)
    oracle: bool = False


DEFAULT_VARIANTS = (
    Variant("EFTW-RBM"),
    Variant("FTW-RBM", enhanced=False),
)


@dataclass
class PreparedData:
    train: list  # standardized noisy spectrograms
    train_clean: list  # clean spectrograms standardized with the same statistics
    test: list  # standardized noisy spectrograms
    test_noisy_mag: list
    test_clean_mag: list
    test_labels: list
    stats: fe.StandardizationStats

    def training_pairs(self):
        """(noisy, clean) pairs: the model conditions on the mixture and
        reconstructs the clean frame."""
        return list(zip(self.train, self.train_clean))


def prepare_data(corpus_spec: fe.SyntheticCorpusSpec, n_train, n_test) -> PreparedData:
    """Synthesize train/test mixtures and standardize with training statistics."""
    spec = replace(corpus_spec, n_utterances=n_train + n_test)
    utts = fe.generate_corpus(spec)
    noisy_mags, clean_mags = [], []
    for u in utts:
        noisy_mags.append(fe.stft_magnitude(fe.noisy_mixture(u, spec.snr_db)))
        clean_mags.append(fe.stft_magnitude(u.clean))
    stats = fe.compute_stats(noisy_mags[:n_train])
    standardized = [fe.standardize(m, stats) for m in noisy_mags]
    labels = [u.labels[:m.n_frames] for u, m in zip(utts, noisy_mags)]
    return PreparedData(
        train=standardized[:n_train],
        train_clean=[fe.standardize(m, stats) for m in clean_mags[:n_train]],
        test=standardized[n_train:],
        test_noisy_mag=[m.values for m in noisy_mags[n_train:]],
        test_clean_mag=[m.values for m in clean_mags[n_train:]],
        test_labels=labels[n_train:],
        stats=stats,
    )


def build_model(variant: Variant, data: PreparedData, n_bins=fe.N_BINS):
    cfg = replace(variant.train_config, enhanced=variant.enhanced)
    model = FactorModel.for_spectrogram(n_bins, variant.n_t, variant.n_hidden,
                                        variant.n_factors, rng=cfg.seed)
    history = None
    if variant.trained:
        history = train(model, data.training_pairs(), cfg).history
    return model, history


def evaluate_model(model, data: PreparedData, enhanced=True):
    """Mean AUC (utterances with both classes) and mean SDR over the test set."""
    aucs, sdrs, details = [], [], []
    for spec, y_mag, s_mag, labels in zip(data.test, data.test_noisy_mag,
                                          data.test_clean_mag, data.test_labels):
        spp = estimate_spp(model, spec, enhanced=enhanced).values
        details.append(_score(spp, y_mag, s_mag, labels, aucs, sdrs))
    return _summary(aucs, sdrs, details)


def evaluate_oracle(data: PreparedData):
    aucs, sdrs, details = [], [], []
    for y_mag, s_mag, labels in zip(data.test_noisy_mag, data.test_clean_mag, data.test_labels):
        details.append(_score(ratio_mask(s_mag, y_mag), y_mag, s_mag, labels, aucs, sdrs))
    return _summary(aucs, sdrs, details)


def _score(spp, y_mag, s_mag, labels, aucs, sdrs):
    detail = {"sdr": sdr(y_mag, spp, s_mag), "auc": None}
    sdrs.append(detail["sdr"])
    if 0 < np.sum(labels) < len(labels):
        detail["auc"] = roc_auc(integrate_1d(spp), labels).auc
        aucs.append(detail["auc"])
    return detail


def _summary(aucs, sdrs, details):
    return {
        "auc": float(np.mean(aucs)) if aucs else float("nan"),
        "sdr": float(np.mean(sdrs)),
        "utterances": details,
    }


def run_benchmark(variants=DEFAULT_VARIANTS, corpus_spec=None, snr_list=(-5, 0, 5),
                  noise_kinds=("babble", "white", "pink"), n_train=20, n_test=5):
    """Train and evaluate every variant on each (noise, SNR) cell.

    Returns a nested dict ``report[metric][variant][(noise, snr)]`` plus
    per-utterance detail under ``report["detail"]``.
    """
    corpus_spec = corpus_spec or fe.SyntheticCorpusSpec()
    report = {"auc": {}, "sdr": {}, "detail": [], "cells": []}
    for noise in noise_kinds:
        for snr in snr_list:
            cell = (noise, snr)
            report["cells"].append(cell)
            data = prepare_data(replace(corpus_spec, noise_kind=noise, snr_db=snr),
                                n_train, n_test)
            for variant in variants:
                if variant.oracle:
                    result = evaluate_oracle(data)
                else:
                    model, _ = build_model(variant, data)
                    result = evaluate_model(model, data, variant.enhanced)
                log.info("%s %s %+d dB: AUC %.3f SDR %.3f", variant.name, noise, snr,
                         result["auc"], result["sdr"])
                report["auc"].setdefault(variant.name, {})[cell] = result["auc"]
                report["sdr"].setdefault(variant.name, {})[cell] = result["sdr"]
                for i, d in enumerate(result["utterances"]):
                    report["detail"].append({"variant": variant.name, "noise": noise,
                                             "snr_db": snr, "utterance": i, **d})
    return report


def report_to_csv(report, metric):
    """One row per variant, one column per (noise, SNR) cell."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    cells = report["cells"]
    writer.writerow(["model"] + [f"{n}_{s}dB" for n, s in cells])
    for name, row in report[metric].items():
        writer.writerow([name] + [repr(float(row[c])) for c in cells])
    return buf.getvalue()


def read_report_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    cells = []
    for col in header[1:]:
        noise, snr = col.rsplit("_", 1)
        cells.append((noise, int(snr[:-2]) if snr[:-2].lstrip("+-").isdigit() else float(snr[:-2])))
    return cells, {r[0]: {c: float(v) for c, v in zip(cells, r[1:])} for r in body}


def format_table(report, metric):
    """Plain-text table grouped by noise type, SNR columns underneath."""
    cells = report["cells"]
    noises = list(dict.fromkeys(n for n, _ in cells))
    width = max([len(name) for name in report[metric]] + [8])
    top = " " * width + "".join(
        f" {n:^{7 * sum(1 for c in cells if c[0] == n) - 1}}" for n in noises)
    sub = " " * width + "".join(f" {str(s) + 'dB':>6}" for _, s in cells)
    lines = [top, sub]
    for name, row in report[metric].items():
        lines.append(f"{name:<{width}}" + "".join(f" {row[c]:6.3f}" for c in cells))
    return "\n".join(lines)


def detail_jsonl(report):
    return "".join(json.dumps(d) + "\n" for d in report["detail"])
