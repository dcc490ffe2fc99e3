"""Per-item PSNR/SSIM tables for the ablation variants, and loss-curve export.

Variants:

* ``occluded-input``: the occluded images scored as they are (no model)
* ``bce-only``, ``bce+ssim``, ``mode1``: G1 trained with that objective
* ``full-sdgan``: G2 applied to G1's completion

CSV layout: header ``item,subject,psnr_db,ssim``, one row per test item,
then a final ``mean`` row.  Infinite PSNR is written as ``inf``.
"""

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .errors import ConfigError, ContractError, FormatError
from .networks import g1_forward, g2_forward
from .tensor import Tensor
from .trainer import TrainConfig, train

VARIANTS = ("occluded-input", "bce-only", "bce+ssim", "mode1", "full-sdgan")
VARIANT_OBJECTIVE = {"bce-only": "bce", "bce+ssim": "bce+ssim", "mode1": "full", "full-sdgan": "full"}
CSV_HEADER = ["item", "subject", "psnr_db", "ssim"]


def variant_stage(variant):
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    if variant == "occluded-input":
        return None
    return "full" if variant == "full-sdgan" else "mode1"


def fmt_float(x):
    return "inf" if x == math.inf else repr(float(x))


def parse_float(s):
    return math.inf if s == "inf" else float(s)


@dataclass
class MetricsReport:
    variant: str
    items: list = field(default_factory=list)  # (item id, subject id, psnr dB, ssim)

    @property
    def mean_psnr(self):
        return math.fsum(r[2] for r in self.items) / len(self.items)

    @property
    def mean_ssim(self):
        return math.fsum(r[3] for r in self.items) / len(self.items)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for item, subject, p, s in self.items:
                w.writerow([item, subject, fmt_float(p), fmt_float(s)])
            w.writerow(["mean", "", fmt_float(self.mean_psnr), fmt_float(self.mean_ssim)])
        return path

    @classmethod
    def from_csv(cls, path, variant=None):
        """Read a report back; also returns the stored aggregate row as a dict."""
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != CSV_HEADER:
            raise FormatError(f"{path}: expected header {','.join(CSV_HEADER)}")
        if len(rows) < 3 or rows[-1][0] != "mean":
            raise FormatError(f"{path}: missing aggregate row")
        items = [(int(r[0]), int(r[1]), parse_float(r[2]), parse_float(r[3])) for r in rows[1:-1]]
        aggregate = {"psnr_db": parse_float(rows[-1][2]), "ssim": parse_float(rows[-1][3])}
        variant = variant or os.path.splitext(os.path.basename(path))[0]
        return cls(variant, items), aggregate


def complete(models, occluded, stage="mode1", chunk=100):
    """Completed images for an (N, C, H, W) array; ``stage="full"`` adds G2."""
    if stage not in ("mode1", "full"):
        raise ConfigError(f"stage must be 'mode1' or 'full', got {stage!r}")
    out = []
    for i in range(0, len(occluded), chunk):
        x = g1_forward(Tensor(occluded[i : i + chunk]), models["g1"])
        if stage == "full":
            x = g2_forward(x, models["g2"])
        out.append(x.data)
    return np.concatenate(out)


def score_images(variant, outputs, dataset, workers=1):
    """MetricsReport comparing ``outputs`` with ``dataset.full`` item by item."""
    if len(dataset) == 0:
        raise ContractError("cannot report on an empty split")
    if outputs.shape != dataset.full.shape:
        raise ContractError(f"outputs {outputs.shape} do not match references {dataset.full.shape}")

    def one(i):
        return (i, int(dataset.subject_ids[i]), L.psnr(outputs[i], dataset.full[i]), L.ssim_value(outputs[i], dataset.full[i]))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rows = list(pool.map(one, range(len(dataset))))
    return MetricsReport(variant, rows)


def evaluate_variant(variant, dataset, models=None, workers=1):
    stage = variant_stage(variant)
    if stage is None:
        outputs = dataset.occluded
    else:
        if models is None:
            raise ContractError(f"variant {variant!r} needs trained models")
        outputs = complete(models, dataset.occluded, stage)
    return score_images(variant, outputs, dataset, workers)


def read_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_loss_curve(log_path, out_path):
    """CSV of epoch and the four mean losses; idle Mode-II epochs are left blank."""
    keys = ("loss_d1", "loss_g1", "loss_d2", "loss_g2")
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", *keys, "nice_pool_size"])
        for rec in read_log(log_path):
            w.writerow([rec["epoch"], *("" if rec.get(k) is None else repr(rec[k]) for k in keys), rec.get("nice_pool_size", "")])
    return out_path


def train_variants(train_set, config, variants=VARIANTS):
    """Train one model set per distinct G1 objective needed by ``variants``.

    ``mode1`` and ``full-sdgan`` share a run: Mode-II never touches G1, so the
    G1 of a full run is exactly the Mode-I result.  Returns variant -> models
    (``None`` for the occluded-input baseline) and variant -> TrainResult.
    """
    runs, models, results = {}, {}, {}
    for variant in variants:
        if variant_stage(variant) is None:
            models[variant] = None
            continue
        objective = VARIANT_OBJECTIVE[variant]
        if objective not in runs:
            cfg = TrainConfig.from_dict(dict(config.to_dict(), g1_objective=objective, mode2=objective == "full"))
            runs[objective] = train(train_set, cfg)
        models[variant] = runs[objective].models
        results[variant] = runs[objective]
    return models, results


def run_ablation(train_set, test_set, config, variants=VARIANTS, out_dir=None, workers=1):
    """Train and score every variant; optionally write one CSV per variant."""
    models, results = train_variants(train_set, config, variants)
    reports = {v: evaluate_variant(v, test_set, models[v], workers) for v in variants}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        for v, rep in reports.items():
            rep.to_csv(os.path.join(out_dir, f"{v}.csv"))
    return reports, results
