"""Dataset-level certification, input-space PGD and report assembly."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .certify import (
    RADII,
    Certificate,
    audit_network_lipschitz,
    crc_lip_certificate,
    linear_head_certificate,
)
from .data import Dataset
from .network import LinearHead, Network
from .train import EpochRecord

SUMMARY_RADII = (0.0,) + tuple(RADII)
RADIUS_LABELS = {0.0: "0", RADII[0]: "36/255", RADII[1]: "72/255", RADII[2]: "108/255"}


@dataclass
class CertRecord:
    index: int
    label: int
    prediction: int
    radius: float
    classes: list[int] = field(default_factory=list)
    distances: list[float] = field(default_factory=list)
    tight: list[bool] = field(default_factory=list)
    seconds: float = 0.0


def certify_point(net: Network, x: np.ndarray, label: int, lip_correction: float,
                  top_j: int | None = None) -> Certificate:
    if isinstance(net.head, LinearHead):
        y = net.features(x)
        return linear_head_certificate(net.head.params["V"], net.head.params["b"], y,
                                       lln=net.head.lln, lip_correction=lip_correction, label=label)
    return crc_lip_certificate(net.features, net.mlp_head(), x, top_j=top_j,
                               lip_correction=lip_correction, label=label)


def certify_dataset(net: Network, data: Dataset, top_j: int | None = None,
                    lip_correction: float | None = None, audit_iters: int = 200,
                    offset: int = 0) -> tuple[list[CertRecord], float]:
    """Certificates for every input; the Lipschitz correction defaults to the
    power-method audit of the SOC layers at ``k_eval``."""
    if data.shape != tuple(net.config.in_shape):
        raise ValueError(f"dataset shape {data.shape} does not match network input {net.config.in_shape}")
    if lip_correction is None:
        lip_correction = audit_network_lipschitz(net, iters=audit_iters).correction
    records = []
    for n in range(len(data)):
        start = time.perf_counter()
        cert = certify_point(net, data.images[n], int(data.labels[n]), lip_correction, top_j)
        records.append(CertRecord(
            offset + n, int(data.labels[n]), int(cert.prediction), float(cert.radius),
            [c.cls for c in cert.per_class], [float(c.distance) for c in cert.per_class],
            [bool(c.tight) for c in cert.per_class], time.perf_counter() - start))
    return records, lip_correction


def robust_accuracy(records: list[CertRecord], radius: float) -> float:
    """Fraction correctly classified with certified radius ``>= radius``.

    At radius 0 this is the standard accuracy.
    """
    if not records:
        return 0.0
    hits = sum(r.prediction == r.label and r.radius >= radius for r in records)
    return hits / len(records)


def input_pgd_flips(net: Network, images: np.ndarray, labels: np.ndarray, radii: np.ndarray,
                    steps: int = 200, step_frac: float = 0.1, seed: int = 0) -> np.ndarray:
    """l2 PGD in input space on the logit margin; ``True`` where any iterate
    inside ``||delta|| <= radius`` changes the prediction."""
    labels = np.asarray(labels)
    radii = np.asarray(radii, dtype=np.float64).reshape(-1, 1, 1, 1)
    rng = np.random.default_rng(seed)
    x0 = np.asarray(images, dtype=np.float64)
    delta = rng.standard_normal(x0.shape)
    delta *= 0.5 * radii / np.linalg.norm(delta.reshape(len(x0), -1), axis=1).reshape(-1, 1, 1, 1)
    flipped = np.zeros(len(x0), dtype=bool)
    rows = np.arange(len(x0))
    for _ in range(steps):
        x = x0 + delta
        logits = net.logits(x)
        flipped |= np.argmax(logits, axis=1) != labels
        masked = logits.copy()
        masked[rows, labels] = -np.inf
        other = np.argmax(masked, axis=1)
        grad_logits = np.zeros_like(logits)
        grad_logits[rows, other] = 1.0
        grad_logits[rows, labels] = -1.0
        g = net.input_gradient(x, grad_logits)
        gn = np.linalg.norm(g.reshape(len(x0), -1), axis=1).reshape(-1, 1, 1, 1)
        delta = delta + step_frac * radii * np.divide(g, gn, out=np.zeros_like(g), where=gn > 0)
        dn = np.linalg.norm(delta.reshape(len(x0), -1), axis=1).reshape(-1, 1, 1, 1)
        delta = delta * np.minimum(1.0, radii / np.maximum(dn, 1e-300))
    flipped |= np.argmax(net.logits(x0 + delta), axis=1) != labels
    return flipped


# -- files ------------------------------------------------------------------

def _with_manifest(manifest_id: str, rows: list[list]) -> str:
    buf = io.StringIO()
    buf.write(f"# manifest={manifest_id}\n")
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def read_csv(path) -> list[dict[str, str]]:
    lines = [l for l in Path(path).read_text().splitlines() if l and not l.startswith("#")]
    return list(csv.DictReader(lines))


def manifest_of(path) -> str:
    first = Path(path).read_text().split("\n", 1)[0]
    return first.split("=", 1)[1] if first.startswith("# manifest=") else ""


# Wall times live in separate *_timing.csv files so the numerical outputs
# stay byte-identical across deterministic runs.

def history_csv(history: list[EpochRecord], manifest_id: str) -> str:
    rows = [["epoch", "lr", "loss", "ce", "reg", "grad_path"]]
    rows += [[h.epoch, f"{h.lr:.6g}", f"{h.loss:.9f}", f"{h.ce:.9f}", f"{h.reg:.9f}", h.grad_path]
             for h in history]
    return _with_manifest(manifest_id, rows)


def history_timing_csv(history: list[EpochRecord], manifest_id: str) -> str:
    rows = [["epoch", "seconds", "soc_grad_seconds", "grad_path"]]
    rows += [[h.epoch, f"{h.seconds:.6f}", f"{h.soc_grad_seconds:.6f}", h.grad_path] for h in history]
    return _with_manifest(manifest_id, rows)


def certificates_csv(records: list[CertRecord], manifest_id: str) -> str:
    rows = [["index", "label", "prediction", "radius", "classes", "distances", "tight"]]
    for r in records:
        rows.append([r.index, r.label, r.prediction, f"{r.radius:.9f}",
                     ";".join(map(str, r.classes)),
                     ";".join(f"{d:.9f}" for d in r.distances),
                     ";".join("1" if t else "0" for t in r.tight)])
    return _with_manifest(manifest_id, rows)


def certify_timing_csv(records: list[CertRecord], manifest_id: str) -> str:
    rows = [["index", "seconds"]] + [[r.index, f"{r.seconds:.6f}"] for r in records]
    return _with_manifest(manifest_id, rows)


def summary_csv(records: list[CertRecord], head: str, lip_correction: float, manifest_id: str) -> str:
    rows = [["head", "count", "lip_correction"] + [f"radius_{RADIUS_LABELS[r]}" for r in SUMMARY_RADII]]
    rows.append([head, len(records), f"{lip_correction:.12f}"]
                + [f"{robust_accuracy(records, r):.6f}" for r in SUMMARY_RADII])
    return _with_manifest(manifest_id, rows)


def records_from_csv(path) -> list[CertRecord]:
    out = []
    for row in read_csv(path):
        split = lambda s: [v for v in s.split(";") if v]
        out.append(CertRecord(int(row["index"]), int(row["label"]), int(row["prediction"]),
                              float(row["radius"]), [int(v) for v in split(row["classes"])],
                              [float(v) for v in split(row["distances"])],
                              [v == "1" for v in split(row["tight"])]))
    return out


@dataclass
class RunInputs:
    name: str
    history: Path | None = None
    certificates: Path | None = None
    summary: Path | None = None


def build_report(runs: list[RunInputs], manifest_id: str,
                 radius_grid: np.ndarray | None = None) -> dict[str, str]:
    """Markdown table plus loss and radius curves.  Wall times are left out so
    the output depends only on the numerical results."""
    grid = np.round(np.linspace(0.0, 0.5, 51), 6) if radius_grid is None else radius_grid
    md = [f"Manifest `{manifest_id}`", "",
          "| Run | Head | Inputs | Standard Accuracy | Provable Robust Accuracy (36/255) "
          "| Provable Robust Accuracy (72/255) | Provable Robust Accuracy (108/255) |",
          "|---|---|---|---|---|---|---|"]
    loss_rows = [["run", "epoch", "loss", "ce", "reg"]]
    radius_rows = [["run", "radius", "certified_accuracy"]]
    for run in runs:
        if run.summary is not None:
            s = read_csv(run.summary)[0]
            cells = [s[f"radius_{RADIUS_LABELS[r]}"] for r in SUMMARY_RADII]
            md.append(f"| {run.name} | {s['head']} | {s['count']} | "
                      + " | ".join(f"{100 * float(c):.2f}%" for c in cells) + " |")
        if run.history is not None:
            for h in read_csv(run.history):
                loss_rows.append([run.name, h["epoch"], h["loss"], h["ce"], h["reg"]])
        if run.certificates is not None:
            recs = records_from_csv(run.certificates)
            for r in grid:
                radius_rows.append([run.name, f"{r:.6f}", f"{robust_accuracy(recs, float(r)):.6f}"])
    return {
        "report.md": "\n".join(md) + "\n",
        "loss_curve.csv": _with_manifest(manifest_id, loss_rows),
        "radius_curve.csv": _with_manifest(manifest_id, radius_rows),
    }
