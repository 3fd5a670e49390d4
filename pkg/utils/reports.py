# polarseg/utils/reports.py
"""CSV writers/readers for histograms, training logs, metrics and attention dumps."""
import csv
from pathlib import Path
from typing import Iterable, List, Optional, Union

from api.models import (
    AttentionRecord,
    ChannelAttention,
    DatasetStats,
    MetricsReport,
    TrainLogRow,
)
from core.errors import FormatError

PathLike = Union[str, Path]


def _fmt(value: Optional[float]) -> str:
    # repr keeps every bit of a float64, empty field means undefined
    return "" if value is None else repr(float(value))


def _parse(value: str) -> Optional[float]:
    return None if value == "" else float(value)


def _write(path: PathLike, header: List[str], rows: Iterable[List[str]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _read(path: PathLike, header: List[str]) -> List[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != header:
            raise FormatError(f"{path}: expected columns {header}, got {reader.fieldnames}")
        return list(reader)


def write_stats_csv(path: PathLike, stats: DatasetStats) -> Path:
    rows = ([_fmt(lo), _fmt(hi), str(count)]
            for lo, hi, count in zip(stats.edges[:-1], stats.edges[1:], stats.counts))
    return _write(path, ["bin_lo", "bin_hi", "count"], rows)


def write_train_log(path: PathLike, rows: Iterable[TrainLogRow]) -> Path:
    return _write(path, ["epoch", "step", "lr", "loss", "val_miou"],
                  ([str(r.epoch), str(r.step), _fmt(r.lr), _fmt(r.loss), _fmt(r.val_miou)] for r in rows))


def read_train_log(path: PathLike) -> List[TrainLogRow]:
    return [TrainLogRow(epoch=int(r["epoch"]), step=int(r["step"]), lr=float(r["lr"]),
                        loss=float(r["loss"]), val_miou=_parse(r["val_miou"]))
            for r in _read(path, ["epoch", "step", "lr", "loss", "val_miou"])]


def write_metrics_csv(path: PathLike, report: MetricsReport) -> Path:
    rows = [[c.name, _fmt(c.iou), _fmt(c.precision), _fmt(c.recall)] for c in report.classes]
    rows.append(["mIoU", _fmt(report.miou), "", ""])
    return _write(path, ["class", "iou", "precision", "recall"], rows)


def read_metrics_miou(path: PathLike) -> Optional[float]:
    for row in _read(path, ["class", "iou", "precision", "recall"]):
        if row["class"] == "mIoU":
            return _parse(row["iou"])
    raise FormatError(f"{path}: no mIoU row")


def write_attention_csv(path: PathLike, records: Iterable[AttentionRecord]) -> Path:
    return _write(path, ["stage", "branch", "mean_weight"],
                  ([r.stage, r.branch, _fmt(r.mean_weight)] for r in records))


def write_channel_attention_csv(path: PathLike, channels: Iterable[ChannelAttention]) -> Path:
    return _write(path, ["stage", "branch", "channel", "weight"],
                  ([c.stage, c.branch, str(c.channel), _fmt(c.weight)] for c in channels))


def read_channel_attention_csv(path: PathLike) -> List[ChannelAttention]:
    return [ChannelAttention(stage=r["stage"], branch=r["branch"], channel=int(r["channel"]), weight=float(r["weight"]))
            for r in _read(path, ["stage", "branch", "channel", "weight"])]
