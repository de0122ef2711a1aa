"""Metrics report: per-frame and aggregate numbers, validated against a JSON schema.

Aggregates pool counts over frames (IoU from summed TP/FP/FN, EPE from summed
errors), they are not means of the per-frame values. Undefined numbers are
written as ``null``.
"""

from __future__ import annotations

import json
from importlib import resources

import jsonschema

from dogm.metrics.cell import Confusion, EpeAccumulator, confusion, split_label
from dogm.metrics.objects import ObjectAccumulator, extract_clusters

SCHEMA_VERSION = 1


def load_schema() -> dict:
    return json.loads(resources.files("dogm").joinpath("schemas/report.json").read_text())


def validate_report(report: dict) -> None:
    """Raise ``jsonschema.ValidationError`` if the report is malformed."""
    jsonschema.validate(report, load_schema())


def _cell_fields(conf: Confusion, epe: EpeAccumulator) -> dict:
    return {"miou": conf.miou(), "static_iou": conf.static_iou,
            "dynamic_iou": conf.dynamic_iou, **epe.result()}


def _object_fields(acc: ObjectAccumulator) -> dict:
    return acc.result()


class ReportBuilder:
    """Feed frames one at a time; :meth:`report` returns the JSON-ready dict."""

    def __init__(self, with_objects: bool = False):
        self.with_objects = with_objects
        self.frames = []
        self.conf = Confusion()
        self.epe = EpeAccumulator()
        self.objects = ObjectAccumulator()

    def add(self, index: int, pred, label, boxes=None) -> dict:
        ve, vn, mask = split_label(label)
        conf = confusion(pred.p_o, pred.v_e, pred.v_n, ve, vn, mask)
        epe = EpeAccumulator().add(pred.v_e, pred.v_n, ve, vn, mask)
        self.conf += conf
        self.epe += epe
        row = {"frame": int(index), **_cell_fields(conf, epe)}
        if self.with_objects:
            clusters = extract_clusters(pred)
            acc = ObjectAccumulator().add(clusters, boxes or [], label)
            self.objects.add(clusters, boxes or [], label)
            row["objects"] = _object_fields(acc)
        self.frames.append(row)
        return row

    def report(self) -> dict:
        agg = {"frames": len(self.frames), **_cell_fields(self.conf, self.epe)}
        if self.with_objects:
            agg["objects"] = _object_fields(self.objects)
        rep = {"schema_version": SCHEMA_VERSION, "frames": self.frames, "aggregate": agg}
        validate_report(rep)
        return rep


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
