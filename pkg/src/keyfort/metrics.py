"""Accuracy accounting and the evaluation report rows."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

CSV_COLUMNS = ["model_id", "defense", "block_size", "finetune", "scenario", "norm", "epsilon", "n", "accuracy"]


def accuracy(pipeline, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    """Fraction of examples whose argmax prediction equals the label."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty example set is undefined")
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    pred = pipeline.predict(images, batch_size)
    return int(np.sum(pred == labels)) / len(labels)


@dataclass
class EvalRow:
    model_id: str
    defense: str  # plain | key
    block_size: Optional[int]
    finetune: str  # no | full | lora
    scenario: str  # clean | non_adaptive | adaptive | whitebox | wrong_key
    norm: str  # none | inf | 2
    epsilon: float
    n: int
    accuracy: float

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("n must be positive")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")

    def cell(self) -> tuple:
        return (self.model_id, self.scenario, self.norm, self.epsilon)


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def add(self, row: EvalRow) -> None:
        if any(r.cell() == row.cell() for r in self.rows):
            raise ValueError(f"duplicate report cell {row.cell()}")
        self.rows.append(row)

    def extend(self, rows) -> None:
        for r in rows:
            self.add(r)

    def __len__(self) -> int:
        return len(self.rows)

    def get(self, model_id: str, scenario: str, norm: str = "none", epsilon: Optional[float] = None) -> EvalRow:
        for r in self.rows:
            if r.model_id == model_id and r.scenario == scenario and r.norm == norm and (epsilon is None or math.isclose(r.epsilon, epsilon)):
                return r
        raise KeyError((model_id, scenario, norm, epsilon))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.model_id, r.defense, "" if r.block_size is None else r.block_size, r.finetune,
                        r.scenario, r.norm, repr(float(r.epsilon)), r.n, repr(float(r.accuracy))])
        return buf.getvalue()

    def to_json(self) -> str:
        """Rows nested by model id; the model-level fields are hoisted."""
        models: dict[str, dict] = {}
        for r in self.rows:
            m = models.setdefault(r.model_id, {"defense": r.defense, "block_size": r.block_size,
                                               "finetune": r.finetune, "results": []})
            m["results"].append({"scenario": r.scenario, "norm": r.norm, "epsilon": r.epsilon,
                                 "n": r.n, "accuracy": r.accuracy})
        return json.dumps({"columns": CSV_COLUMNS, "models": models}, indent=2) + "\n"

    def write(self, csv_path=None, json_path=None) -> None:
        if csv_path is not None:
            Path(csv_path).write_text(self.to_csv())
        if json_path is not None:
            Path(json_path).write_text(self.to_json())

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rep = cls()
        for d in csv.DictReader(io.StringIO(text)):
            rep.add(EvalRow(d["model_id"], d["defense"], int(d["block_size"]) if d["block_size"] else None,
                            d["finetune"], d["scenario"], d["norm"], float(d["epsilon"]), int(d["n"]),
                            float(d["accuracy"])))
        return rep

    def as_dicts(self) -> list[dict]:
        return [asdict(r) for r in self.rows]
