"""Scenario grid, epsilon sweep and the cross-key transfer matrix."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attacks import (
    AttackConfig,
    clean_row,
    craft,
    model_row_fields,
    scenario_adaptive,
    scenario_non_adaptive,
    scenario_whitebox_oracle,
)
from .data_io import Dataset
from .keyed_transform import Key
from .metrics import CSV_COLUMNS, EvalReport, EvalRow, accuracy
from .model import Pipeline, VisionTransformer

SCENARIOS = ("clean", "non_adaptive", "adaptive", "whitebox", "wrong_key")

__all__ = [
    "CSV_COLUMNS",
    "EvalReport",
    "EvalRow",
    "GridModel",
    "TransferMatrix",
    "accuracy",
    "epsilon_sweep",
    "run_grid",
    "transfer_matrix",
    "write_sweep_tsv",
]


@dataclass
class GridModel:
    """A model under evaluation. ``surrogate`` is the guessed-key model the
    adaptive attacker fine-tuned; ``guessed_seed`` names its key."""

    model_id: str
    model: VisionTransformer
    surrogate: Optional[VisionTransformer] = None
    guessed_seed: Optional[int] = None


class GridError(RuntimeError):
    pass


def run_grid(
    models: Sequence[GridModel],
    scenarios: Sequence[str],
    budgets: Sequence[AttackConfig],
    data: Dataset,
    m_o: Optional[VisionTransformer] = None,
    method: str = "pgd",
    train: Optional[Dataset] = None,
    train_cfg=None,
) -> EvalReport:
    """One row per (model, scenario, norm); ``clean`` gets a single row per model.

    For the plain model there is no key to guess, so both the non-adaptive
    and the adaptive cells are white-box attacks on M_o itself.
    """
    bad = [s for s in scenarios if s not in SCENARIOS]
    if bad:
        raise ValueError(f"unknown scenarios {bad}")
    shapes = {(gm.model.config.channels, *gm.model.config.image_size) for gm in models}
    if len(shapes) > 1:
        raise ValueError(f"models disagree on input dims: {shapes}")
    report = EvalReport()
    transferred: dict[tuple, object] = {}
    for gm in models:
        m = gm.model
        for scen in scenarios:
            if scen == "clean":
                report.add(clean_row(gm.model_id, m, data))
                continue
            if scen == "wrong_key":
                report.add(_grid_cell(gm, scen, None, data, m_o, method, transferred, train, train_cfg)[0])
                continue
            for cfg in budgets:
                try:
                    rows = _grid_cell(gm, scen, cfg, data, m_o, method, transferred, train, train_cfg)
                except Exception as e:
                    raise GridError(f"grid cell (model={gm.model_id}, scenario={scen}, norm={cfg.norm}, "
                                    f"epsilon={cfg.epsilon}) failed: {e}") from e
                report.add(rows[0])
    return report


def _grid_cell(gm: GridModel, scen, cfg, data, m_o, method, cache, train, train_cfg) -> list[EvalRow]:
    m = gm.model
    if m.key is None or scen == "whitebox":
        rows, _ = scenario_whitebox_oracle(m, data, cfg, gm.model_id, method)
        return [EvalRow(**{**rows[0].__dict__, "scenario": scen})]
    if scen == "non_adaptive":
        if m_o is None:
            raise ValueError("non_adaptive needs the pre-trained model m_o")
        ck = (cfg.norm, cfg.epsilon, cfg.steps, cfg.eta, cfg.seed, method)
        rows, batch = scenario_non_adaptive(m_o, m, data, cfg, gm.model_id, method, cache.get(ck))
        cache[ck] = batch
        return rows
    if scen == "adaptive":
        if gm.guessed_seed is None:
            raise ValueError("adaptive needs a guessed seed for the surrogate")
        rows, sur, _ = scenario_adaptive(m_o, m, gm.guessed_seed, data, cfg, train, train_cfg, gm.surrogate,
                                         gm.model_id, method)
        gm.surrogate = sur
        return rows
    if scen == "wrong_key":
        # diagnostic only: clean images through M_K with the guessed key
        if gm.surrogate is None or gm.surrogate.key is None:
            raise ValueError("wrong_key needs a surrogate key")
        acc = accuracy(Pipeline(m, gm.surrogate.key), data.images, data.labels)
        return [EvalRow(**model_row_fields(gm.model_id, m), scenario="wrong_key", norm="none",
                        epsilon=0.0, n=len(data), accuracy=acc)]
    raise ValueError(scen)


def epsilon_sweep(
    models: Sequence[GridModel],
    norm: str,
    epsilons: Sequence[float],
    data: Dataset,
    base: AttackConfig,
    scenario: str = "whitebox",
    m_o: Optional[VisionTransformer] = None,
    method: str = "pgd",
) -> EvalReport:
    """Accuracy per (model, epsilon). The epsilon = 0 row is the clean accuracy."""
    eps = [float(e) for e in epsilons]
    if not eps or eps[0] != 0.0 or any(b < a for a, b in zip(eps, eps[1:])):
        raise ValueError("epsilon list must be sorted ascending and start at 0")
    report = EvalReport()
    for gm in models:
        for e in eps:
            cfg = base.replace(norm=norm, epsilon=e)
            if e == 0.0:
                row = clean_row(gm.model_id, gm.model, data)
                report.add(EvalRow(**{**row.__dict__, "scenario": scenario, "norm": cfg.norm, "epsilon": 0.0}))
                continue
            rows = _grid_cell(gm, scenario, cfg, data, m_o, method, {}, None, None)
            report.add(EvalRow(**{**rows[0].__dict__, "scenario": scenario}))
    return report


def write_sweep_tsv(report: EvalReport, directory, prefix: str = "sweep") -> list[Path]:
    """One two-column (epsilon, accuracy) TSV per model."""
    directory = Path(directory)
    out = []
    for mid in dict.fromkeys(r.model_id for r in report.rows):
        p = directory / f"{prefix}_{mid}.tsv"
        lines = ["epsilon\taccuracy"] + [f"{r.epsilon!r}\t{r.accuracy!r}" for r in report.rows if r.model_id == mid]
        p.write_text("\n".join(lines) + "\n")
        out.append(p)
    return out


@dataclass
class TransferMatrix:
    """``acc[i, j]``: accuracy of model j on examples crafted white-box against model i."""

    model_ids: list[str]
    acc: np.ndarray
    clean: np.ndarray
    norm: str
    epsilon: float
    n: int
    keys: list[Optional[Key]] = field(default_factory=list)

    def __post_init__(self):
        k = len(self.model_ids)
        if self.acc.shape != (k, k):
            raise ValueError(f"transfer matrix must be {k}x{k}, got {self.acc.shape}")

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.acc)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source\\target"] + self.model_ids)
        for i, mid in enumerate(self.model_ids):
            w.writerow([mid] + [repr(float(v)) for v in self.acc[i]])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def transfer_matrix(
    models: Sequence[GridModel],
    data: Dataset,
    cfg: AttackConfig,
    method: str = "pgd",
    allow_duplicate_keys: bool = False,
) -> TransferMatrix:
    if len(models) < 2:
        raise ValueError("transfer matrix needs at least two models")
    configs = {gm.model.config.to_dict().__repr__() for gm in models}
    if len(configs) > 1:
        raise ValueError("models must share one architecture")
    keys = [gm.model.key for gm in models]
    if any(k is None for k in keys):
        raise ValueError("every model in the transfer matrix must carry a key")
    if not allow_duplicate_keys and len({k.perm for k in keys}) != len(keys):
        raise ValueError("duplicate keys in transfer matrix")
    pipes = [Pipeline(gm.model, gm.model.key) for gm in models]
    n = len(models)
    acc = np.zeros((n, n))
    clean = np.array([accuracy(p, data.images, data.labels) for p in pipes])
    for i, src in enumerate(pipes):
        batch = craft(src, data.images, data.labels, cfg, method)
        batch.check_feasible()
        xa = batch.adversarial
        for j, dst in enumerate(pipes):
            acc[i, j] = accuracy(dst, xa, data.labels)
    return TransferMatrix([gm.model_id for gm in models], acc, clean, cfg.norm, float(cfg.epsilon), len(data), keys)
