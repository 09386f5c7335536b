"""ComparisonReport: the four-model x two-test-set SSIM table with Wilcoxon p matrices."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .metrics import mean_sd, wilcoxon_signed_rank

MODEL_NAMES = ("baseline-a", "baseline-b", "central", "federated")
TEST_SETS = ("A", "B")
ALPHA = 0.05


@dataclass
class ComparisonReport:
    # scores[model][test_set] -> per-pair SSIM list (test-set order)
    scores: dict[str, dict[str, list[float]]]
    pair_ids: dict[str, list[str]]
    config: dict = field(default_factory=dict)
    version: str = ""

    def __post_init__(self):
        for m in self.models:
            for t in self.test_sets:
                if len(self.scores[m][t]) != len(self.pair_ids[t]):
                    raise ValueError(f"{m}/{t}: score count does not match pair_ids")

    @property
    def models(self) -> list[str]:
        return list(self.scores)

    @property
    def test_sets(self) -> list[str]:
        return list(self.pair_ids)

    def cell(self, model: str, test_set: str) -> tuple[float, float]:
        return mean_sd(self.scores[model][test_set])

    def p_value(self, test_set: str, m1: str, m2: str) -> float:
        if m1 == m2:
            return 1.0
        return wilcoxon_signed_rank(self.scores[m1][test_set], self.scores[m2][test_set]).p_value

    def p_matrix(self, test_set: str) -> np.ndarray:
        ms = self.models
        out = np.ones((len(ms), len(ms)))
        for i, a in enumerate(ms):
            for j in range(i + 1, len(ms)):
                out[i, j] = out[j, i] = self.p_value(test_set, a, ms[j])
        return out

    # -- serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        cells = {
            m: {t: dict(zip(("mean", "sd"), self.cell(m, t))) for t in self.test_sets}
            for m in self.models
        }
        return {
            "version": self.version,
            "config": self.config,
            "models": self.models,
            "test_sets": self.test_sets,
            "cells": cells,
            "p_values": {t: self.p_matrix(t).tolist() for t in self.test_sets},
            "pair_ids": self.pair_ids,
            "scores": self.scores,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ComparisonReport":
        return cls(
            scores={m: {t: list(v) for t, v in ts.items()} for m, ts in d["scores"].items()},
            pair_ids={t: list(v) for t, v in d["pair_ids"].items()},
            config=dict(d.get("config", {})),
            version=d.get("version", ""),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def per_pair_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["test_set", "pair_id", *self.models])
        for t in self.test_sets:
            for i, pid in enumerate(self.pair_ids[t]):
                w.writerow([t, pid, *(repr(float(self.scores[m][t][i])) for m in self.models)])
        return buf.getvalue()

    def table_text(self, reference: str = "federated") -> str:
        """Mean SSIM +- SD per cell; '*' marks p < 0.05 against ``reference``."""
        lines = []
        width = max(len(m) for m in self.models) + 2
        col = 30
        lines.append("model".ljust(width) + "".join(f"test-{t}".ljust(col) for t in self.test_sets).rstrip())
        for m in self.models:
            row = m.ljust(width)
            for t in self.test_sets:
                mean, sd = self.cell(m, t)
                text = f"{mean:.3f} ± {sd:.3f}"
                if reference in self.models and m != reference:
                    p = self.p_value(t, reference, m)
                    text += ("*" if p < ALPHA else " ") + f" p={p:.3g}"
                row += text.ljust(col)
            lines.append(row.rstrip())
        lines.append(f"* p < {ALPHA} (two-sided Wilcoxon signed-rank vs {reference})")
        for t in self.test_sets:
            lines.append("")
            lines.append(f"pairwise p-values, test set {t}:")
            mat = self.p_matrix(t)
            lines.append(" " * width + "".join(m.rjust(12) for m in self.models))
            for i, m in enumerate(self.models):
                lines.append(m.ljust(width) + "".join(f"{v:12.4g}" for v in mat[i]))
        return "\n".join(lines) + "\n"


def build_report(
    scores: Mapping[str, Mapping[str, Sequence[float]]],
    pair_ids: Mapping[str, Sequence[str]],
    config: dict | None = None,
    version: str = "",
) -> ComparisonReport:
    return ComparisonReport(
        scores={m: {t: [float(x) for x in v] for t, v in ts.items()} for m, ts in scores.items()},
        pair_ids={t: list(v) for t, v in pair_ids.items()},
        config=config or {},
        version=version,
    )
