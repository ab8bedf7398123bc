"""Ablation sweeps: expert count, layer placement, modality placement, ViT vs MoE.

Every variant of a sweep runs on the same seeds, and each seed fixes the data
split, the initialisation and the batch order, so variants differ only in
the swept setting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .config import ExperimentConfig
from .errors import ConfigError
from .metrics import MetricReport, aggregate
from .train import evaluate_split, make_split, train

KINDS = ("expert_count", "layer_placement", "modality_placement", "vit_vs_moe")
# block ranges of a 12-block encoder, rescaled to the configured depth
REFERENCE_DEPTH = 12
REFERENCE_RANGES = ((0, 2), (5, 7), (9, 11), (0, 11))
SUMMARY_FIELDS = ("acer", "acc", "auc", "eer")


def scale_range(lo: int, hi: int, depth: int, reference: int = REFERENCE_DEPTH) -> tuple[int, ...]:
    """Blocks ``lo..hi`` of a ``reference``-deep encoder mapped onto ``depth`` blocks."""
    return tuple(sorted({i * depth // reference for i in range(lo, hi + 1)}))


def scale_layers(layers, depth_from: int, depth_to: int) -> tuple[int, ...]:
    return tuple(sorted({i * depth_to // depth_from for i in layers}))


def variants(kind: str, base: ExperimentConfig) -> list[tuple[str, dict]]:
    """``(name, config overrides)`` for each row of an ablation table."""
    if kind == "expert_count":
        return [(f"n={n}", {"n_experts": n, "k": 2}) for n in (2, 4, 6, 8)]
    if kind == "layer_placement":
        rows = []
        for lo, hi in REFERENCE_RANGES:
            layers = scale_range(lo, hi, base.depth)
            rows.append((f"{layers[0]}-{layers[-1]}", {"image_sue_layers": layers}))
        return rows
    if kind == "modality_placement":
        visual = base.image_sue_layers or tuple(range(base.depth))
        text = scale_layers(visual, base.depth, base.text_depth)
        return [
            ("visual MoE", {"image_sue_layers": visual, "text_sue_layers": (), "shared_expert": False}),
            ("text SUE", {"image_sue_layers": (), "text_sue_layers": text}),
            ("text&visual SUE", {"image_sue_layers": visual, "text_sue_layers": text}),
            ("visual SUE", {"image_sue_layers": visual, "text_sue_layers": ()}),
        ]
    if kind == "vit_vs_moe":
        visual = base.image_sue_layers or tuple(range(base.depth))
        common = {"head": "linear", "text_sue_layers": ()}
        return [
            ("ViT", {**common, "image_sue_layers": ()}),
            ("ViT+MoE", {**common, "image_sue_layers": visual, "shared_expert": False}),
            ("ViT+SUE", {**common, "image_sue_layers": visual, "shared_expert": True}),
        ]
    raise ConfigError(f"unknown ablation {kind!r}; expected one of {KINDS}")


@dataclass
class AblationRow:
    name: str
    config: ExperimentConfig
    reports: list[MetricReport] = field(default_factory=list)

    def summary(self) -> dict[str, tuple[float, float]]:
        return aggregate(self.reports)


@dataclass
class AblationResult:
    kind: str
    seeds: list[int]
    rows: list[AblationRow]

    def table(self) -> str:
        head = f"{'variant':<18}" + "".join(f"{f.upper():>18}" for f in SUMMARY_FIELDS)
        lines = [f"ablation {self.kind}  (seeds: {len(self.seeds)}, test split, mean ± std)", head]
        for row in self.rows:
            agg = row.summary()
            cells = "".join(f"{agg[f][0]:>10.4f} ± {agg[f][1]:<5.3f}" for f in SUMMARY_FIELDS)
            lines.append(f"{row.name:<18}{cells}")
        return "\n".join(lines)

    def records(self) -> list[dict]:
        out = []
        for row in self.rows:
            for seed, rep in zip(self.seeds, row.reports):
                out.append({"ablation": self.kind, "variant": row.name, "seed": seed, **rep.record()})
            agg = row.summary()
            out.append({
                "ablation": self.kind,
                "variant": row.name,
                "n_seeds": len(self.seeds),
                **{f"{k}_mean": m for k, (m, _) in agg.items()},
                **{f"{k}_std": s for k, (_, s) in agg.items()},
            })
        return out


def run_ablation(
    kind: str,
    base: ExperimentConfig,
    n_seeds: int = 5,
    on_run: Callable[[str, int, MetricReport], None] | None = None,
) -> AblationResult:
    rows = [AblationRow(name, base.replace(**overrides)) for name, overrides in variants(kind, base)]
    seeds = [base.seed + i for i in range(n_seeds)]
    for seed in seeds:
        split = make_split(base.replace(seed=seed))
        for row in rows:
            cfg = row.config.replace(seed=seed)
            result = train(cfg, split)
            report = evaluate_split(result.model, cfg, split, "test", result.bank)
            row.reports.append(report)
            if on_run is not None:
                on_run(row.name, seed, report)
    return AblationResult(kind, seeds, rows)
