"""Ablation recipes: paired-seed comparisons over fusion, stages, losses,
and warm starting. Every variant of one run shares the base config's seeds,
so differences come from the ablated switch alone."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

from .config import ExperimentConfig, format_config, with_model
from .train import evaluate, train

ABLATION_NAMES = ("tpavi", "fusion_stages", "loss", "pretrain")

STAGE_SUBSETS = ((1,), (2,), (3,), (4,), (3, 4), (2, 3, 4), (1, 2, 3, 4))


def _variants(name: str, base: ExperimentConfig):
    if name == "tpavi":
        all_stages = base.model.tpavi_stages or (1, 2, 3, 4)
        return [
            ("none", replace(with_model(base, fusion_mode="none", tpavi_stages=()),
                             loss_variant="none")),
            ("add", with_model(base, fusion_mode="add", tpavi_stages=all_stages)),
            ("tpavi", with_model(base, fusion_mode="tpavi", tpavi_stages=all_stages)),
        ]
    if name == "fusion_stages":
        return [(",".join(str(s) for s in subset),
                 with_model(base, fusion_mode="tpavi", tpavi_stages=subset))
                for subset in STAGE_SUBSETS]
    if name == "loss":
        return [(variant, replace(base, loss_variant=variant))
                for variant in ("none", "av", "vv")]
    if name == "pretrain":
        if not base.pretrain_data_dir:
            raise ValueError("the pretrain ablation needs pretrain_data_dir "
                             "pointing at a single-source dataset")
        return [("scratch", base), ("pretrained", base)]
    raise ValueError(f"unknown ablation {name!r}; choose from {ABLATION_NAMES}")


def run_ablation(name: str, base: ExperimentConfig, out_dir) -> list:
    """Train every variant and report (variant, mIoU, F-score) on the test split.

    Writes one checkpoint, config, and metrics CSV per variant plus a summary
    CSV; returns the summary rows.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant, config in _variants(name, base):
        tag = variant.replace(",", "")
        if name == "pretrain" and variant == "pretrained":
            source = replace(config, setting="s4", loss_variant="none",
                             data_dir=config.pretrain_data_dir)
            warm_path = out / f"{name}_{tag}_source.ckpt"
            train(source, checkpoint_path=warm_path)
            config = replace(config, init_checkpoint=str(warm_path))
        ckpt = out / f"{name}_{tag}.ckpt"
        (out / f"{name}_{tag}.cfg").write_text(format_config(config), encoding="utf-8")
        train(config, checkpoint_path=ckpt)
        report = evaluate(ckpt, config.data_dir, "test",
                          csv_path=out / f"{name}_{tag}_test.csv",
                          threshold=config.threshold)
        rows.append((variant, report.miou, report.fscore))

    lines = ["variant,miou,fscore"]
    lines += [f"{v},{m:.6f},{f:.6f}" for v, m, f in rows]
    (out / f"{name}_summary.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows
