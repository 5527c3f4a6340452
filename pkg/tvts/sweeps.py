"""
Sensitivity sweeps and the proxy ablation: repeated pre-training runs, each
followed by the linear probe
"""

import logging
from pathlib import Path
from typing import Any, List, Optional, Sequence, Union

import pandas as pd

from tvts.corpus import Corpus
from tvts.errors import ConfigError
from tvts.evalkit import held_out_sort_accuracy, linear_probe
from tvts.plots import plot_ablation, plot_sweep
from tvts.schemas import ProbeConfig, TrainConfig, build_config
from tvts.trainer import pretrain

logger = logging.getLogger(__name__)

SWEEP_KEYS = ("mask_ratio", "temperature", "lambda_sort")


def run_sweep(base: TrainConfig, key: str, values: Sequence[Any], out: Union[str, Path],
              probe: Optional[ProbeConfig] = None, corpus: Optional[Corpus] = None) -> pd.DataFrame:
    """
    Pre-train once per value (same seed, same corpus split) and record the linear
    probe and held-out sort accuracy. Writes sweep.csv and sweep_<key>.png to `out`.
    """
    if key not in SWEEP_KEYS:
        raise ConfigError(f"sweep key must be one of {SWEEP_KEYS}, got {key!r}")
    if not values:
        raise ConfigError("a sweep needs at least one value")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if corpus is None:
        if base.corpus is None:
            raise ConfigError("sweep needs a corpus path")
        corpus = Corpus.open(base.corpus)

    rows: List[dict] = []
    for value in values:
        data = base.model_dump()
        data.update({key: value, "run_dir": out / f"{key}={value}", "resume_from": None})
        config = build_config(TrainConfig, data)
        logger.info(f"Sweep {key}={value}")
        result = pretrain(config, corpus)
        train_ids, held_ids = corpus.split(result.config.holdout_fraction, result.config.seed)
        report = linear_probe(result.params, corpus, train_ids, held_ids, result.config, probe)
        rows.append({
            "key": key,
            "value": value,
            "probe_top1": report.top1,
            "sort_accuracy": held_out_sort_accuracy(result.params, corpus, held_ids, result.config),
            "final_L_total": result.history[-1].L_total if result.history else None,
            "checkpoint": str(result.checkpoint_path),
        })

    frame = pd.DataFrame(rows)
    frame.to_csv(out / "sweep.csv", index=False)
    plot_sweep(frame, key, out / f"sweep_{key}.png")
    logger.info(f"✅ Sweep over {key} finished: {len(rows)} runs in {out}")
    return frame


# -----------------------------------------------------------------------------
# Proxy ablation
# -----------------------------------------------------------------------------

RANDOM_INIT = "random"
ABLATION_ARMS = ("kway", "none", "videosort", RANDOM_INIT)


def arm_config(base: TrainConfig, arm: str, seed: int, run_dir: Union[str, Path]) -> TrainConfig:
    """The run for one arm; the random-init arm saves the untrained model of `seed`"""
    if arm not in ABLATION_ARMS:
        raise ConfigError(f"ablation arm must be one of {ABLATION_ARMS}, got {arm!r}")
    data = base.model_dump()
    data.update({"seed": seed, "run_dir": Path(run_dir), "resume_from": None})
    if arm == RANDOM_INIT:
        data.update({"proxy": "none", "steps": 0, "post_pretrain_steps": 0})
    else:
        data["proxy"] = arm
    return build_config(TrainConfig, data)


def ablation_summary(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean and spread of probe top-1 per arm, in the order the arms were run"""
    grouped = frame.groupby("arm", sort=False)["probe_top1"]
    return grouped.agg(["mean", "std", "count"]).rename(columns={"mean": "probe_top1", "std": "probe_std",
                                                                 "count": "seeds"})


def run_ablation(base: TrainConfig, seeds: Sequence[int], out: Union[str, Path],
                 arms: Sequence[str] = ABLATION_ARMS, probe: Optional[ProbeConfig] = None,
                 corpus: Optional[Corpus] = None) -> pd.DataFrame:
    """
    Pre-train every arm once per seed and fit the linear probe on each encoder.
    Writes ablation.csv (one row per run), ablation_summary.csv and ablation.png to `out`.
    """
    if not seeds:
        raise ConfigError("an ablation needs at least one seed")
    unknown = [arm for arm in arms if arm not in ABLATION_ARMS]
    if unknown or not arms:
        raise ConfigError(f"ablation arms must be drawn from {ABLATION_ARMS}, got {list(arms)}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if corpus is None:
        if base.corpus is None:
            raise ConfigError("ablation needs a corpus path")
        corpus = Corpus.open(base.corpus)

    rows: List[dict] = []
    for arm in arms:
        for seed in seeds:
            config = arm_config(base, arm, seed, out / f"{arm}_seed{seed}")
            logger.info(f"Ablation arm {arm}, seed {seed}")
            result = pretrain(config, corpus)
            train_ids, held_ids = corpus.split(result.config.holdout_fraction, result.config.seed)
            report = linear_probe(result.params, corpus, train_ids, held_ids, result.config, probe)
            rows.append({
                "arm": arm,
                "seed": seed,
                "probe_top1": report.top1,
                "sort_accuracy": held_out_sort_accuracy(result.params, corpus, held_ids, result.config),
                "checkpoint": str(result.checkpoint_path),
            })

    frame = pd.DataFrame(rows)
    frame.to_csv(out / "ablation.csv", index=False)
    summary = ablation_summary(frame)
    summary.to_csv(out / "ablation_summary.csv")
    plot_ablation(summary, out / "ablation.png")
    logger.info(f"✅ Ablation finished: {len(arms)} arms x {len(seeds)} seeds in {out}")
    return frame
