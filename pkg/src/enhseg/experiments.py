"""Desk-scale end-to-end experiment: semi-supervised vs supervised-only on synthetic data."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio
from .config import TrainConfig
from .eval import ConfusionMatrix, confusion_accumulate, miou


@dataclass
class DeskSetup:
    n_images: int = 200
    n_val: int = 50
    n_classes: int = 3
    size: int = 64
    data_seed: int = 0
    # per-image illuminant; supervised learning from 25 images has to discover
    # colour constancy on its own, the mock annotator white-balances by design
    color_cast: float = 0.7
    fraction: str = "1/8"
    iters: int = 1500
    lr0: float = 0.01
    model_width: int = 16
    seeds: tuple[int, ...] = (0, 1, 2)
    render: dict = field(default_factory=dict)


def make_data(root: str | Path, setup: DeskSetup) -> dataio.DatasetDescriptor:
    root = Path(root)
    if (root / "dataset.json").is_file():
        return dataio.DatasetDescriptor.load(root)
    return dataio.synthetic_dataset(root, seed=setup.data_seed, n_images=setup.n_images, n_classes=setup.n_classes,
                                    size=setup.size, n_val=setup.n_val, color_cast=setup.color_cast, **setup.render)


def desk_config(root: str | Path, out_dir: str | Path, setup: DeskSetup, mode: str, seed: int) -> TrainConfig:
    cfg = TrainConfig()
    cfg.data.root = str(root)
    cfg.data.fraction = setup.fraction
    cfg.data.pseudo_dir = str(Path(root) / "pseudo")
    cfg.perturb.crop_size = setup.size
    cfg.optim.lr0 = setup.lr0
    cfg.train.mode = mode
    cfg.train.max_iters = setup.iters
    cfg.train.eval_every = setup.iters
    cfg.train.checkpoint_every = setup.iters
    cfg.train.model_width = setup.model_width
    cfg.train.seed = seed
    cfg.train.out_dir = str(Path(out_dir) / f"{mode}-seed{seed}")
    return cfg.validate()


def annotate_all(desc: dataio.DatasetDescriptor, pseudo_dir: str | Path, workers: int = 1) -> dict:
    """Mock zero-shot annotation of every training image; returns its mIoU against ground truth."""
    from .annotator import annotate_dataset
    from .providers import DEFAULT_TEMPLATE, mock_providers

    prop, feat, text = mock_providers(np.asarray(desc.meta["palette"]), desc.vocabulary.names)
    ids = desc.train_ids()
    annotate_dataset(ids, lambda i: dataio.load_sample(desc, i, False)[0], prop, feat, text, desc.vocabulary,
                     pseudo_dir, DEFAULT_TEMPLATE, workers=workers)
    cm = ConfusionMatrix(desc.vocabulary.num_classes)
    for i in ids:
        confusion_accumulate(dataio.load_pseudo(pseudo_dir, i, desc.vocabulary), dataio.load_sample(desc, i)[1],
                             cm, desc.vocabulary.ignore_id)
    return {"miou": miou(cm), "n_images": len(ids)}


def run_desk(root: str | Path, out_dir: str | Path, setup: DeskSetup | None = None, log=print) -> dict:
    """Annotate, then train supervised and semi-supervised for each seed; report final val mIoU."""
    from .train import Trainer

    setup = setup or DeskSetup()
    t0 = time.time()
    desc = make_data(root, setup)
    pseudo = annotate_all(desc, Path(root) / "pseudo")
    log(f"pseudo-label mIoU {pseudo['miou']:.4f}")
    rows = []
    for seed in setup.seeds:
        row = {"seed": seed}
        for mode in ("supervised", "semi"):
            tr = Trainer(desk_config(root, out_dir, setup, mode, seed), desc)
            t = time.time()
            tr.run(validate=False)
            row[mode] = tr.validate()["miou"]
            row[f"{mode}_seconds"] = time.time() - t
            log(f"seed {seed} {mode:<10} val mIoU {row[mode]:.4f}  ({row[f'{mode}_seconds']:.0f}s)")
        row["margin"] = row["semi"] - row["supervised"]
        rows.append(row)
    return {"pseudo_miou": pseudo["miou"], "runs": rows, "wins": sum(r["margin"] > 0 for r in rows),
            "seconds": time.time() - t0}
