import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synthetic(tmp_path_factory):
    """A 24-image, 32x32 synthetic dataset with mock pseudo-labels for every training image."""
    from enhseg import dataio
    from enhseg.experiments import annotate_all

    root = tmp_path_factory.mktemp("syn")
    desc = dataio.synthetic_dataset(root, seed=3, n_images=24, n_classes=3, size=32, n_val=6, color_cast=0.3)
    annotate_all(desc, root / "pseudo")
    return desc


def tiny_config(desc, out_dir, mode="semi", iters=4, **train_kw):
    from enhseg.config import TrainConfig

    cfg = TrainConfig()
    cfg.data.root = desc.root
    cfg.data.fraction = "1/4"
    cfg.data.pseudo_dir = str(Path(desc.root) / "pseudo")
    cfg.perturb.crop_size = 32
    cfg.optim.lr0 = 0.01
    cfg.train.mode = mode
    cfg.train.labeled_batch = 2
    cfg.train.unlabeled_batch = 2
    cfg.train.max_iters = iters
    cfg.train.eval_every = iters
    cfg.train.checkpoint_every = iters
    cfg.train.model_width = 4
    cfg.train.out_dir = str(out_dir)
    for k, v in train_kw.items():
        setattr(cfg.train, k, v)
    return cfg.validate()
