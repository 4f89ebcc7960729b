"""Semi-supervised training loop with enhanced labels.

Every random draw is derived from ``(seed, iteration, slot)``, so a run is
reproducible from its config and a resumed run continues the same trajectory
given only model and optimizer state.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import dataio
from .config import TrainConfig, save_config, to_dict
from .core import ConfigError, DataError
from .enhance import enhance_labels, enhancement_stats
from .eval import evaluate
from .loss import SmoothingConfig, smoothed_ce_logits, supervised_loss, total_loss
from .models import SegModel, build_model
from .perturb import box_mask, feature_dropout, unlabeled_views, weak_view

log = logging.getLogger(__name__)

# stream tags for SeedSequence-derived generators
_LABELED_ORDER, _UNLABELED_ORDER, _LABELED_AUG, _UNLABELED_AUG, _BATCH, _DROPOUT = range(1, 7)


def poly_lr(iteration: int, max_iter: int, lr0: float, power: float = 0.9) -> float:
    if max_iter <= 0:
        raise ConfigError("max_iter must be positive")
    if not 0 <= iteration <= max_iter:
        raise ConfigError(f"iteration {iteration} outside [0, {max_iter}]")
    return lr0 * (1 - iteration / max_iter) ** power


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def _torch_gen(*key: int) -> torch.Generator:
    seed = int(np.random.SeedSequence([int(k) for k in key]).generate_state(1, dtype=np.uint64)[0] >> 1)
    return torch.Generator().manual_seed(seed)


def stream_ids(ids, seed: int, tag: int, iteration: int, batch: int) -> list[str]:
    """Ids at positions ``[iteration*batch, (iteration+1)*batch)`` of a reshuffled-per-pass stream."""
    n = len(ids)
    out = []
    perms: dict[int, np.ndarray] = {}
    for k in range(iteration * batch, (iteration + 1) * batch):
        e, pos = divmod(k, n)
        if e not in perms:
            perms[e] = _rng(seed, tag, e).permutation(n)
        out.append(ids[perms[e][pos]])
    return out


@dataclass
class TrainState:
    iteration: int
    best_miou: float = -1.0

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "best_miou": self.best_miou}


def _to_tensor_images(batch: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(batch)).permute(0, 3, 1, 2).contiguous().float()


def _slice(feats, a, b):
    return tuple(f[a:b] for f in feats)


def _cat(*featss):
    return tuple(torch.cat(parts, 0) for parts in zip(*featss))


def train_step(labeled: dict, unlabeled: dict | None, model: SegModel, optimizer: torch.optim.Optimizer,
               state: TrainState, cfg: TrainConfig, num_classes: int, ignore_id: int) -> dict:
    """One update on a labeled batch and (in semi mode) an unlabeled batch.

    ``labeled``: ``image (B,3,h,w)``, ``label (B,h,w)``.
    ``unlabeled``: ``weak``, ``strong1``, ``strong2`` images, ``pseudo``,
    ``valid``, ``box1``/``box2`` masks and ``perm1``/``perm2`` partner indices.
    """
    t = cfg.train
    lr = poly_lr(state.iteration, t.max_iters, cfg.optim.lr0, cfg.optim.poly_power)
    for g in optimizer.param_groups:
        g["lr"] = lr
    model.train()
    x_l, y_l = labeled["image"], labeled["label"]
    Bl = x_l.shape[0]
    out = {"iter": state.iteration, "lr": lr}

    if unlabeled is None:
        loss_s = supervised_loss(model(x_l), y_l, ignore_id)
        loss_u = torch.zeros(())
        loss = loss_s
        out.update(frac_from_pseudo=0.0, frac_from_model=0.0, frac_ignore=0.0)
    else:
        x_w = unlabeled["weak"]
        with torch.no_grad():
            if not t.weak_bn_train:
                model.eval()
            p_w = F.softmax(model(x_w), dim=1)
            model.train()
        lp = unlabeled["pseudo"]
        valid = unlabeled["valid"]
        l_e = enhance_labels(p_w, lp, t.tau, ignore_id, class_axis=1)
        l_e = torch.where(valid, l_e, torch.full_like(l_e, ignore_id))
        l_e1 = torch.where(unlabeled["box1"], l_e[unlabeled["perm1"]], l_e)
        l_e2 = torch.where(unlabeled["box2"], l_e[unlabeled["perm2"]], l_e)
        out.update(enhancement_stats(p_w, lp, t.tau, ignore_id, class_axis=1, valid=valid))

        feats = model.encode(torch.cat([x_l, x_w]))
        dropped = tuple(feature_dropout(f, cfg.perturb.fp_dropout, unlabeled.get("generator"))
                        for f in _slice(feats, Bl, None))
        size = x_l.shape[-2:]
        logits = model.decode(_cat(_slice(feats, 0, Bl), dropped), size)
        logits_l, logits_fp = logits[:Bl], logits[Bl:]
        Bu = x_w.shape[0]
        logits_s = model(torch.cat([unlabeled["strong1"], unlabeled["strong2"]]))
        logits_s1, logits_s2 = logits_s[:Bu], logits_s[Bu:]

        eps = SmoothingConfig(t.smoothing_rule, t.epsilon).resolve(num_classes)
        loss_s = supervised_loss(logits_l, y_l, ignore_id)
        loss_u = (smoothed_ce_logits(logits_fp, l_e, eps, ignore_id)
                  + smoothed_ce_logits(logits_s1, l_e1, eps, ignore_id)
                  + smoothed_ce_logits(logits_s2, l_e2, eps, ignore_id))
        loss = total_loss(loss_s, loss_u)

    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    out.update(loss_s=loss_s.item(), loss_u=loss_u.item(), loss_total=loss.item())
    return out


def make_optimizer(model: SegModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    o = cfg.optim
    return torch.optim.SGD(model.parameters(), lr=o.lr0, momentum=o.momentum, weight_decay=o.weight_decay)


class Trainer:
    """Owns data, model, optimizer; runs the loop with checkpointing and validation."""

    def __init__(self, cfg: TrainConfig, descriptor: dataio.DatasetDescriptor | None = None):
        self.cfg = cfg.validate()
        t = cfg.train
        self.desc = descriptor or dataio.DatasetDescriptor.load(cfg.data.root)
        self.vocab = self.desc.vocabulary
        self.split = dataio.load_split(self.desc, cfg.data.fraction, cfg.data.split_seed)
        self.labeled_ids = list(self.split.labeled_ids)
        self.unlabeled_ids = list(self.split.unlabeled_ids)
        if not self.unlabeled_ids and cfg.data.reuse_labeled_when_full:
            self.unlabeled_ids = list(self.labeled_ids)
        if t.mode == "semi" and not self.unlabeled_ids:
            raise ConfigError("semi-supervised mode needs unlabeled images")
        self.out_dir = Path(t.out_dir)
        self._labeled = {i: dataio.load_sample(self.desc, i, True) for i in self.labeled_ids}
        self._unlabeled: dict = {}
        self._pseudo: dict = {}
        if t.mode == "semi":
            manifest = dataio.read_manifest(cfg.pseudo_dir)
            for i in self.unlabeled_ids:
                self._unlabeled[i] = dataio.load_sample(self.desc, i, False)[0]
                try:
                    self._pseudo[i] = dataio.load_pseudo(cfg.pseudo_dir, i, self.vocab, manifest)
                except DataError as e:
                    raise DataError(f"missing pseudo-label for sample {i}: {e}") from e
        torch.manual_seed(t.seed)
        self.model = build_model(t.model, self.vocab.num_classes, t.model_width).to(t.device)
        self.optimizer = make_optimizer(self.model, cfg)
        self.state = TrainState(0)
        self._pool = ThreadPoolExecutor(t.workers) if t.workers > 1 else None

    # -- batches ----------------------------------------------------------

    def _map(self, fn, items):
        return list(self._pool.map(fn, items)) if self._pool else [fn(x) for x in items]

    def labeled_batch(self, it: int) -> dict:
        t, cfg = self.cfg.train, self.cfg
        ids = stream_ids(self.labeled_ids, t.seed, _LABELED_ORDER, it, t.labeled_batch)

        def prep(slot_id):
            slot, i = slot_id
            img, gt = self._labeled[i]
            w, (g,), _ = weak_view(img, [gt], _rng(t.seed, _LABELED_AUG, it, slot), cfg.perturb,
                                   self.vocab.ignore_id)
            return w, g.ids

        res = self._map(prep, list(enumerate(ids)))
        return {"ids": ids, "image": _to_tensor_images([r[0] for r in res]).to(t.device),
                "label": torch.from_numpy(np.stack([r[1] for r in res])).long().to(t.device)}

    def unlabeled_batch(self, it: int) -> dict:
        t, cfg = self.cfg.train, self.cfg
        ids = stream_ids(self.unlabeled_ids, t.seed, _UNLABELED_ORDER, it, t.unlabeled_batch)
        missing = [i for i in ids if i not in self._pseudo]
        if missing:
            raise DataError(f"missing pseudo-label for sample {missing[0]}")
        rngs = [_rng(t.seed, _UNLABELED_AUG, it, s) for s in range(len(ids))]
        v = unlabeled_views([self._unlabeled[i] for i in ids], [self._pseudo[i] for i in ids], rngs,
                            _rng(t.seed, _BATCH, it), cfg.perturb, self.vocab.ignore_id)
        shape = v.weak.shape[1:3]
        dev = t.device
        return {
            "ids": ids,
            "weak": _to_tensor_images(list(v.weak)).to(dev),
            "strong1": _to_tensor_images(list(v.strong1)).to(dev),
            "strong2": _to_tensor_images(list(v.strong2)).to(dev),
            "pseudo": torch.from_numpy(v.pseudo).long().to(dev),
            "valid": torch.from_numpy(v.valid).to(dev),
            "box1": torch.from_numpy(np.stack([box_mask(shape, p.cutmix_box) for p in v.params1])).to(dev),
            "box2": torch.from_numpy(np.stack([box_mask(shape, p.cutmix_box) for p in v.params2])).to(dev),
            "perm1": torch.tensor([p.cutmix_partner for p in v.params1]),
            "perm2": torch.tensor([p.cutmix_partner for p in v.params2]),
            "generator": _torch_gen(t.seed, _DROPOUT, it),
        }

    # -- checkpoints ------------------------------------------------------

    def save_checkpoint(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        torch.save({
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "state": self.state.to_dict(),
            "config": to_dict(self.cfg),
            "vocabulary": self.vocab.to_dict(),
            "torch_rng": torch.get_rng_state(),
        }, tmp)
        tmp.replace(path)

    def load_checkpoint(self, path: Path) -> None:
        ck = torch.load(path, map_location=self.cfg.train.device, weights_only=False)
        if ck["vocabulary"]["names"] != list(self.vocab.names):
            raise DataError(f"checkpoint {path} was trained on a different vocabulary")
        self.model.load_state_dict(ck["model"])
        self.optimizer.load_state_dict(ck["optimizer"])
        self.state = TrainState(**ck["state"])
        torch.set_rng_state(ck["torch_rng"])

    # -- loop -------------------------------------------------------------

    def predict(self, img: np.ndarray) -> np.ndarray:
        self.model.eval()
        with torch.no_grad():
            x = _to_tensor_images([img]).to(self.cfg.train.device)
            return self.model(x).argmax(1)[0].cpu().numpy()

    def validate(self, ids=None) -> dict:
        ids = self.desc.val_ids() if ids is None else ids
        samples = ((i, *dataio.load_sample(self.desc, i, True)) for i in ids)
        return evaluate(self.predict, samples, self.vocab)

    def step(self) -> dict:
        it = self.state.iteration
        lab = self.labeled_batch(it)
        unl = self.unlabeled_batch(it) if self.cfg.train.mode == "semi" else None
        rec = train_step(lab, unl, self.model, self.optimizer, self.state, self.cfg,
                         self.vocab.num_classes, self.vocab.ignore_id)
        self.state.iteration += 1
        return rec

    def run(self, resume: bool = False, max_iters: int | None = None, validate: bool = True) -> dict:
        t = self.cfg.train
        self.out_dir.mkdir(parents=True, exist_ok=True)
        save_config(self.cfg, self.out_dir / "config.yaml")
        last, best = self.out_dir / "last.pt", self.out_dir / "best.pt"
        metrics_path = self.out_dir / "metrics.jsonl"
        if resume:
            if not last.is_file():
                raise DataError(f"nothing to resume: {last} missing")
            self.load_checkpoint(last)
            _truncate_log(metrics_path, self.state.iteration)
        elif metrics_path.exists():
            metrics_path.unlink()
        stop = t.max_iters if max_iters is None else min(t.max_iters, max_iters)
        history = []
        t0 = time.time()
        with open(metrics_path, "a") as log_fh:
            while self.state.iteration < stop:
                rec = self.step()
                history.append(rec)
                log_fh.write(json.dumps(rec) + "\n")
                it = self.state.iteration
                if validate and (it % t.eval_every == 0 or it == t.max_iters):
                    res = self.validate()
                    log.info("iter %d  loss %.4f  val mIoU %.4f", it, rec["loss_total"], res["miou"])
                    if res["miou"] > self.state.best_miou:
                        self.state.best_miou = res["miou"]
                        self.save_checkpoint(best)
                if it % t.checkpoint_every == 0 or it == stop:
                    log_fh.flush()
                    self.save_checkpoint(last)
        return {"best_miou": self.state.best_miou, "last_checkpoint": str(last),
                "best_checkpoint": str(best) if best.exists() else None,
                "metrics": str(metrics_path), "history": history, "seconds": time.time() - t0,
                "parameter_count": self.model.parameter_count}


def _truncate_log(path: Path, iteration: int) -> None:
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln.strip() and json.loads(ln)["iter"] < iteration]
    path.write_text("".join(ln + "\n" for ln in keep))


def run_training(cfg: TrainConfig, resume: bool = False, descriptor=None, **kw) -> dict:
    return Trainer(cfg, descriptor).run(resume=resume, **kw)


def load_model(checkpoint: str | Path, device: str = "cpu") -> tuple[SegModel, dict]:
    """Rebuild the model stored in a checkpoint; returns ``(model, checkpoint_dict)``."""
    from .config import from_dict
    from .core import ClassVocabulary

    p = Path(checkpoint)
    if not p.is_file():
        raise DataError(f"checkpoint not found: {p}")
    ck = torch.load(p, map_location=device, weights_only=False)
    cfg = from_dict(ck["config"])
    vocab = ClassVocabulary.from_dict(ck["vocabulary"])
    model = build_model(cfg.train.model, vocab.num_classes, cfg.train.model_width)
    model.load_state_dict(ck["model"])
    return model.eval(), ck

